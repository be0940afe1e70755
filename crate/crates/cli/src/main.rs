//! `treepose` — train, run, and score tree-structured pose models.
//!
//! Subcommands mirror the pipeline stages: `synth` generates a seeded
//! stick-figure dataset, `learn-tree` learns the part tree, `learn-categories`
//! fits visual categories for one or all combined parts, `train` runs the
//! full training recipe, `infer` detects poses, and `eval` scores detections
//! with PCP. Exit codes: 0 ok, 2 bad input, 3 non-convergence under
//! `--strict`.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use treepose_core::eval::MatchingPolicy;
use treepose_core::io::{
    load_annotations, read_detection_records, write_detection_records, AnnotationFormat, PartsDoc,
    PipelineConfig,
};
use treepose_core::model::{load_model, save_model};
use treepose_core::pipeline::{
    evaluate_detections, ground_truth_limbs, run_inference, run_training, Manifest,
};
use treepose_core::synth::{generate_dataset, SynthConfig};
use treepose_core::treelearn::{
    cl_grouping, locations_to_samples, part_distance_matrix, SampleScheme,
};

#[derive(Parser)]
#[command(name = "treepose", version, about)]
struct Cli {
    /// Pipeline configuration file (JSON); defaults apply when omitted.
    #[arg(long, global = true, env = "TREEPOSE_CONFIG")]
    config: Option<PathBuf>,

    /// Override the configured RNG seed.
    #[arg(long, global = true, env = "TREEPOSE_SEED")]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "TREEPOSE_JOBS", default_value_t = 0)]
    jobs: usize,

    /// Escalate non-convergence warnings to exit code 3.
    #[arg(long, global = true, env = "TREEPOSE_STRICT")]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic stick-figure dataset.
    Synth(SynthArgs),
    /// Learn the part tree from annotated locations.
    LearnTree(LearnTreeArgs),
    /// Learn visual categories for combined parts.
    LearnCategories(LearnCategoriesArgs),
    /// Train a full pose model from a dataset manifest.
    Train(TrainArgs),
    /// Detect poses in images.
    Infer(InferArgs),
    /// Score detections against ground truth with PCP.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 150)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 40)]
    neg: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 132)]
    image_size: usize,
}

#[derive(Args)]
struct LearnTreeArgs {
    /// Annotation file.
    #[arg(long)]
    annotations: PathBuf,
    /// Annotation format: generic-json, lsp-mat-export, or parse-style.
    #[arg(long, default_value = "generic-json")]
    format: String,
    /// Part roster document.
    #[arg(long)]
    parts: PathBuf,
    /// Edge-list output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional DOT graph output path.
    #[arg(long)]
    dot: Option<PathBuf>,
}

#[derive(Args)]
struct LearnCategoriesArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value = "generic-json")]
    format: String,
    #[arg(long)]
    parts: PathBuf,
    /// Image directory.
    #[arg(long)]
    images_root: PathBuf,
    /// Restrict to one combined part by name (default: all).
    #[arg(long)]
    part: Option<String>,
    /// Output JSON bundle.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Model output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log output (JSON lines, one record per round).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Directory of PGM images, or a single image path.
    #[arg(long)]
    images: PathBuf,
    /// Detections output (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Detection threshold (overrides config).
    #[arg(long)]
    threshold: Option<f64>,
    /// Cap on pyramid levels (0 = no cap).
    #[arg(long, default_value_t = 0)]
    max_levels: usize,
    /// Dump per-part score maps as PGM heat images into this directory.
    #[arg(long)]
    dump_scores: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Detections file from `infer`.
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth annotations.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value = "generic-json")]
    format: String,
    #[arg(long)]
    parts: PathBuf,
    /// best-score (default) or best-pcp.
    #[arg(long, default_value = "best-score")]
    matching: String,
    /// Machine-readable report output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print one line per image with its matched limb count.
    #[arg(long)]
    per_image: bool,
}

/// Errors that should exit with code 2 (bad input) versus 3 (escalated
/// warning under --strict).
enum Outcome {
    Ok,
    Warning(String),
}

fn main() {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    match run(&cli) {
        Ok(Outcome::Ok) => {}
        Ok(Outcome::Warning(msg)) => {
            eprintln!("warning: {msg}");
            if cli.strict {
                std::process::exit(3);
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).context("loading config")?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Synth(args) => {
            let synth_cfg = SynthConfig {
                image_width: args.image_size,
                image_height: args.image_size,
                ..SynthConfig::default()
            };
            generate_dataset(&args.out, args.train, args.test, args.neg, config.seed, &synth_cfg)?;
            // A ready-to-train manifest pointing at the generated layout.
            let manifest = serde_json::json!({
                "annotations": "train/annotations.json",
                "format": "generic-json",
                "images_root": "train",
                "negatives_dir": "neg",
                "parts": "parts.json",
            });
            std::fs::write(
                args.out.join("manifest.json"),
                serde_json::to_string_pretty(&manifest)?,
            )?;
            println!(
                "wrote {} train / {} test / {} negative images to {}",
                args.train,
                args.test,
                args.neg,
                args.out.display()
            );
            Ok(Outcome::Ok)
        }

        Command::LearnTree(args) => {
            let format: AnnotationFormat = args.format.parse()?;
            let (annotations, report) = load_annotations(&args.annotations, format)?;
            let parts_doc = PartsDoc::load(&args.parts)?;
            let parts = parts_doc.to_parts(config.single_types, config.combined_types)?;
            let scheme: SampleScheme = config.sample_scheme.parse()?;
            let (samples, _) = locations_to_samples(&annotations, &parts, scheme)?;
            let d = part_distance_matrix(&samples, parts.len(), scheme, config.d_max)?;
            let lt = cl_grouping(&d, config.grouping_tolerance)?;
            println!(
                "instances used: {} (dropped {})",
                report.loaded, report.dropped_incomplete
            );
            println!("hidden_count: {}", lt.hidden_count);

            let mut edge_list = String::new();
            for (e, &(a, b)) in lt.tree.edges().iter().enumerate() {
                let name = |n: usize| {
                    if n < parts.len() {
                        parts[n].name.clone()
                    } else {
                        format!("hidden_{}", n - parts.len())
                    }
                };
                edge_list.push_str(&format!(
                    "{}\t{}\t{:.6}\n",
                    name(a),
                    name(b),
                    lt.edge_lengths[e]
                ));
            }
            std::fs::write(&args.out, edge_list)?;
            if let Some(dot_path) = &args.dot {
                let mut dot = String::from("graph parts {\n");
                for (n, p) in parts.iter().enumerate() {
                    let shape = if p.constituent_ids.is_empty() {
                        "ellipse"
                    } else {
                        "box"
                    };
                    dot.push_str(&format!("  n{} [label=\"{}\", shape={}];\n", n, p.name, shape));
                }
                for h in 0..lt.hidden_count {
                    dot.push_str(&format!(
                        "  n{} [label=\"hidden_{}\", shape=diamond];\n",
                        parts.len() + h,
                        h
                    ));
                }
                for &(a, b) in lt.tree.edges() {
                    dot.push_str(&format!("  n{} -- n{};\n", a, b));
                }
                dot.push_str("}\n");
                std::fs::write(dot_path, dot)?;
            }
            Ok(Outcome::Ok)
        }

        Command::LearnCategories(args) => {
            let bundle = learn_categories_bundle(args, &config)?;
            std::fs::write(&args.out, serde_json::to_string(&bundle)?)?;
            println!("wrote category bundle to {}", args.out.display());
            Ok(Outcome::Ok)
        }

        Command::Train(args) => {
            let manifest = Manifest::load(&args.manifest)?;
            let bundle = run_training(&manifest, &config, |msg| println!("{msg}"))?;
            save_model(&args.out, &bundle.model, &bundle.parts, &bundle.tree)?;
            println!("model written to {}", args.out.display());
            if let Some(log_path) = &args.log {
                let mut log = String::new();
                log.push_str(&format!(
                    "{}\n",
                    serde_json::json!({
                        "tree": bundle.tree_report,
                        "category_rounds": bundle.category_rounds,
                        "converged": bundle.converged,
                    })
                ));
                for r in &bundle.rounds {
                    log.push_str(&serde_json::to_string(r)?);
                    log.push('\n');
                }
                std::fs::write(log_path, log)?;
            }
            if bundle.converged {
                Ok(Outcome::Ok)
            } else {
                Ok(Outcome::Warning("training did not converge; wrote best iterate".into()))
            }
        }

        Command::Infer(args) => {
            let (model, parts, tree) = load_model(&args.model)?;
            let mut config = config;
            if let Some(t) = args.threshold {
                config.threshold = t;
            }
            let mut paths: Vec<PathBuf> = if args.images.is_dir() {
                std::fs::read_dir(&args.images)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().map_or(false, |e| e == "pgm"))
                    .collect()
            } else {
                vec![args.images.clone()]
            };
            paths.sort();
            let images: Vec<(String, treepose_core::features::ImageGray)> = paths
                .iter()
                .map(|p| {
                    Ok((
                        p.file_name().unwrap().to_string_lossy().into_owned(),
                        treepose_core::io::load_image(p)?,
                    ))
                })
                .collect::<treepose_core::Result<_>>()?;
            let per_image = run_inference(&model, &parts, &tree, &images, &config, args.max_levels)?;

            if let Some(dump_dir) = &args.dump_scores {
                std::fs::create_dir_all(dump_dir)?;
                dump_score_maps(&model, &parts, &images, &config, dump_dir)?;
            }

            let records: Vec<_> = per_image.into_iter().flatten().collect();
            write_detection_records(&args.out, &records)?;
            println!(
                "{} detections over {} images written to {}",
                records.len(),
                images.len(),
                args.out.display()
            );
            Ok(Outcome::Ok)
        }

        Command::Eval(args) => {
            let format: AnnotationFormat = args.format.parse()?;
            let (annotations, _) = load_annotations(&args.annotations, format)?;
            let parts_doc = PartsDoc::load(&args.parts)?;
            let parts = parts_doc.to_parts(config.single_types, config.combined_types)?;
            let records = read_detection_records(&args.detections)?;
            let matching = match args.matching.as_str() {
                "best-score" => MatchingPolicy::BestScore,
                "best-pcp" => MatchingPolicy::BestPcp,
                other => anyhow::bail!("unknown matching policy {other:?}"),
            };
            let report = evaluate_detections(&records, &annotations, &parts, matching)?;
            print!("{}", report.render_table());
            if args.per_image {
                for ann in &annotations.images {
                    let gt = ground_truth_limbs(ann, &parts);
                    let candidates: Vec<_> =
                        records.iter().filter(|r| r.image == ann.image).collect();
                    let best = candidates
                        .iter()
                        .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap());
                    let matched = best.map_or(0, |r| {
                        gt.iter()
                            .filter(|t| {
                                r.limbs.iter().any(|p| {
                                    p.name == t.name
                                        && treepose_core::eval::pcp_match(p, t).unwrap_or(false)
                                })
                            })
                            .count()
                    });
                    println!("{}: {}/{}", ann.image, matched, gt.len());
                }
            }
            if let Some(out) = &args.out {
                std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(Outcome::Ok)
        }
    }
}

fn learn_categories_bundle(
    args: &LearnCategoriesArgs,
    config: &PipelineConfig,
) -> anyhow::Result<serde_json::Value> {
    use treepose_core::model::PartKind;
    let format: AnnotationFormat = args.format.parse()?;
    let (annotations, _) = load_annotations(&args.annotations, format)?;
    let parts_doc = PartsDoc::load(&args.parts)?;
    let parts = parts_doc.to_parts(config.single_types, config.combined_types)?;

    let mut out = serde_json::Map::new();
    for part in &parts {
        if part.kind != PartKind::Combined {
            continue;
        }
        if let Some(only) = &args.part {
            if &part.name != only {
                continue;
            }
        }
        let model = treepose_core::pipeline::learn_categories_for_part(
            part,
            &annotations,
            &args.images_root,
            config,
        )?;
        out.insert(
            part.name.clone(),
            serde_json::json!({
                "labels": model.labels,
                "rounds": model.rounds,
                "converged": model.converged,
                "objective_trace": model.objective_trace,
                "filter_shape": model.filters[0].shape().to_vec(),
                "filters": model
                    .filters
                    .iter()
                    .map(|f| f.iter().copied().collect::<Vec<f64>>())
                    .collect::<Vec<_>>(),
            }),
        );
    }
    if out.is_empty() {
        anyhow::bail!("no combined parts matched");
    }
    Ok(serde_json::Value::Object(out))
}

fn dump_score_maps(
    model: &treepose_core::model::ModelParameters,
    parts: &[treepose_core::model::PartSpec],
    images: &[(String, treepose_core::features::ImageGray)],
    config: &PipelineConfig,
    dir: &std::path::Path,
) -> anyhow::Result<()> {
    use treepose_core::pipeline::inference_pyramid;
    use treepose_core::scoring::{filter_response, score_map_to_pgm};
    for (name, img) in images {
        let pyramid = inference_pyramid(img, model, config.interval, 1)?;
        for part in parts {
            for t in 0..part.num_types {
                let resp = filter_response(&pyramid.levels[0], &model.appearance[part.id][t])?;
                let bytes = score_map_to_pgm(&resp);
                std::fs::write(dir.join(format!("{}_{}_t{}.pgm", name, part.name, t)), bytes)?;
            }
        }
    }
    Ok(())
}
