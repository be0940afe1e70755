//! End-to-end orchestration used by the CLI: tree learning from a dataset,
//! the full training recipe (categories, types, biases, joint max-margin),
//! batch inference, and PCP evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{evaluate, LimbSegment, MatchingPolicy, PcpReport, ScoredSkeleton};
use crate::features::{crop_patch, hog_extract, resize_bilinear, FeaturePyramid, HogMap, ImageGray};
use crate::inference::{fit_skeleton, infer_map};
use crate::io::{
    load_annotations, load_image, Annotation, AnnotationFormat, AnnotationSet, DetectionRecord,
    PartRecord, PartsDoc, PipelineConfig,
};
use crate::model::{ModelParameters, PartKind, PartSpec, PoseHypothesis, TreeStructure};
use crate::training::{
    derive_single_part_types, estimate_anchors, estimate_compatibility, kmeans,
    learn_visual_categories, level_for_height, single_part_displacement_features,
    snap_annotation_to_pose, train_struct_svm, CategoryConfig, ModelLayout, ModelSkeleton,
    TrainRound, TrainerConfig,
};
use crate::treelearn::{
    cl_grouping, chow_liu_tree, locations_to_samples, part_distance_matrix, SampleScheme,
};

/// Dataset manifest: where the annotations, images, negatives, and part
/// roster live. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub annotations: PathBuf,
    pub format: String,
    pub images_root: PathBuf,
    pub negatives_dir: PathBuf,
    pub parts: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &PathBuf| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.clone()
            }
        };
        m.annotations = resolve(&m.annotations);
        m.images_root = resolve(&m.images_root);
        m.negatives_dir = resolve(&m.negatives_dir);
        m.parts = resolve(&m.parts);
        Ok(m)
    }
}

/// How structure learning went: hidden nodes found by grouping and whether
/// the pipeline fell back to the plain spanning tree (deployed models need
/// every node observable).
#[derive(Debug, Clone, Serialize)]
pub struct TreeReport {
    pub hidden_count: usize,
    pub used_fallback: bool,
    pub edges: Vec<(usize, usize)>,
}

/// Learn the part tree from annotated locations. If grouping introduces
/// hidden nodes (or fails outright), fall back to the Chow-Liu tree so the
/// deployed model stays fully observable; the report records what happened.
pub fn learn_part_tree(
    annotations: &AnnotationSet,
    parts: &[PartSpec],
    config: &PipelineConfig,
) -> Result<(TreeStructure, TreeReport)> {
    let scheme: SampleScheme = config.sample_scheme.parse()?;
    let (samples, _report) = locations_to_samples(annotations, parts, scheme)?;
    let d = part_distance_matrix(&samples, parts.len(), scheme, config.d_max)?;
    let (tree, hidden_count, used_fallback) =
        match cl_grouping(&d, config.grouping_tolerance) {
            Ok(lt) if lt.hidden_count == 0 => (lt.tree, 0, false),
            Ok(lt) => (chow_liu_tree(&d), lt.hidden_count, true),
            Err(Error::NotTreeRealizable { .. }) => (chow_liu_tree(&d), 0, true),
            Err(e) => return Err(e),
        };
    let edges = tree.edges().to_vec();
    Ok((tree, TreeReport { hidden_count, used_fallback, edges }))
}

/// A trained model with its roster, tree, and training telemetry.
pub struct TrainedBundle {
    pub model: ModelParameters,
    pub parts: Vec<PartSpec>,
    pub tree: TreeStructure,
    pub tree_report: TreeReport,
    pub rounds: Vec<TrainRound>,
    pub converged: bool,
    pub category_rounds: Vec<(String, usize)>,
}

/// Mirror an annotated instance: flip the image horizontally and both flip
/// and left/right-swap the keypoints.
fn mirror_instance(
    img: &ImageGray,
    ann: &Annotation,
    pairs: &[(usize, usize)],
) -> (ImageGray, Annotation) {
    let w = img.width() as f64;
    let mut keypoints: Vec<Option<(f64, f64)>> = ann
        .keypoints
        .iter()
        .map(|k| k.map(|(x, y)| (w - 1.0 - x, y)))
        .collect();
    for &(l, r) in pairs {
        keypoints.swap(l, r);
    }
    (
        img.mirrored(),
        Annotation {
            image: format!("{}#mirror", ann.image),
            height: ann.height,
            keypoints,
        },
    )
}

/// Combined-part reference point: centroid of constituent keypoints.
fn combined_reference(ann: &Annotation, part: &PartSpec) -> Option<(f64, f64)> {
    let mut acc = (0.0, 0.0);
    for &c in &part.constituent_ids {
        let k = ann.keypoints.get(c).copied().flatten()?;
        acc.0 += k.0;
        acc.1 += k.1;
    }
    let n = part.constituent_ids.len() as f64;
    Some((acc.0 / n, acc.1 / n))
}

/// Pick combined-part filter sizes from constituent bounding boxes (scaled
/// to the canonical person height, padded, clustered, modal cluster wins).
fn combined_filter_size(
    annotations: &AnnotationSet,
    part: &PartSpec,
    config: &PipelineConfig,
) -> Result<(usize, usize)> {
    const PAD_PX: f64 = 16.0;
    const MIN_CELLS: usize = 3;
    const MAX_CELLS: usize = 13;
    let boxes: Vec<(f64, f64)> = annotations
        .images
        .iter()
        .filter_map(|ann| {
            let scale = config.canonical_height / ann.height;
            let pts: Option<Vec<(f64, f64)>> = part
                .constituent_ids
                .iter()
                .map(|&c| ann.keypoints.get(c).copied().flatten())
                .collect();
            let pts = pts?;
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let w = (xs.iter().cloned().fold(f64::INFINITY, f64::min)
                - xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .abs();
            let h = (ys.iter().cloned().fold(f64::INFINITY, f64::min)
                - ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .abs();
            Some(((w * scale + PAD_PX), (h * scale + PAD_PX)))
        })
        .collect();
    if boxes.is_empty() {
        return Err(Error::Annotation(format!("no boxes for part {}", part.name)));
    }
    let k = config.geometry_clusters.min(boxes.len());
    let sizes = crate::training::kmeans_patch_geometry(&boxes, k, config.seed, config.cell_size)
        .or_else(|_| {
            crate::training::kmeans_patch_geometry(&boxes, 1, config.seed, config.cell_size)
        })?;
    // Modal cluster when k > 1: re-run the assignment to count members.
    let pick = if sizes.len() == 1 {
        sizes[0]
    } else {
        let mut points = ndarray::Array2::<f64>::zeros((boxes.len(), 2));
        for (i, &(w, h)) in boxes.iter().enumerate() {
            points[(i, 0)] = w;
            points[(i, 1)] = h;
        }
        let km = kmeans(&points, sizes.len(), config.seed)?;
        let mut counts = vec![0usize; sizes.len()];
        for &l in &km.labels {
            counts[l] += 1;
        }
        let modal = counts
            .iter()
            .enumerate()
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        sizes[modal]
    };
    Ok((
        pick.1.clamp(MIN_CELLS, MAX_CELLS),
        pick.0.clamp(MIN_CELLS, MAX_CELLS),
    ))
}

/// Patch features for every instance of one combined part, aligned with the
/// inference grid: the patch is cut from the scaled image at the snapped
/// placement so its HOG equals the level map under the filter support.
fn combined_patches(
    part: &PartSpec,
    dims: (usize, usize),
    annotations: &AnnotationSet,
    scaled_images: &[(ImageGray, f64)],
    config: &PipelineConfig,
) -> Result<Vec<ndarray::Array3<f64>>> {
    let (fh, fw) = dims;
    let cs = config.cell_size;
    annotations
        .images
        .iter()
        .zip(scaled_images)
        .map(|(ann, (scaled, scale))| {
            let reference = combined_reference(ann, part)
                .ok_or_else(|| Error::Annotation(format!("missing keypoints for {}", part.name)))?;
            let kx = (reference.0 * scale / cs as f64 - 0.5).round() as i64;
            let ky = (reference.1 * scale / cs as f64 - 0.5).round() as i64;
            let tlx = kx - (fw as i64 - 1) / 2;
            let tly = ky - (fh as i64 - 1) / 2;
            let w_px = (fw + 2) * cs;
            let h_px = (fh + 2) * cs;
            let center = (
                (tlx * cs as i64) as f64 + w_px as f64 / 2.0,
                (tly * cs as i64) as f64 + h_px as f64 / 2.0,
            );
            let patch = crop_patch(scaled, center, (w_px, h_px))?;
            Ok(hog_extract(&patch, cs)?.data)
        })
        .collect()
}

/// Standalone category learning for one combined part: loads the images,
/// snaps and crops aligned patches (plus mirrored copies), and runs the
/// category alternation. Used by the `learn-categories` subcommand.
pub fn learn_categories_for_part(
    part: &PartSpec,
    annotations: &AnnotationSet,
    images_root: &Path,
    config: &PipelineConfig,
) -> Result<crate::training::CategoryModel> {
    let pairs = crate::io::left_right_pairs(&annotations.part_names);
    let mut augmented = AnnotationSet {
        part_names: annotations.part_names.clone(),
        convention: annotations.convention,
        images: Vec::new(),
    };
    let mut scaled = Vec::new();
    for ann in &annotations.images {
        let img = load_image(images_root.join(&ann.image))?;
        let (m_img, m_ann) = mirror_instance(&img, ann, &pairs);
        for (image, annotation) in [(img, ann.clone()), (m_img, m_ann)] {
            let level = level_for_height(
                annotation.height,
                config.canonical_height,
                config.interval,
                usize::MAX,
            );
            let scale = 2f64.powf(-(level as f64) / config.interval as f64);
            let w = ((image.width() as f64 * scale).round() as usize).max(1);
            let h = ((image.height() as f64 * scale).round() as usize).max(1);
            let s = if level == 0 {
                image
            } else {
                resize_bilinear(&image, w, h)
            };
            scaled.push((s, scale));
            augmented.images.push(annotation);
        }
    }
    let dims = combined_filter_size(&augmented, part, config)?;
    let patches = combined_patches(part, dims, &augmented, &scaled, config)?;
    let cat_cfg = CategoryConfig {
        c: 1.0,
        max_passes: 10,
        seed: config.seed ^ ((part.id as u64) << 32),
        solver_tol: 1e-6,
        solver_max_epochs: 5000,
    };
    learn_visual_categories(&patches, part.num_types, &cat_cfg)
}

fn list_pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |e| e == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Full training recipe over a dataset manifest.
pub fn run_training(
    manifest: &Manifest,
    config: &PipelineConfig,
    mut progress: impl FnMut(&str),
) -> Result<TrainedBundle> {
    config.validate()?;
    let parts_doc = PartsDoc::load(&manifest.parts)?;
    let parts = parts_doc.to_parts(config.single_types, config.combined_types)?;
    let format: AnnotationFormat = manifest.format.parse()?;
    let (base_annotations, load_report) = load_annotations(&manifest.annotations, format)?;
    progress(&format!(
        "loaded {} annotations ({} dropped)",
        load_report.loaded, load_report.dropped_incomplete
    ));

    // Load images and mirror-augment.
    let pairs = crate::io::left_right_pairs(&base_annotations.part_names);
    let mut images = Vec::new();
    let mut annotations = AnnotationSet {
        part_names: base_annotations.part_names.clone(),
        convention: base_annotations.convention,
        images: Vec::new(),
    };
    for ann in &base_annotations.images {
        let img = load_image(manifest.images_root.join(&ann.image))?;
        let (m_img, m_ann) = mirror_instance(&img, ann, &pairs);
        images.push(img);
        annotations.images.push(ann.clone());
        images.push(m_img);
        annotations.images.push(m_ann);
    }
    progress(&format!("{} instances after mirroring", images.len()));

    train_from_memory(parts, annotations, images, &manifest.negatives_dir, config, progress)
}

/// Training core over in-memory data (shared by the CLI path and tests).
pub fn train_from_memory(
    parts: Vec<PartSpec>,
    annotations: AnnotationSet,
    images: Vec<ImageGray>,
    negatives_dir: &Path,
    config: &PipelineConfig,
    mut progress: impl FnMut(&str),
) -> Result<TrainedBundle> {
    let n = annotations.images.len();
    assert_eq!(n, images.len());

    // Structure.
    let (tree, tree_report) = learn_part_tree(&annotations, &parts, config)?;
    progress(&format!(
        "part tree learned: hidden={} fallback={}",
        tree_report.hidden_count, tree_report.used_fallback
    ));

    // Per-instance scaled HOG maps.
    let scaled: Vec<(ImageGray, f64)> = annotations
        .images
        .par_iter()
        .zip(&images)
        .map(|(ann, img)| {
            let level =
                level_for_height(ann.height, config.canonical_height, config.interval, usize::MAX);
            let scale = 2f64.powf(-(level as f64) / config.interval as f64);
            let w = ((img.width() as f64 * scale).round() as usize).max(1);
            let h = ((img.height() as f64 * scale).round() as usize).max(1);
            let s = if level == 0 {
                img.clone()
            } else {
                resize_bilinear(img, w, h)
            };
            (s, scale)
        })
        .collect();
    let hogs: Vec<(HogMap, usize)> = annotations
        .images
        .par_iter()
        .zip(&scaled)
        .map(|(ann, (img, _))| {
            let level =
                level_for_height(ann.height, config.canonical_height, config.interval, usize::MAX);
            Ok((hog_extract(img, config.cell_size)?, level))
        })
        .collect::<Result<_>>()?;

    // Filter dimensions.
    let single_dim = (config.single_filter_cells, config.single_filter_cells);
    let mut filter_dims: Vec<Vec<(usize, usize)>> = Vec::with_capacity(parts.len());
    for p in &parts {
        match p.kind {
            PartKind::Single => filter_dims.push(vec![single_dim; p.num_types]),
            PartKind::Combined => {
                let dims = combined_filter_size(&annotations, p, config)?;
                filter_dims.push(vec![dims; p.num_types]);
            }
        }
    }

    // Visual categories for combined parts.
    let mut type_labels = ndarray::Array2::<usize>::zeros((n, parts.len()));
    let mut category_filters: Vec<Option<Vec<ndarray::Array3<f64>>>> = vec![None; parts.len()];
    let mut category_rounds = Vec::new();
    for p in &parts {
        if p.kind != PartKind::Combined {
            continue;
        }
        let patches = combined_patches(p, filter_dims[p.id][0], &annotations, &scaled, config)?;
        let cat_cfg = CategoryConfig {
            c: 1.0,
            max_passes: 10,
            seed: config.seed ^ (p.id as u64) << 32,
            solver_tol: 1e-6,
            solver_max_epochs: 5000,
        };
        let model = learn_visual_categories(&patches, p.num_types, &cat_cfg)?;
        progress(&format!(
            "categories for {}: {} rounds, converged={}",
            p.name, model.rounds, model.converged
        ));
        category_rounds.push((p.name.clone(), model.rounds));
        for (i, &l) in model.labels.iter().enumerate() {
            type_labels[(i, p.id)] = l;
        }
        category_filters[p.id] = Some(model.filters);
    }

    // Morphology types for single parts.
    for p in &parts {
        if p.kind != PartKind::Single {
            continue;
        }
        let feats = single_part_displacement_features(&annotations, &parts, &tree, p.id)?;
        let labels = derive_single_part_types(&feats, p.num_types, config.seed ^ ((p.id as u64) << 16))?;
        for (i, &l) in labels.iter().enumerate() {
            type_labels[(i, p.id)] = l;
        }
    }

    // Snap poses, estimate anchors, build the skeleton.
    let mut skeleton = ModelSkeleton {
        parts: parts.clone(),
        tree: tree.clone(),
        cell_size: config.cell_size,
        canonical_height: config.canonical_height,
        filter_dims,
        anchors: tree
            .edges()
            .iter()
            .map(|&(p, c)| vec![vec![(0, 0); parts[c].num_types]; parts[p].num_types])
            .collect(),
    };
    let poses: Vec<PoseHypothesis> = (0..n)
        .map(|i| {
            let labels: Vec<usize> = (0..parts.len()).map(|p| type_labels[(i, p)]).collect();
            let (hog, level) = &hogs[i];
            snap_annotation_to_pose(
                &skeleton,
                &annotations.images[i],
                &labels,
                hog,
                *level,
                scaled[i].1,
            )
        })
        .collect::<Result<_>>()?;
    skeleton.anchors = estimate_anchors(&poses, &parts, &tree);

    // Bias initializers and the round-zero mining model.
    let (unary_bias, pairwise_bias) = estimate_compatibility(&type_labels, &parts, &tree, config.b_large);
    let mut init_model = ModelParameters::zeroed(
        &parts,
        &tree,
        &skeleton.filter_dims,
        config.cell_size,
        config.canonical_height,
    );
    init_model.unary_bias = unary_bias;
    init_model.pairwise_bias = pairwise_bias;
    for (e, &(pp, cc)) in tree.edges().iter().enumerate() {
        for tp in 0..parts[pp].num_types {
            for tc in 0..parts[cc].num_types {
                init_model.deformation[e][tp][tc] = crate::scoring::DeformationParams {
                    w: [0.0, 0.0, -0.1, -0.1],
                    anchor: skeleton.anchors[e][tp][tc],
                };
            }
        }
    }
    for p in &parts {
        if let Some(filters) = category_filters[p.id].take() {
            init_model.appearance[p.id] = filters;
        }
    }

    // Positive feature vectors.
    let layout = ModelLayout::new(&skeleton);
    progress(&format!("parameter vector dimension: {}", layout.dim));
    let positives: Vec<crate::training::SparseVec> = (0..n)
        .into_par_iter()
        .map(|i| layout.pose_features(&skeleton, &hogs[i].0, &poses[i]))
        .collect();
    drop(hogs);
    drop(scaled);

    // Negatives.
    let negative_images: Vec<ImageGray> = list_pgm_files(negatives_dir)?
        .iter()
        .map(load_image)
        .collect::<Result<_>>()?;
    progress(&format!("{} negative images", negative_images.len()));

    let trainer_cfg = TrainerConfig {
        c: config.c,
        max_passes: config.max_passes,
        negative_cache_cap: config.negative_cache_cap,
        convergence_tol: config.convergence_tol,
        seed: config.seed,
        interval: config.interval,
        solver_tol: 1e-7,
        solver_max_epochs: 20_000,
        per_image_cap: 8,
    };
    let outcome = train_struct_svm(&skeleton, &init_model, &positives, &negative_images, &trainer_cfg)?;
    for r in &outcome.rounds {
        progress(&format!(
            "round {}: cache={} new={} objective={:.6} kkt={:.2e}",
            r.round, r.cache_size, r.new_violations, r.objective, r.kkt_violation
        ));
    }

    Ok(TrainedBundle {
        model: outcome.model,
        parts,
        tree,
        tree_report,
        rounds: outcome.rounds,
        converged: outcome.converged,
        category_rounds,
    })
}

/// Build the pyramid for inference, honoring the model's largest filter.
pub fn inference_pyramid(
    img: &ImageGray,
    model: &ModelParameters,
    interval: usize,
    max_levels: usize,
) -> Result<FeaturePyramid> {
    let min_cells = model
        .appearance
        .iter()
        .flat_map(|per_type| per_type.iter().map(|f| f.shape()[0].max(f.shape()[1])))
        .max()
        .unwrap_or(1);
    let mut pyr = crate::features::build_pyramid(img, model.cell_size, interval, min_cells)?;
    if max_levels > 0 && pyr.levels.len() > max_levels {
        pyr.levels.truncate(max_levels);
        pyr.level_scales.truncate(max_levels);
    }
    Ok(pyr)
}

/// Inference over a list of images, producing one record per detection with
/// fitted limb segments attached.
pub fn run_inference(
    model: &ModelParameters,
    parts: &[PartSpec],
    tree: &TreeStructure,
    images: &[(String, ImageGray)],
    config: &PipelineConfig,
    max_levels: usize,
) -> Result<Vec<Vec<DetectionRecord>>> {
    images
        .par_iter()
        .map(|(name, img)| {
            let pyramid = inference_pyramid(img, model, config.interval, max_levels)?;
            let detections = infer_map(
                model,
                parts,
                tree,
                &pyramid,
                config.threshold,
                config.max_detections,
            )?;
            Ok(detections
                .into_iter()
                .map(|d| {
                    let limbs = fit_skeleton(&d.pose, parts, model, &pyramid.level_scales);
                    DetectionRecord {
                        image: name.clone(),
                        score: d.score,
                        parts: d
                            .pose
                            .parts
                            .iter()
                            .map(|h| PartRecord {
                                part: parts[h.part_id].name.clone(),
                                x: h.loc.x,
                                y: h.loc.y,
                                level: h.loc.level,
                                type_id: h.type_id,
                            })
                            .collect(),
                        limbs,
                    }
                })
                .collect())
        })
        .collect()
}

/// Ground-truth limb segments for an annotation: for every combined part,
/// first constituent keypoint to the centroid of the rest.
pub fn ground_truth_limbs(ann: &Annotation, parts: &[PartSpec]) -> Vec<LimbSegment> {
    let mut out = Vec::new();
    for p in parts {
        if p.constituent_ids.len() < 2 {
            continue;
        }
        let Some(a) = ann.keypoints.get(p.constituent_ids[0]).copied().flatten() else {
            continue;
        };
        let rest = &p.constituent_ids[1..];
        let mut b = (0.0, 0.0);
        let mut ok = true;
        for &c in rest {
            match ann.keypoints.get(c).copied().flatten() {
                Some(k) => {
                    b.0 += k.0;
                    b.1 += k.1;
                }
                None => ok = false,
            }
        }
        if !ok {
            continue;
        }
        b.0 /= rest.len() as f64;
        b.1 /= rest.len() as f64;
        out.push(LimbSegment {
            name: p.name.clone(),
            endpoints: [a, b],
        });
    }
    out
}

/// PCP evaluation of detection records against ground-truth annotations.
/// Records are grouped by image name; annotated images with no record count
/// every limb as missed.
pub fn evaluate_detections(
    records: &[DetectionRecord],
    annotations: &AnnotationSet,
    parts: &[PartSpec],
    matching: MatchingPolicy,
) -> Result<PcpReport> {
    let mut by_image: std::collections::BTreeMap<&str, Vec<ScoredSkeleton>> =
        std::collections::BTreeMap::new();
    for r in records {
        by_image.entry(&r.image).or_default().push(ScoredSkeleton {
            score: r.score,
            limbs: r.limbs.clone(),
        });
    }
    let mut predictions = Vec::with_capacity(annotations.images.len());
    let mut ground_truth = Vec::with_capacity(annotations.images.len());
    for ann in &annotations.images {
        predictions.push(by_image.get(ann.image.as_str()).cloned().unwrap_or_default());
        ground_truth.push(ground_truth_limbs(ann, parts));
    }
    evaluate(&predictions, &ground_truth, matching)
}
