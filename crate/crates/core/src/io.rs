//! Dataset ingestion, image decoding, and pipeline configuration.
//!
//! The canonical annotation format is a JSON document (see
//! docs/file-formats.md); LSP- and PARSE-style loaders are thin text
//! adapters over the same normalized representation. Images are 8-bit
//! binary PGM (P5); other raster formats enter through the
//! [`ImageDecoder`] seam.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::ImageGray;
use crate::model::PartSpec;

/// Whether left/right part labels follow the person's anatomy or the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    PersonCentric,
    ImageCentric,
}

/// One annotated figure: image path, person height in pixels, and one
/// optional keypoint per single part (None = missing or invisible).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub height: f64,
    pub keypoints: Vec<Option<(f64, f64)>>,
}

/// A normalized annotation collection. After loading, the convention is
/// always image-centric: person-centric input has its left_*/right_* keypoint
/// columns swapped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub part_names: Vec<String>,
    pub convention: Convention,
    pub images: Vec<Annotation>,
}

/// Counts reported by the loaders.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadReport {
    pub loaded: usize,
    pub dropped_incomplete: usize,
}

/// Supported annotation file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFormat {
    /// Canonical JSON document.
    GenericJson,
    /// Text export of LSP-style joint tables: one figure per line,
    /// `image height x1 y1 v1 ... x14 y14 v14`, person-centric left/right.
    LspMatExport,
    /// Same line layout, image-centric left/right (PARSE convention).
    ParseStyle,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic-json" => Ok(Self::GenericJson),
            "lsp-mat-export" => Ok(Self::LspMatExport),
            "parse-style" => Ok(Self::ParseStyle),
            other => Err(Error::Config(format!("unknown annotation format {other:?}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GenericJsonDoc {
    convention: Convention,
    parts: Vec<String>,
    images: Vec<GenericJsonImage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenericJsonImage {
    path: String,
    height: f64,
    /// Per part: [x, y, visible] with visible in {0, 1}.
    keypoints: Vec<(f64, f64, u8)>,
}

/// Pair up `left_foo`/`right_foo` (or `l_foo`/`r_foo`) column indices.
pub fn left_right_pairs(names: &[String]) -> Vec<(usize, usize)> {
    let sides = |n: &str| -> Option<(String, bool)> {
        for (prefix, is_left) in [("left_", true), ("right_", false), ("l_", true), ("r_", false)]
        {
            if let Some(rest) = n.strip_prefix(prefix) {
                return Some((rest.to_string(), is_left));
            }
        }
        None
    };
    let mut lefts: BTreeMap<String, usize> = BTreeMap::new();
    let mut rights: BTreeMap<String, usize> = BTreeMap::new();
    for (i, n) in names.iter().enumerate() {
        if let Some((stem, is_left)) = sides(n) {
            if is_left {
                lefts.insert(stem, i);
            } else {
                rights.insert(stem, i);
            }
        }
    }
    lefts
        .into_iter()
        .filter_map(|(stem, li)| rights.get(&stem).map(|&ri| (li, ri)))
        .collect()
}

fn normalize(mut set: AnnotationSet) -> AnnotationSet {
    if set.convention == Convention::PersonCentric {
        let pairs = left_right_pairs(&set.part_names);
        for ann in &mut set.images {
            for &(l, r) in &pairs {
                ann.keypoints.swap(l, r);
            }
        }
        set.convention = Convention::ImageCentric;
    }
    set
}

fn drop_incomplete(set: &mut AnnotationSet, report: &mut LoadReport) {
    let expected = set.part_names.len();
    set.images.retain(|ann| {
        let complete =
            ann.keypoints.len() == expected && ann.keypoints.iter().all(|k| k.is_some());
        if complete {
            report.loaded += 1;
        } else {
            report.dropped_incomplete += 1;
        }
        complete
    });
}

fn parse_line_format(
    text: &str,
    convention: Convention,
    part_names: Vec<String>,
) -> Result<AnnotationSet> {
    let mut images = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let image = tok
            .next()
            .ok_or_else(|| Error::Annotation(format!("line {}: missing image", lineno + 1)))?
            .to_string();
        let height: f64 = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Annotation(format!("line {}: bad height", lineno + 1)))?;
        let rest: Vec<f64> = tok
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Annotation(format!("line {}: bad number", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if rest.len() != part_names.len() * 3 {
            return Err(Error::Annotation(format!(
                "line {}: expected {} keypoint triples, got {} values",
                lineno + 1,
                part_names.len(),
                rest.len()
            )));
        }
        let keypoints = rest
            .chunks(3)
            .map(|c| if c[2] != 0.0 { Some((c[0], c[1])) } else { None })
            .collect();
        images.push(Annotation {
            image,
            height,
            keypoints,
        });
    }
    Ok(AnnotationSet {
        part_names,
        convention,
        images,
    })
}

/// The 14 joints of the standard human annotation order used by the line
/// formats.
pub fn lsp_joint_names() -> Vec<String> {
    [
        "right_ankle",
        "right_knee",
        "right_hip",
        "left_hip",
        "left_knee",
        "left_ankle",
        "right_wrist",
        "right_elbow",
        "right_shoulder",
        "left_shoulder",
        "left_elbow",
        "left_wrist",
        "neck",
        "head_top",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Load and normalize annotations: person-centric input gets its left/right
/// columns swapped; incomplete instances are dropped and counted.
pub fn load_annotations(
    path: impl AsRef<Path>,
    format: AnnotationFormat,
) -> Result<(AnnotationSet, LoadReport)> {
    let text = std::fs::read_to_string(path)?;
    load_annotations_str(&text, format)
}

pub fn load_annotations_str(
    text: &str,
    format: AnnotationFormat,
) -> Result<(AnnotationSet, LoadReport)> {
    let set = match format {
        AnnotationFormat::GenericJson => {
            let doc: GenericJsonDoc = serde_json::from_str(text)?;
            let expected = doc.parts.len();
            let images = doc
                .images
                .into_iter()
                .map(|img| {
                    if img.keypoints.len() != expected {
                        return Err(Error::Annotation(format!(
                            "{}: {} keypoints for {} parts",
                            img.path,
                            img.keypoints.len(),
                            expected
                        )));
                    }
                    Ok(Annotation {
                        image: img.path,
                        height: img.height,
                        keypoints: img
                            .keypoints
                            .into_iter()
                            .map(|(x, y, v)| if v != 0 { Some((x, y)) } else { None })
                            .collect(),
                    })
                })
                .collect::<Result<_>>()?;
            AnnotationSet {
                part_names: doc.parts,
                convention: doc.convention,
                images,
            }
        }
        AnnotationFormat::LspMatExport => {
            parse_line_format(text, Convention::PersonCentric, lsp_joint_names())?
        }
        AnnotationFormat::ParseStyle => {
            parse_line_format(text, Convention::ImageCentric, lsp_joint_names())?
        }
    };
    let mut set = normalize(set);
    let mut report = LoadReport::default();
    drop_incomplete(&mut set, &mut report);
    Ok((set, report))
}

/// Write annotations in the canonical JSON format.
pub fn save_annotations(path: impl AsRef<Path>, set: &AnnotationSet) -> Result<()> {
    let doc = GenericJsonDoc {
        convention: set.convention,
        parts: set.part_names.clone(),
        images: set
            .images
            .iter()
            .map(|a| GenericJsonImage {
                path: a.image.clone(),
                height: a.height,
                keypoints: a
                    .keypoints
                    .iter()
                    .map(|k| match k {
                        Some((x, y)) => (*x, *y, 1),
                        None => (0.0, 0.0, 0),
                    })
                    .collect(),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Adapter contract for raster formats beyond PGM: given the full file
/// bytes, either decode to a grayscale image or pass (return None) so the
/// next decoder can try.
pub trait ImageDecoder {
    fn name(&self) -> &str;
    fn decode(&self, bytes: &[u8]) -> Option<Result<ImageGray>>;
}

/// Decode an 8-bit binary PGM (P5) buffer.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGray> {
    let mut pos = 0usize;
    let mut fields = Vec::new();
    // Header: magic, width, height, maxval, with '#' comments allowed.
    while fields.len() < 4 {
        if pos >= bytes.len() {
            return Err(Error::CorruptFile("pgm: header ended early".into()));
        }
        let b = bytes[pos];
        if b == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            pos += 1;
        } else {
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| Error::CorruptFile("pgm: bad header".into()))?
                    .to_string(),
            );
        }
    }
    if fields[0] != "P5" {
        return Err(Error::UnsupportedFormat(format!(
            "{} (only P5 grayscale is built in)",
            fields[0]
        )));
    }
    let width: usize = fields[1]
        .parse()
        .map_err(|_| Error::CorruptFile("pgm: bad width".into()))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| Error::CorruptFile("pgm: bad height".into()))?;
    let maxval: u32 = fields[3]
        .parse()
        .map_err(|_| Error::CorruptFile("pgm: bad maxval".into()))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "pgm maxval {maxval} (only 8-bit supported)"
        )));
    }
    pos += 1; // single whitespace after maxval
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::CorruptFile("pgm: dimensions overflow".into()))?;
    if bytes.len().saturating_sub(pos) < need {
        return Err(Error::CorruptFile(format!(
            "pgm: payload has {} of {} bytes",
            bytes.len().saturating_sub(pos),
            need
        )));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    ImageGray::new(width, height, data)
}

/// Encode a grayscale image as 8-bit binary PGM.
pub fn encode_pgm(img: &ImageGray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Load an image: PGM natively, anything else through the decoder seam.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGray> {
    load_image_with(path, &[])
}

pub fn load_image_with(path: impl AsRef<Path>, decoders: &[&dyn ImageDecoder]) -> Result<ImageGray> {
    let bytes = std::fs::read(&path)?;
    if bytes.starts_with(b"P5") {
        return decode_pgm(&bytes);
    }
    for d in decoders {
        if let Some(result) = d.decode(&bytes) {
            return result;
        }
    }
    let tag = if bytes.starts_with(b"P6") {
        "P6 color PGM".to_string()
    } else {
        format!("{}", path.as_ref().display())
    };
    Err(Error::UnsupportedFormat(tag))
}

/// All tunable pipeline defaults in one bounds-checked document. Unknown
/// keys are rejected at load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// HOG cell size in pixels.
    pub cell_size: usize,
    /// Pyramid levels per octave.
    pub interval: usize,
    /// Visual categories per combined part.
    pub combined_types: usize,
    /// Morphology types per single part.
    pub single_types: usize,
    /// Single-part filter side length, in cells (odd).
    pub single_filter_cells: usize,
    /// Geometry clusters used to pick combined-part patch sizes.
    pub geometry_clusters: usize,
    /// Margin penalty for both category learning and joint training.
    pub c: f64,
    /// Hard-negative mining rounds.
    pub max_passes: usize,
    /// Constraint cache cap during training.
    pub negative_cache_cap: usize,
    /// Relative objective change treated as converged.
    pub convergence_tol: f64,
    /// Grouping tolerance in nats.
    pub grouping_tolerance: f64,
    /// Information-distance clamp in nats.
    pub d_max: f64,
    /// Magnitude of the bias assigned to type pairs never observed.
    pub b_large: f64,
    /// IoU threshold for non-maximum suppression.
    pub nms_iou: f64,
    /// Person height, in pixels, that training normalizes to.
    pub canonical_height: f64,
    /// Base RNG seed.
    pub seed: u64,
    /// Detection threshold used by `infer`.
    pub threshold: f64,
    /// Maximum detections returned per image.
    pub max_detections: usize,
    /// Location scalarization for structure learning.
    pub sample_scheme: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cell_size: 4,
            interval: 8,
            combined_types: 10,
            single_types: 6,
            single_filter_cells: 5,
            geometry_clusters: 1,
            c: 0.02,
            max_passes: 6,
            negative_cache_cap: 20_000,
            convergence_tol: 1e-3,
            grouping_tolerance: crate::treelearn::DEFAULT_GROUPING_TOLERANCE,
            d_max: crate::treelearn::D_MAX_DEFAULT,
            b_large: 100.0,
            nms_iou: 0.5,
            canonical_height: 96.0,
            seed: 1,
            threshold: -1.0,
            max_detections: 16,
            sample_scheme: "xy-stacked".into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(self.cell_size >= 2 && self.cell_size <= 32, "cell_size out of [2,32]")?;
        check(self.interval >= 1 && self.interval <= 32, "interval out of [1,32]")?;
        check(self.combined_types >= 1, "combined_types must be >= 1")?;
        check(self.single_types >= 1, "single_types must be >= 1")?;
        check(
            self.single_filter_cells >= 1 && self.single_filter_cells % 2 == 1,
            "single_filter_cells must be odd and >= 1",
        )?;
        check(self.geometry_clusters >= 1, "geometry_clusters must be >= 1")?;
        check(self.c > 0.0, "c must be positive")?;
        check(self.max_passes >= 1, "max_passes must be >= 1")?;
        check(self.negative_cache_cap >= 10, "negative_cache_cap too small")?;
        check(self.convergence_tol > 0.0, "convergence_tol must be positive")?;
        check(self.grouping_tolerance >= 0.0, "grouping_tolerance must be >= 0")?;
        check(self.d_max > 0.0, "d_max must be positive")?;
        check(self.b_large > 0.0, "b_large must be positive")?;
        check((0.0..=1.0).contains(&self.nms_iou), "nms_iou out of [0,1]")?;
        check(self.canonical_height >= 16.0, "canonical_height too small")?;
        check(self.max_detections >= 1, "max_detections must be >= 1")?;
        self.sample_scheme.parse::<crate::treelearn::SampleScheme>()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Part roster document: single parts by name, combined parts by constituent
/// names. Type counts default from the config when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartsDoc {
    pub singles: Vec<String>,
    pub combined: Vec<CombinedDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombinedDoc {
    pub name: String,
    pub constituents: Vec<String>,
    #[serde(default)]
    pub num_types: Option<usize>,
}

impl PartsDoc {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Materialize `PartSpec`s: singles first (in order), then combined.
    pub fn to_parts(&self, single_types: usize, combined_types: usize) -> Result<Vec<PartSpec>> {
        let mut parts: Vec<PartSpec> = self
            .singles
            .iter()
            .enumerate()
            .map(|(i, n)| PartSpec::single(i, n.clone(), single_types))
            .collect();
        let index: BTreeMap<&str, usize> = self
            .singles
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        for c in &self.combined {
            let ids = c
                .constituents
                .iter()
                .map(|n| {
                    index.get(n.as_str()).copied().ok_or_else(|| {
                        Error::Annotation(format!(
                            "combined part {} references unknown single {}",
                            c.name, n
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            parts.push(PartSpec::combined(
                parts.len(),
                c.name.clone(),
                ids,
                c.num_types.unwrap_or(combined_types),
            ));
        }
        let violations = crate::model::validate_parts(&parts);
        if !violations.is_empty() {
            return Err(Error::InvalidModel(violations));
        }
        Ok(parts)
    }
}

/// One detection as written by `infer`: image id, score, per-part placements,
/// and fitted limb segments (JSON lines, one record per detection).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub score: f64,
    pub parts: Vec<PartRecord>,
    pub limbs: Vec<crate::eval::LimbSegment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartRecord {
    pub part: String,
    pub x: usize,
    pub y: usize,
    pub level: usize,
    #[serde(rename = "type")]
    pub type_id: usize,
}

pub fn write_detection_records(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_detection_records(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
