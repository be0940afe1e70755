//! Exact MAP inference over the part tree: bottom-up message passing with
//! per-type-pair distance transforms, compatibility biases, top-down
//! backtracking, non-maximum suppression, and skeleton fitting.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::LimbSegment;
use crate::features::{FeaturePyramid, HogMap};
use crate::model::{
    ModelParameters, PartHypothesis, PartLocation, PartSpec, PoseHypothesis, TreeStructure,
};
use crate::scoring::{distance_transform, filter_response, DeformationParams, ScoreMap};

/// Backpointer stored per parent cell: the child's type and cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackCell {
    pub type_id: u16,
    pub x: u32,
    pub y: u32,
}

const NO_BACK: BackCell = BackCell {
    type_id: u16::MAX,
    x: u32::MAX,
    y: u32::MAX,
};

/// Message from a child subtree to its parent: per parent type, the best
/// child contribution for every parent placement, plus backpointers.
pub struct Message {
    pub values: Vec<Array2<f64>>,
    pub back: Vec<Array2<BackCell>>,
}

/// Axis-aligned box in original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn union(&self, other: &PixelBox) -> PixelBox {
        PixelBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// A decoded pose with its root placement, total score, and pixel-space
/// bounding box (tight union of all part boxes).
#[derive(Debug, Clone)]
pub struct Detection {
    pub pose: PoseHypothesis,
    pub root_cell: (usize, usize, usize),
    pub score: f64,
    pub bbox: PixelBox,
}

/// Sum of unary and pairwise compatibility biases for a complete type
/// assignment (one type id per part).
pub fn compatibility_score(
    assignment: &[usize],
    model: &ModelParameters,
    tree: &TreeStructure,
) -> Result<f64> {
    if assignment.len() != model.unary_bias.len() {
        return Err(Error::MissingPart(assignment.len()));
    }
    let mut s = 0.0;
    for (i, &t) in assignment.iter().enumerate() {
        s += model.unary_bias[i][t];
    }
    for (e, &(p, c)) in tree.edges().iter().enumerate() {
        s += model.pairwise_bias[e][assignment[p]][assignment[c]];
    }
    Ok(s)
}

/// Filter response at a single placement.
fn response_at(features: &HogMap, filter: &ndarray::Array3<f64>, x: usize, y: usize) -> f64 {
    let (fh, fw, ch) = filter.dim();
    let mut acc = 0.0;
    for dy in 0..fh {
        for dx in 0..fw {
            for c in 0..ch {
                acc += filter[(dy, dx, c)] * features.data[(y + dy, x + dx, c)];
            }
        }
    }
    acc
}

/// Recompute the full objective for a decoded pose directly from its parts:
/// compatibility biases plus appearance responses plus deformation scores.
/// Used for self-consistency checks against the message-passing score.
pub fn score_pose(
    model: &ModelParameters,
    parts: &[PartSpec],
    tree: &TreeStructure,
    features: &HogMap,
    pose: &PoseHypothesis,
) -> Result<f64> {
    if pose.parts.len() != parts.len() {
        return Err(Error::MissingPart(pose.parts.len()));
    }
    let assignment: Vec<usize> = pose.parts.iter().map(|p| p.type_id).collect();
    let mut s = compatibility_score(&assignment, model, tree)?;
    for hyp in &pose.parts {
        let filter = &model.appearance[hyp.part_id][hyp.type_id];
        s += response_at(features, filter, hyp.loc.x, hyp.loc.y);
    }
    for (e, &(p, c)) in tree.edges().iter().enumerate() {
        let (hp, hc) = (&pose.parts[p], &pose.parts[c]);
        let d = &model.deformation[e][hp.type_id][hc.type_id];
        let disp = (
            hc.loc.x as i32 - hp.loc.x as i32,
            hc.loc.y as i32 - hp.loc.y as i32,
        );
        s += crate::scoring::deformation_score(d, disp);
    }
    Ok(s)
}

/// Compute the message from `child` to `parent` given the child's
/// accumulated subtree scores (one map per child type). Exposed for direct
/// testing against brute force.
pub fn edge_message(
    subtree: &[ScoreMap],
    deformation: &[Vec<DeformationParams>],
    pairwise_bias: &[Vec<f64>],
    parent_dims: &[(usize, usize)],
) -> Result<Message> {
    let num_parent_types = deformation.len();
    let mut values = Vec::with_capacity(num_parent_types);
    let mut back = Vec::with_capacity(num_parent_types);
    for tp in 0..num_parent_types {
        let (ph, pw) = parent_dims[tp];
        let mut best = Array2::from_elem((ph, pw), f64::NEG_INFINITY);
        let mut bp = Array2::from_elem((ph, pw), NO_BACK);
        for (tc, child_map) in subtree.iter().enumerate() {
            let dt = distance_transform(child_map, &deformation[tp][tc], pw, ph)?;
            let bias = pairwise_bias[tp][tc];
            for cy in 0..ph {
                for cx in 0..pw {
                    let v = dt.values.data[(cy, cx)] + bias;
                    if v > best[(cy, cx)] {
                        best[(cy, cx)] = v;
                        let (qx, qy) = dt.argmax[(cy, cx)];
                        bp[(cy, cx)] = BackCell {
                            type_id: tc as u16,
                            x: qx,
                            y: qy,
                        };
                    }
                }
            }
        }
        values.push(best);
        back.push(bp);
    }
    Ok(Message { values, back })
}

struct LevelTables {
    /// Accumulated subtree score maps, `[part][type]`.
    subtree: Vec<Vec<ScoreMap>>,
    /// Backpointers per edge (tree edge order), per parent type.
    back: Vec<Vec<Array2<BackCell>>>,
}

fn pass_level(
    model: &ModelParameters,
    parts: &[PartSpec],
    tree: &TreeStructure,
    features: &HogMap,
    level: usize,
) -> Result<Option<LevelTables>> {
    // Unary responses plus biases; bail out if any filter does not fit.
    for per_type in &model.appearance {
        for f in per_type {
            if f.shape()[0] > features.cells_y || f.shape()[1] > features.cells_x {
                return Ok(None);
            }
        }
    }
    let jobs: Vec<(usize, usize)> = parts
        .iter()
        .flat_map(|p| (0..p.num_types).map(move |t| (p.id, t)))
        .collect();
    let maps: Vec<ScoreMap> = jobs
        .par_iter()
        .map(|&(i, t)| {
            let mut m = filter_response(features, &model.appearance[i][t])?;
            m.level = level;
            let bias = model.unary_bias[i][t];
            m.data.mapv_inplace(|v| v + bias);
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mut subtree: Vec<Vec<ScoreMap>> = Vec::with_capacity(parts.len());
    let mut it = maps.into_iter();
    for p in parts {
        subtree.push((0..p.num_types).map(|_| it.next().unwrap()).collect());
    }

    // Leaf-to-root accumulation.
    let edges = tree.edges();
    let mut back: Vec<Vec<Array2<BackCell>>> = vec![Vec::new(); edges.len()];
    let order = tree.topological_order();
    for &node in order.iter().rev() {
        for (e, &(p, c)) in edges.iter().enumerate() {
            if p != node {
                continue;
            }
            let parent_dims: Vec<(usize, usize)> = subtree[p]
                .iter()
                .map(|m| (m.height, m.width))
                .collect();
            let msg = edge_message(
                &subtree[c],
                &model.deformation[e],
                &model.pairwise_bias[e],
                &parent_dims,
            )?;
            for (tp, mv) in msg.values.iter().enumerate() {
                subtree[p][tp].data += mv;
            }
            back[e] = msg.back;
        }
    }
    Ok(Some(LevelTables { subtree, back }))
}

fn decode(
    tables: &LevelTables,
    tree: &TreeStructure,
    num_parts: usize,
    root_type: usize,
    root_cell: (usize, usize),
    level: usize,
) -> PoseHypothesis {
    let root = tree.root();
    let mut parts = vec![None; num_parts];
    parts[root] = Some(PartHypothesis {
        part_id: root,
        loc: PartLocation {
            x: root_cell.0,
            y: root_cell.1,
            level,
        },
        type_id: root_type,
    });
    for (e, &(p, c)) in tree.edges().iter().enumerate() {
        let ph = parts[p].expect("edges are in parent-first order");
        let bp = tables.back[e][ph.type_id][(ph.loc.y, ph.loc.x)];
        debug_assert_ne!(bp, NO_BACK);
        parts[c] = Some(PartHypothesis {
            part_id: c,
            loc: PartLocation {
                x: bp.x as usize,
                y: bp.y as usize,
                level,
            },
            type_id: bp.type_id as usize,
        });
    }
    PoseHypothesis {
        parts: parts.into_iter().map(|p| p.unwrap()).collect(),
        score: 0.0,
    }
}

fn pose_bbox(
    pose: &PoseHypothesis,
    model: &ModelParameters,
    scale: f64,
    cell_size: usize,
) -> PixelBox {
    let cs = cell_size as f64;
    let mut bbox: Option<PixelBox> = None;
    for hyp in &pose.parts {
        let f = &model.appearance[hyp.part_id][hyp.type_id];
        let (fh, fw) = (f.shape()[0] as f64, f.shape()[1] as f64);
        let b = PixelBox {
            x0: hyp.loc.x as f64 * cs / scale,
            y0: hyp.loc.y as f64 * cs / scale,
            x1: (hyp.loc.x as f64 + fw) * cs / scale,
            y1: (hyp.loc.y as f64 + fh) * cs / scale,
        };
        bbox = Some(match bbox {
            None => b,
            Some(u) => u.union(&b),
        });
    }
    bbox.expect("pose has at least one part")
}

/// Exact MAP inference over every pyramid level. Root placements scoring at
/// least `threshold` are decoded by backtracking, merged across levels,
/// NMS-filtered in pixel space, sorted by descending score, and truncated to
/// `max_detections`.
pub fn infer_map(
    model: &ModelParameters,
    parts: &[PartSpec],
    tree: &TreeStructure,
    pyramid: &FeaturePyramid,
    threshold: f64,
    max_detections: usize,
) -> Result<Vec<Detection>> {
    if pyramid.levels.is_empty() {
        return Err(Error::EmptyPyramid);
    }
    let mut candidates = Vec::new();
    for (level, features) in pyramid.levels.iter().enumerate() {
        let tables = match pass_level(model, parts, tree, features, level)? {
            Some(t) => t,
            None => continue,
        };
        let root = tree.root();
        let scale = pyramid.level_scales[level];
        for (t, map) in tables.subtree[root].iter().enumerate() {
            for y in 0..map.height {
                for x in 0..map.width {
                    let s = map.data[(y, x)];
                    if s >= threshold && s.is_finite() {
                        let mut pose = decode(&tables, tree, parts.len(), t, (x, y), level);
                        pose.score = s;
                        let bbox = pose_bbox(&pose, model, scale, model.cell_size);
                        candidates.push(Detection {
                            pose,
                            root_cell: (x, y, level),
                            score: s,
                            bbox,
                        });
                    }
                }
            }
        }
    }
    let kept = nms(candidates, 0.5);
    Ok(kept.into_iter().take(max_detections).collect())
}

/// Greedy non-maximum suppression: keep detections in descending score
/// order, dropping any whose box IoU with a kept detection exceeds
/// `overlap_threshold`. Ties break lexicographically on (level, y, x, type)
/// of the root placement for determinism.
pub fn nms(mut detections: Vec<Detection>, overlap_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                let ka = (a.root_cell.2, a.root_cell.1, a.root_cell.0, a.pose.parts[0].type_id);
                let kb = (b.root_cell.2, b.root_cell.1, b.root_cell.0, b.pose.parts[0].type_id);
                ka.cmp(&kb)
            })
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= overlap_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Pixel coordinates of a part's keypoint: the center of its filter box
/// under the mapping pixel = cell * cell_size + cell_size/2, divided by the
/// level scale.
pub fn keypoint_pixel(
    loc: &PartLocation,
    filter_dims: (usize, usize),
    cell_size: usize,
    scale: f64,
) -> (f64, f64) {
    let cs = cell_size as f64;
    let (fh, fw) = filter_dims;
    let kx = loc.x as f64 + (fw as f64 - 1.0) / 2.0;
    let ky = loc.y as f64 + (fh as f64 - 1.0) / 2.0;
    ((kx * cs + cs / 2.0) / scale, (ky * cs + cs / 2.0) / scale)
}

/// Convert a decoded pose into limb segments in original-image pixels.
///
/// Each combined part yields one segment: from the keypoint of its first
/// constituent to the centroid of the remaining constituents' keypoints
/// (for two-joint limbs this is simply joint to joint).
pub fn fit_skeleton(
    pose: &PoseHypothesis,
    parts: &[PartSpec],
    model: &ModelParameters,
    level_scales: &[f64],
) -> Vec<LimbSegment> {
    let joint = |pid: usize| -> (f64, f64) {
        let hyp = &pose.parts[pid];
        let f = &model.appearance[pid][hyp.type_id];
        keypoint_pixel(
            &hyp.loc,
            (f.shape()[0], f.shape()[1]),
            model.cell_size,
            level_scales[hyp.loc.level],
        )
    };
    let mut segments = Vec::new();
    for part in parts {
        if part.constituent_ids.len() < 2 {
            continue;
        }
        let a = joint(part.constituent_ids[0]);
        let rest = &part.constituent_ids[1..];
        let mut b = (0.0, 0.0);
        for &c in rest {
            let p = joint(c);
            b.0 += p.0;
            b.1 += p.1;
        }
        b.0 /= rest.len() as f64;
        b.1 /= rest.len() as f64;
        segments.push(LimbSegment {
            name: part.name.clone(),
            endpoints: [a, b],
        });
    }
    segments
}

/// Re-express the model with the tree rooted at `new_root`. Edges that flip
/// orientation get their deformation mirrored (displacement negates, so the
/// linear weights and anchor negate) and their bias table transposed.
pub fn reroot_model(
    model: &ModelParameters,
    parts: &[PartSpec],
    tree: &TreeStructure,
    new_root: usize,
) -> Result<(ModelParameters, TreeStructure)> {
    let new_tree = tree.rerooted(new_root)?;
    let mut deformation = Vec::new();
    let mut pairwise_bias = Vec::new();
    for &(a, b) in new_tree.edges() {
        let old = tree
            .edges()
            .iter()
            .position(|&(p, c)| (p, c) == (a, b) || (p, c) == (b, a))
            .expect("rerooted tree preserves undirected edges");
        let flipped = tree.edges()[old] != (a, b);
        if !flipped {
            deformation.push(model.deformation[old].clone());
            pairwise_bias.push(model.pairwise_bias[old].clone());
        } else {
            let (kp, kc) = (parts[a].num_types, parts[b].num_types);
            let mut def = vec![vec![DeformationParams::default(); kc]; kp];
            let mut bias = vec![vec![0.0; kc]; kp];
            for tp in 0..kp {
                for tc in 0..kc {
                    let d = &model.deformation[old][tc][tp];
                    def[tp][tc] = DeformationParams {
                        w: [-d.w[0], -d.w[1], d.w[2], d.w[3]],
                        anchor: (-d.anchor.0, -d.anchor.1),
                    };
                    bias[tp][tc] = model.pairwise_bias[old][tc][tp];
                }
            }
            deformation.push(def);
            pairwise_bias.push(bias);
        }
    }
    let new_model = ModelParameters {
        cell_size: model.cell_size,
        canonical_height: model.canonical_height,
        appearance: model.appearance.clone(),
        unary_bias: model.unary_bias.clone(),
        deformation,
        pairwise_bias,
    };
    Ok((new_model, new_tree))
}
