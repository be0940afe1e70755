//! Visual-category learning for combined parts, morphology-type derivation
//! for single parts, and co-occurrence bias estimation.
//!
//! Categories come from a latent-SVM alternation: with labels fixed, train
//! one-vs-rest margin classifiers over the patch features; with classifiers
//! fixed, relabel each patch by argmax response. Both steps are
//! non-increasing in the joint objective, which is asserted per round.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::model::{PartKind, PartSpec, TreeStructure};
use crate::training::kmeans::kmeans;
use crate::training::svm::{DualSvm, SparseVec};

#[derive(Debug, Clone)]
pub struct CategoryConfig {
    /// Margin penalty C in the category objective.
    pub c: f64,
    /// Maximum (train, relabel) rounds.
    pub max_passes: usize,
    pub seed: u64,
    pub solver_tol: f64,
    pub solver_max_epochs: usize,
}

impl Default for CategoryConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_passes: 20,
            seed: 1,
            solver_tol: 1e-8,
            solver_max_epochs: 20_000,
        }
    }
}

/// Learned visual categories for one combined part.
#[derive(Debug, Clone)]
pub struct CategoryModel {
    /// One HOG-space filter per category, shaped like the input patches.
    pub filters: Vec<Array3<f64>>,
    /// Final per-instance category labels.
    pub labels: Vec<usize>,
    /// Joint objective after each full round (non-increasing).
    pub objective_trace: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
}

fn flatten(feat: &Array3<f64>) -> Vec<f64> {
    feat.iter().copied().collect()
}

/// One-vs-rest objective: sum_k [ 1/2 ||w_k||^2 + C sum_i hinge(y_ik w_k.x_i) ]
/// with y_ik = +1 when t_i = k, else -1.
fn joint_objective(ws: &[Vec<f64>], feats: &[Vec<f64>], labels: &[usize], c: f64) -> f64 {
    let mut total = 0.0;
    for (k, w) in ws.iter().enumerate() {
        total += 0.5 * w.iter().map(|x| x * x).sum::<f64>();
        for (i, x) in feats.iter().enumerate() {
            let y = if labels[i] == k { 1.0 } else { -1.0 };
            let score: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            total += c * (1.0 - y * score).max(0.0);
        }
    }
    total
}

fn train_one_vs_rest(
    feats: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    dim: usize,
    cfg: &CategoryConfig,
    round: usize,
    previous: Option<&[Vec<f64>]>,
    c: f64,
) -> Vec<Vec<f64>> {
    (0..k)
        .map(|cat| {
            let mut svm = DualSvm::new(dim, c);
            for (i, x) in feats.iter().enumerate() {
                let y = if labels[i] == cat { 1.0 } else { -1.0 };
                svm.add(SparseVec::from_dense(x), y, false);
            }
            svm.solve(
                cfg.solver_tol,
                cfg.solver_max_epochs,
                cfg.seed ^ ((round as u64) << 8) ^ cat as u64,
            );
            // Monotone safeguard: keep the previous classifier when the
            // fresh solve is numerically worse on this category's slice.
            if let Some(prev) = previous {
                let per_cat = |w: &Vec<f64>| {
                    let mut o = 0.5 * w.iter().map(|x| x * x).sum::<f64>();
                    for (i, x) in feats.iter().enumerate() {
                        let y = if labels[i] == cat { 1.0 } else { -1.0 };
                        let s: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                        o += c * (1.0 - y * s).max(0.0);
                    }
                    o
                };
                if per_cat(&prev[cat]) < per_cat(&svm.w) {
                    return prev[cat].clone();
                }
            }
            svm.w
        })
        .collect()
}

/// Learn K visual categories over HOG patch features (all patches share one
/// shape; callers include mirrored copies). Labels start from k-means over
/// the features; empty categories are re-seeded with the worst-fit instance.
pub fn learn_visual_categories(
    patch_features: &[Array3<f64>],
    k: usize,
    cfg: &CategoryConfig,
) -> Result<CategoryModel> {
    let n = patch_features.len();
    if n < k {
        return Err(Error::TooFewPoints { k, distinct: n });
    }
    assert!(k >= 1);
    let shape = patch_features[0].dim();
    for f in patch_features {
        assert_eq!(f.dim(), shape, "patches must share one feature shape");
    }
    let feats: Vec<Vec<f64>> = patch_features.iter().map(flatten).collect();
    let dim = feats[0].len();

    let mut labels = if k == 1 {
        vec![0usize; n]
    } else {
        let mut points = Array2::<f64>::zeros((n, dim));
        for (i, f) in feats.iter().enumerate() {
            for (j, &v) in f.iter().enumerate() {
                points[(i, j)] = v;
            }
        }
        kmeans(&points, k, cfg.seed)?.labels
    };

    let mut ws: Vec<Vec<f64>> = vec![vec![0.0; dim]; k];
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut rounds = 0;

    for round in 0..cfg.max_passes {
        rounds = round + 1;
        ws = train_one_vs_rest(
            &feats,
            &labels,
            k,
            dim,
            cfg,
            round,
            if round == 0 { None } else { Some(&ws) },
            cfg.c,
        );

        // Relabel by argmax response (lowest k on ties).
        let mut new_labels = Vec::with_capacity(n);
        for x in &feats {
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0;
            for (cat, w) in ws.iter().enumerate() {
                let s: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                if s > best {
                    best = s;
                    best_k = cat;
                }
            }
            new_labels.push(best_k);
        }

        // Re-seed emptied categories with the worst-fit instance. This can
        // bump the objective, so the monotonicity check skips such rounds.
        let mut reseeded = false;
        for cat in 0..k {
            if !new_labels.contains(&cat) {
                let worst = (0..n)
                    .min_by(|&a, &b| {
                        let sa: f64 = ws[new_labels[a]].iter().zip(&feats[a]).map(|(x, y)| x * y).sum();
                        let sb: f64 = ws[new_labels[b]].iter().zip(&feats[b]).map(|(x, y)| x * y).sum();
                        sa.partial_cmp(&sb).unwrap().then(a.cmp(&b))
                    })
                    .unwrap();
                new_labels[worst] = cat;
                reseeded = true;
            }
        }

        let objective = joint_objective(&ws, &feats, &new_labels, cfg.c);
        if let Some(&last) = trace.last() {
            debug_assert!(
                reseeded || objective <= last + 1e-6 * (1.0 + last.abs()),
                "category objective rose: {last} -> {objective}"
            );
        }
        trace.push(objective);

        if new_labels == labels {
            converged = true;
            break;
        }
        labels = new_labels;
    }

    let filters = ws
        .into_iter()
        .map(|w| Array3::from_shape_vec(shape, w).expect("filter shape matches patches"))
        .collect();
    Ok(CategoryModel {
        filters,
        labels,
        objective_trace: trace,
        rounds,
        converged,
    })
}

/// Displacement features for one single part: for every annotation, the
/// vectors from the part to each of its tree neighbors, normalized by the
/// person height. Rows align with `annotations` order.
pub fn single_part_displacement_features(
    annotations: &crate::io::AnnotationSet,
    parts: &[PartSpec],
    tree: &TreeStructure,
    part_id: usize,
) -> Result<Array2<f64>> {
    let neighbors: Vec<usize> = tree
        .edges()
        .iter()
        .filter_map(|&(a, b)| {
            if a == part_id {
                Some(b)
            } else if b == part_id {
                Some(a)
            } else {
                None
            }
        })
        .collect();
    if neighbors.is_empty() {
        return Err(Error::Config(format!("part {part_id} has no tree neighbors")));
    }
    let position = |ann: &crate::io::Annotation, pid: usize| -> Option<(f64, f64)> {
        let p = &parts[pid];
        match p.kind {
            PartKind::Single => ann.keypoints.get(pid).copied().flatten(),
            PartKind::Combined => {
                let mut acc = (0.0, 0.0);
                for &c in &p.constituent_ids {
                    let k = ann.keypoints.get(c).copied().flatten()?;
                    acc.0 += k.0;
                    acc.1 += k.1;
                }
                let n = p.constituent_ids.len() as f64;
                Some((acc.0 / n, acc.1 / n))
            }
        }
    };
    let mut rows = Vec::new();
    for ann in &annotations.images {
        let own = position(ann, part_id)
            .ok_or_else(|| Error::Annotation(format!("missing keypoint for part {part_id}")))?;
        let mut row = Vec::with_capacity(neighbors.len() * 2);
        for &nb in &neighbors {
            let other = position(ann, nb)
                .ok_or_else(|| Error::Annotation(format!("missing keypoint for part {nb}")))?;
            row.push((other.0 - own.0) / ann.height);
            row.push((other.1 - own.1) / ann.height);
        }
        rows.push(row);
    }
    let dim = neighbors.len() * 2;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((annotations.images.len(), dim), flat).expect("rows agree"))
}

/// Morphology types for a single part: k-means over its normalized
/// displacement vectors to tree neighbors. When there are fewer distinct
/// displacement vectors than requested types, the surplus types simply stay
/// unused (a single effective cluster in the degenerate identical case).
pub fn derive_single_part_types(
    displacements: &Array2<f64>,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let distinct = {
        let mut rows: Vec<Vec<u64>> = displacements
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.dedup();
        rows.len()
    };
    let k_eff = k.min(distinct).max(1);
    Ok(kmeans(displacements, k_eff, seed)?.labels)
}

/// Log-frequency bias initializers from per-instance type labels.
///
/// `labels[(instance, part)]` holds each instance's type assignment. Types
/// or type pairs never observed get -b_large, which effectively prunes them
/// in inference. All biases are later refined by the joint trainer.
pub fn estimate_compatibility(
    labels: &Array2<usize>,
    parts: &[PartSpec],
    tree: &TreeStructure,
    b_large: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = labels.nrows();
    let unary = parts
        .iter()
        .map(|p| {
            let mut counts = vec![0usize; p.num_types];
            for i in 0..n {
                counts[labels[(i, p.id)]] += 1;
            }
            counts
                .iter()
                .map(|&c| {
                    if c == 0 {
                        -b_large
                    } else {
                        (c as f64 / n as f64).ln()
                    }
                })
                .collect()
        })
        .collect();
    let pairwise = tree
        .edges()
        .iter()
        .map(|&(p, c)| {
            let (kp, kc) = (parts[p].num_types, parts[c].num_types);
            let mut counts = vec![vec![0usize; kc]; kp];
            for i in 0..n {
                counts[labels[(i, p)]][labels[(i, c)]] += 1;
            }
            counts
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&cnt| {
                            if cnt == 0 {
                                -b_large
                            } else {
                                (cnt as f64 / n as f64).ln()
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    (unary, pairwise)
}
