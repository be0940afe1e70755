//! Shared oracles for the integration and acceptance suites. Everything
//! here recomputes results from definitions, independent of the library's
//! fast paths.

// Each test binary uses a different subset of these helpers.
#![allow(dead_code)]

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashSet;

use treepose_core::model::{ModelParameters, PartSpec, TreeStructure};
use treepose_core::scoring::{deformation_score, DeformationParams, ScoreMap};
use treepose_core::treelearn::DistanceMatrix;

/// Brute-force max-plus transform straight from the definition.
pub fn naive_distance_transform(
    child: &ScoreMap,
    params: &DeformationParams,
    out_w: usize,
    out_h: usize,
) -> Array2<f64> {
    let mut out = Array2::from_elem((out_h, out_w), f64::NEG_INFINITY);
    for cy in 0..out_h {
        for cx in 0..out_w {
            for qy in 0..child.height {
                for qx in 0..child.width {
                    let s = child.data[(qy, qx)]
                        + deformation_score(params, (qx as i32 - cx as i32, qy as i32 - cy as i32));
                    if s > out[(cy, cx)] {
                        out[(cy, cx)] = s;
                    }
                }
            }
        }
    }
    out
}

/// Exhaustive best pose score: per-edge enumeration over all child
/// placements and types, recursively from the root, using only
/// `deformation_score` and raw filter responses.
pub fn brute_force_best_score(
    model: &ModelParameters,
    parts: &[PartSpec],
    tree: &TreeStructure,
    features: &treepose_core::features::HogMap,
) -> f64 {
    use treepose_core::scoring::filter_response;
    let unary: Vec<Vec<Array2<f64>>> = parts
        .iter()
        .map(|p| {
            (0..p.num_types)
                .map(|t| {
                    let mut m = filter_response(features, &model.appearance[p.id][t])
                        .expect("filter fits")
                        .data;
                    m.mapv_inplace(|v| v + model.unary_bias[p.id][t]);
                    m
                })
                .collect()
        })
        .collect();

    fn subtree(
        node: usize,
        model: &ModelParameters,
        tree: &TreeStructure,
        unary: &[Vec<Array2<f64>>],
    ) -> Vec<Array2<f64>> {
        let mut acc: Vec<Array2<f64>> = unary[node].clone();
        for (e, &(p, c)) in tree.edges().iter().enumerate() {
            if p != node {
                continue;
            }
            let child_best = subtree(c, model, tree, unary);
            for (tp, acc_map) in acc.iter_mut().enumerate() {
                let (ph, pw) = acc_map.dim();
                for py in 0..ph {
                    for px in 0..pw {
                        let mut best = f64::NEG_INFINITY;
                        for (tc, cmap) in child_best.iter().enumerate() {
                            let (chh, chw) = cmap.dim();
                            for qy in 0..chh {
                                for qx in 0..chw {
                                    let s = cmap[(qy, qx)]
                                        + deformation_score(
                                            &model.deformation[e][tp][tc],
                                            (qx as i32 - px as i32, qy as i32 - py as i32),
                                        )
                                        + model.pairwise_bias[e][tp][tc];
                                    if s > best {
                                        best = s;
                                    }
                                }
                            }
                        }
                        acc_map[(py, px)] += best;
                    }
                }
            }
        }
        acc
    }

    subtree(tree.root(), model, tree, &unary)
        .iter()
        .flat_map(|m| m.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Path-sum metric of a weighted tree.
pub fn tree_metric(n: usize, edges: &[(usize, usize)], lens: &[f64]) -> DistanceMatrix {
    let mut adj = vec![Vec::new(); n];
    for (e, &(a, b)) in edges.iter().enumerate() {
        adj[a].push((b, lens[e]));
        adj[b].push((a, lens[e]));
    }
    let mut m = Array2::<f64>::zeros((n, n));
    for s in 0..n {
        let mut dist = vec![f64::NAN; n];
        dist[s] = 0.0;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &(v, len) in &adj[u] {
                if dist[v].is_nan() {
                    dist[v] = dist[u] + len;
                    stack.push(v);
                }
            }
        }
        for t in 0..n {
            m[(s, t)] = dist[t];
        }
    }
    DistanceMatrix::new(m).expect("tree metric is valid")
}

/// Random tree with edge weights in [0.2, 2], attach-to-earlier model.
pub fn random_weighted_tree(rng: &mut StdRng, n: usize) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut edges = Vec::new();
    let mut lens = Vec::new();
    for v in 1..n {
        edges.push((rng.gen_range(0..v), v));
        lens.push(rng.gen_range(0.2..2.0));
    }
    (edges, lens)
}

/// Unit-variance Gaussian tree samples: child = rho * parent + noise, with
/// the process rooted at node 0. Each node's parent is the node through
/// which it is first reached from the root, so any edge listing works.
pub fn sample_gaussian_tree(
    rng: &mut StdRng,
    edges: &[(usize, usize)],
    rho: &[f64],
    n_nodes: usize,
    n_samples: usize,
) -> Array2<f64> {
    let mut order = vec![0usize];
    let mut placed = vec![false; n_nodes];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n_nodes]; // (parent, edge)
    placed[0] = true;
    while order.len() < n_nodes {
        for (e, &(a, b)) in edges.iter().enumerate() {
            if placed[a] && !placed[b] {
                parent[b] = Some((a, e));
                placed[b] = true;
                order.push(b);
            } else if placed[b] && !placed[a] {
                parent[a] = Some((b, e));
                placed[a] = true;
                order.push(a);
            }
        }
    }
    let mut x = Array2::<f64>::zeros((n_samples, n_nodes));
    for s in 0..n_samples {
        for &node in &order {
            let z: f64 = StandardNormal.sample(rng);
            match parent[node] {
                None => x[(s, node)] = z,
                Some((p, e)) => {
                    x[(s, node)] = rho[e] * x[(s, p)] + (1.0 - rho[e] * rho[e]).sqrt() * z;
                }
            }
        }
    }
    x
}

/// F1 of undirected edge sets.
pub fn edge_f1(a: &HashSet<(usize, usize)>, b: &HashSet<(usize, usize)>) -> f64 {
    let inter = a.intersection(b).count() as f64;
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * inter / (a.len() + b.len()) as f64
}

/// Little-endian byte dump of a float slice, for determinism comparisons.
pub fn f64_bytes<'a>(values: impl IntoIterator<Item = &'a f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| v.to_bits().to_le_bytes())
        .collect()
}
