//! Shared domain types: parts, tree structure, model parameters, pose
//! hypotheses, plus model validation and versioned binary serialization.

mod serialize;

pub use serialize::{
    deserialize_model, load_model, save_model, serialize_model, FORMAT_VERSION, MAGIC,
};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::features::HOG_CHANNELS;
use crate::scoring::{DeformationParams, CONCAVITY_EPS};

/// Whether a part is a single joint or a multi-joint region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartKind {
    Single,
    Combined,
}

/// One part of the articulated model.
///
/// Single parts are joints (elbow, knee); their types are morphologies
/// derived from relative positions to tree neighbors. Combined parts span
/// two or more single parts (upper arm = shoulder + elbow); their types are
/// appearance-learned visual categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub id: usize,
    pub name: String,
    pub kind: PartKind,
    /// Single-part ids a combined part spans; empty for single parts.
    /// Order matters: the first id and the centroid of the rest define the
    /// limb segment used for skeleton fitting and PCP scoring.
    pub constituent_ids: Vec<usize>,
    pub num_types: usize,
}

impl PartSpec {
    pub fn single(id: usize, name: impl Into<String>, num_types: usize) -> Self {
        Self {
            id,
            name: name.into(),
            kind: PartKind::Single,
            constituent_ids: Vec::new(),
            num_types,
        }
    }

    pub fn combined(
        id: usize,
        name: impl Into<String>,
        constituent_ids: Vec<usize>,
        num_types: usize,
    ) -> Self {
        Self {
            id,
            name: name.into(),
            kind: PartKind::Combined,
            constituent_ids,
            num_types,
        }
    }
}

/// Check the part roster invariants; returns human-readable violations.
pub fn validate_parts(parts: &[PartSpec]) -> Vec<String> {
    let mut violations = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        if p.id != i {
            violations.push(format!("part {} has id {} (ids must be 0-based dense)", i, p.id));
        }
        if p.num_types == 0 {
            violations.push(format!("part {} ({}) has zero types", i, p.name));
        }
        match p.kind {
            PartKind::Single => {
                if !p.constituent_ids.is_empty() {
                    violations.push(format!("single part {} lists constituents", p.name));
                }
            }
            PartKind::Combined => {
                let distinct: HashSet<_> = p.constituent_ids.iter().collect();
                if p.constituent_ids.len() < 2 || distinct.len() != p.constituent_ids.len() {
                    violations.push(format!(
                        "combined part {} needs >= 2 distinct constituents",
                        p.name
                    ));
                }
                for &c in &p.constituent_ids {
                    match parts.get(c) {
                        Some(q) if q.kind == PartKind::Single => {}
                        Some(_) => violations.push(format!(
                            "combined part {} nests combined part {}",
                            p.name, c
                        )),
                        None => violations.push(format!(
                            "combined part {} references missing part {}",
                            p.name, c
                        )),
                    }
                }
            }
        }
    }
    violations
}

/// Rooted tree over the model's nodes.
///
/// Edges are stored parent -> child. Construction accepts edges in either
/// orientation and re-orients them away from the root, so acceptance is
/// exactly: |E| = |V| - 1 and the undirected edge set is connected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStructure {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    root: usize,
}

impl TreeStructure {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>, root: usize) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidModel(vec!["tree has zero nodes".into()]));
        }
        if root >= num_nodes {
            return Err(Error::InvalidModel(vec![format!(
                "root {} out of range ({} nodes)",
                root, num_nodes
            )]));
        }
        if edges.len() != num_nodes - 1 {
            return Err(Error::InvalidModel(vec![format!(
                "tree needs {} edges, got {} (cycle/duplicate edge or missing edge)",
                num_nodes - 1,
                edges.len()
            )]));
        }
        let mut seen = HashSet::new();
        let mut adj = vec![Vec::new(); num_nodes];
        for &(a, b) in &edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::InvalidModel(vec![format!(
                    "edge ({},{}) out of range",
                    a, b
                )]));
            }
            let key = (a.min(b), a.max(b));
            if a == b || !seen.insert(key) {
                return Err(Error::InvalidModel(vec![format!(
                    "cycle/duplicate edge ({},{})",
                    a, b
                )]));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        // BFS from root; with |E| = |V|-1, full reachability implies a tree.
        let mut parent = vec![usize::MAX; num_nodes];
        let mut order = vec![root];
        let mut visited = vec![false; num_nodes];
        visited[root] = true;
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = u;
                    order.push(v);
                }
            }
        }
        if order.len() != num_nodes {
            return Err(Error::InvalidModel(vec![
                "tree is not connected (some node unreachable from root)".into(),
            ]));
        }
        let oriented: Vec<(usize, usize)> = order[1..].iter().map(|&v| (parent[v], v)).collect();
        Ok(Self {
            num_nodes,
            edges: oriented,
            root,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Edges oriented parent -> child, in BFS order from the root.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn children(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(p, _)| p == node)
            .map(|&(_, c)| c)
            .collect()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.edges
            .iter()
            .find(|&&(_, c)| c == node)
            .map(|&(p, _)| p)
    }

    /// Nodes in BFS order from the root (parents before children).
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![self.root];
        for &(_, c) in &self.edges {
            order.push(c);
        }
        order
    }

    /// Same undirected tree, re-rooted.
    pub fn rerooted(&self, new_root: usize) -> Result<Self> {
        Self::new(self.num_nodes, self.edges.clone(), new_root)
    }

    /// Undirected edge set with normalized (min, max) endpoints.
    pub fn undirected_edges(&self) -> HashSet<(usize, usize)> {
        self.edges
            .iter()
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect()
    }
}

/// Grid placement of a part: cell coordinates plus pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartLocation {
    pub x: usize,
    pub y: usize,
    pub level: usize,
}

/// A (location, type) assignment for one part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartHypothesis {
    pub part_id: usize,
    pub loc: PartLocation,
    pub type_id: usize,
}

/// A full pose: one hypothesis per part, all at the same pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseHypothesis {
    pub parts: Vec<PartHypothesis>,
    pub score: f64,
}

/// All learned parameters of the pose model.
///
/// Appearance filters and unary biases are indexed `[part][type]`;
/// deformation parameters and pairwise biases are indexed
/// `[edge][parent_type][child_type]`, with edges in `TreeStructure::edges`
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub cell_size: usize,
    pub canonical_height: f64,
    pub appearance: Vec<Vec<Array3<f64>>>,
    pub unary_bias: Vec<Vec<f64>>,
    pub deformation: Vec<Vec<Vec<DeformationParams>>>,
    pub pairwise_bias: Vec<Vec<Vec<f64>>>,
}

impl ModelParameters {
    /// Zero-initialized parameters for the given roster, tree, and filter
    /// dimensions (`filter_dims[part][type] = (rows, cols)` in cells).
    pub fn zeroed(
        parts: &[PartSpec],
        tree: &TreeStructure,
        filter_dims: &[Vec<(usize, usize)>],
        cell_size: usize,
        canonical_height: f64,
    ) -> Self {
        let appearance = filter_dims
            .iter()
            .map(|dims| {
                dims.iter()
                    .map(|&(fh, fw)| Array3::zeros((fh, fw, HOG_CHANNELS)))
                    .collect()
            })
            .collect();
        let unary_bias = parts.iter().map(|p| vec![0.0; p.num_types]).collect();
        let deformation = tree
            .edges()
            .iter()
            .map(|&(p, c)| {
                vec![vec![DeformationParams::default(); parts[c].num_types]; parts[p].num_types]
            })
            .collect();
        let pairwise_bias = tree
            .edges()
            .iter()
            .map(|&(p, c)| vec![vec![0.0; parts[c].num_types]; parts[p].num_types])
            .collect();
        Self {
            cell_size,
            canonical_height,
            appearance,
            unary_bias,
            deformation,
            pairwise_bias,
        }
    }

    /// Filter dimensions (rows, cols) for every (part, type).
    pub fn filter_dims(&self) -> Vec<Vec<(usize, usize)>> {
        self.appearance
            .iter()
            .map(|per_type| {
                per_type
                    .iter()
                    .map(|f| (f.shape()[0], f.shape()[1]))
                    .collect()
            })
            .collect()
    }

    /// Clamp quadratic deformation weights to stay concave.
    pub fn clamp_concavity(&mut self) {
        for per_edge in &mut self.deformation {
            for per_parent in per_edge {
                for d in per_parent {
                    d.w[2] = d.w[2].min(-CONCAVITY_EPS);
                    d.w[3] = d.w[3].min(-CONCAVITY_EPS);
                }
            }
        }
    }
}

/// Outcome of `validate_model`: empty violation list means pass.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every structural invariant tying the parameters to the part roster
/// and tree: tensor shapes, type-index ranges, concavity, finiteness.
pub fn validate_model(
    model: &ModelParameters,
    parts: &[PartSpec],
    tree: &TreeStructure,
) -> ValidationReport {
    let mut v = validate_parts(parts);

    if tree.num_nodes() != parts.len() {
        v.push(format!(
            "tree covers {} nodes but roster has {} parts",
            tree.num_nodes(),
            parts.len()
        ));
    }
    if model.cell_size == 0 {
        v.push("cell_size is zero".into());
    }

    if model.appearance.len() != parts.len() {
        v.push(format!(
            "appearance covers {} parts, roster has {}",
            model.appearance.len(),
            parts.len()
        ));
    } else {
        for (p, per_type) in model.appearance.iter().enumerate() {
            if per_type.len() != parts[p].num_types {
                v.push(format!(
                    "part {} has {} filters for {} types",
                    p,
                    per_type.len(),
                    parts[p].num_types
                ));
            }
            for (t, f) in per_type.iter().enumerate() {
                let sh = f.shape();
                if sh[2] != HOG_CHANNELS {
                    v.push(format!(
                        "filter ({},{}) shape mismatch: {} channels, expected {}",
                        p, t, sh[2], HOG_CHANNELS
                    ));
                }
                if sh[0] == 0 || sh[1] == 0 {
                    v.push(format!("filter ({},{}) has empty extent", p, t));
                }
                if f.iter().any(|x| !x.is_finite()) {
                    v.push(format!("filter ({},{}) has non-finite values", p, t));
                }
            }
        }
    }

    if model.unary_bias.len() != parts.len() {
        v.push("unary bias table does not cover all parts".into());
    } else {
        for (p, biases) in model.unary_bias.iter().enumerate() {
            if biases.len() != parts[p].num_types {
                v.push(format!("unary bias for part {} has wrong type count", p));
            }
        }
    }

    let edges = tree.edges();
    if model.deformation.len() != edges.len() || model.pairwise_bias.len() != edges.len() {
        v.push(format!(
            "edge parameter tables cover {} / {} edges, tree has {}",
            model.deformation.len(),
            model.pairwise_bias.len(),
            edges.len()
        ));
    } else {
        for (e, &(p, c)) in edges.iter().enumerate() {
            let (kp, kc) = (parts[p].num_types, parts[c].num_types);
            let def = &model.deformation[e];
            let bias = &model.pairwise_bias[e];
            if def.len() != kp || bias.len() != kp {
                v.push(format!("edge {} parameter tables have wrong parent-type count", e));
                continue;
            }
            for tp in 0..kp {
                if def[tp].len() != kc || bias[tp].len() != kc {
                    v.push(format!("edge {} parameter tables have wrong child-type count", e));
                    continue;
                }
                for tc in 0..kc {
                    let w = &def[tp][tc].w;
                    if w[2] > -CONCAVITY_EPS || w[3] > -CONCAVITY_EPS {
                        v.push(format!(
                            "edge {} types ({},{}) deformation not concave: dx2={}, dy2={}",
                            e, tp, tc, w[2], w[3]
                        ));
                    }
                    if w.iter().any(|x| !x.is_finite()) {
                        v.push(format!("edge {} types ({},{}) has non-finite weights", e, tp, tc));
                    }
                }
            }
        }
    }

    ValidationReport { violations: v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tiny_parts() -> Vec<PartSpec> {
        vec![
            PartSpec::single(0, "a", 2),
            PartSpec::single(1, "b", 1),
            PartSpec::combined(2, "ab", vec![0, 1], 3),
        ]
    }

    fn tiny_model() -> (ModelParameters, Vec<PartSpec>, TreeStructure) {
        let parts = tiny_parts();
        let tree = TreeStructure::new(3, vec![(0, 1), (0, 2)], 0).unwrap();
        let dims = vec![
            vec![(1, 1), (2, 2)],
            vec![(1, 2)],
            vec![(2, 1), (1, 1), (2, 2)],
        ];
        let mut m = ModelParameters::zeroed(&parts, &tree, &dims, 4, 96.0);
        m.clamp_concavity();
        (m, parts, tree)
    }

    #[test]
    fn well_formed_model_passes() {
        let (m, parts, tree) = tiny_model();
        assert!(validate_model(&m, &parts, &tree).is_pass());
    }

    #[test]
    fn duplicate_edge_rejected() {
        let err = TreeStructure::new(3, vec![(0, 1), (0, 1)], 0).unwrap_err();
        assert!(err.to_string().contains("cycle/duplicate edge"));
    }

    #[test]
    fn wrong_channel_count_fails_validation() {
        let (mut m, parts, tree) = tiny_model();
        m.appearance[0][0] = Array3::zeros((1, 1, HOG_CHANNELS - 1));
        let report = validate_model(&m, &parts, &tree);
        assert!(!report.is_pass());
        assert!(report.violations.iter().any(|s| s.contains("shape mismatch")));
    }

    #[test]
    fn nested_combined_parts_rejected() {
        let mut parts = tiny_parts();
        parts.push(PartSpec::combined(3, "nested", vec![0, 2], 1));
        let v = validate_parts(&parts);
        assert!(v.iter().any(|s| s.contains("nests combined")));
    }

    #[test]
    fn edges_reoriented_from_root() {
        // Edges given child -> parent; construction flips them.
        let t = TreeStructure::new(3, vec![(1, 0), (2, 0)], 0).unwrap();
        assert_eq!(t.children(0), vec![1, 2]);
        assert_eq!(t.parent(1), Some(0));
        assert_eq!(t.parent(0), None);
    }

    #[test]
    fn rerooting_preserves_undirected_edges() {
        let t = TreeStructure::new(4, vec![(0, 1), (1, 2), (1, 3)], 0).unwrap();
        let r = t.rerooted(2).unwrap();
        assert_eq!(t.undirected_edges(), r.undirected_edges());
        assert_eq!(r.root(), 2);
    }

    // Reference acceptance check: |E| = |V|-1 and undirected-connected.
    fn reference_is_tree(n: usize, edges: &[(usize, usize)]) -> bool {
        if edges.len() != n - 1 {
            return false;
        }
        let mut adj = vec![Vec::new(); n];
        let mut seen = HashSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n || a == b || !seen.insert((a.min(b), a.max(b))) {
                return false;
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut visited = vec![false; n];
        let mut stack = vec![0];
        visited[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == n
    }

    #[test]
    fn random_graph_fuzz_matches_reference() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..500 {
            let n = rng.gen_range(2..10);
            let m = rng.gen_range(0..n + 2);
            let edges: Vec<(usize, usize)> = (0..m)
                .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
                .collect();
            let accepted = TreeStructure::new(n, edges.clone(), 0).is_ok();
            assert_eq!(accepted, reference_is_tree(n, &edges), "n={} edges={:?}", n, edges);
        }
    }
}
