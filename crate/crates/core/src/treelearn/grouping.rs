//! Recursive grouping and CLGrouping: build a (possibly latent) tree whose
//! path metric reproduces a matrix of information distances.
//!
//! For every active pair (i, j) and witness k the statistic
//! delta_k = d_ik - d_jk decides the relationship:
//! delta_k = d_ij for all k means j is the parent of i (j separates i from
//! everything), delta_k = -d_ij means i is the parent of j, and a constant
//! delta strictly inside (-d_ij, d_ij) makes i and j siblings. Sibling
//! groups without an observed parent get a fresh hidden parent whose
//! distances are estimated by witness averaging. Equality tests use a
//! caller-supplied tolerance in nats.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::model::TreeStructure;
use crate::treelearn::DistanceMatrix;

const MIN_EDGE_LENGTH: f64 = 1e-9;

/// A tree over observed variables 0..V-1 plus hidden nodes V..V+H-1, with
/// per-edge lengths in nats (aligned with `tree.edges()`).
#[derive(Debug, Clone)]
pub struct LatentTree {
    pub tree: TreeStructure,
    pub edge_lengths: Vec<f64>,
    pub hidden_count: usize,
}

impl LatentTree {
    fn from_edges(
        total_nodes: usize,
        observed: usize,
        undirected: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let tree = TreeStructure::new(
            total_nodes,
            undirected.iter().map(|&(a, b, _)| (a, b)).collect(),
            0,
        )?;
        let by_pair: HashMap<(usize, usize), f64> = undirected
            .iter()
            .map(|&(a, b, len)| ((a.min(b), a.max(b)), len))
            .collect();
        let edge_lengths = tree
            .edges()
            .iter()
            .map(|&(a, b)| by_pair[&(a.min(b), a.max(b))])
            .collect();
        let lt = Self {
            tree,
            edge_lengths,
            hidden_count: total_nodes - observed,
        };
        // Hidden nodes exist only as junctions; degree <= 2 would make them
        // redundant.
        for h in observed..total_nodes {
            if lt.degree(h) < 3 {
                return Err(Error::Config(format!(
                    "internal grouping error: hidden node {h} has degree {}",
                    lt.degree(h)
                )));
            }
        }
        Ok(lt)
    }

    pub fn observed_count(&self) -> usize {
        self.tree.num_nodes() - self.hidden_count
    }

    pub fn is_hidden(&self, node: usize) -> bool {
        node >= self.observed_count()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.tree
            .edges()
            .iter()
            .filter(|&&(a, b)| a == node || b == node)
            .count()
    }

    /// All-pairs path distances over the full node set.
    pub fn path_distances(&self) -> ndarray::Array2<f64> {
        let n = self.tree.num_nodes();
        let mut adj = vec![Vec::new(); n];
        for (e, &(a, b)) in self.tree.edges().iter().enumerate() {
            adj[a].push((b, self.edge_lengths[e]));
            adj[b].push((a, self.edge_lengths[e]));
        }
        let mut out = ndarray::Array2::<f64>::zeros((n, n));
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
                out[(s, t)] = dist[t];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Rel {
    /// Lower-indexed node is the parent of the higher-indexed one.
    FirstParentOfSecond,
    SecondParentOfFirst,
    Siblings,
}

struct PairStats {
    rel: Option<Rel>,
    /// How far the pair is from passing its best test (diagnostics).
    violation: f64,
    /// Witness with the largest deviation.
    worst_witness: usize,
}

fn classify_pair(dist: &[Vec<f64>], active: &[usize], i: usize, j: usize, tol: f64) -> PairStats {
    let dij = dist[i][j];
    let mut deltas = Vec::with_capacity(active.len());
    for &k in active {
        if k != i && k != j {
            deltas.push((k, dist[i][k] - dist[j][k]));
        }
    }
    if deltas.is_empty() {
        return PairStats {
            rel: Some(Rel::Siblings),
            violation: 0.0,
            worst_witness: usize::MAX,
        };
    }
    let mut dev_second_parent = 0.0f64; // delta = +d_ij: j parent of i
    let mut dev_first_parent = 0.0f64; // delta = -d_ij: i parent of j
    let mut min_d = f64::INFINITY;
    let mut max_d = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &(_, d) in &deltas {
        dev_second_parent = dev_second_parent.max((d - dij).abs());
        dev_first_parent = dev_first_parent.max((d + dij).abs());
        min_d = min_d.min(d);
        max_d = max_d.max(d);
        sum += d;
    }
    let mean = sum / deltas.len() as f64;
    let spread = max_d - min_d;
    let sibling_violation = spread.max((mean.abs() - dij).max(0.0));

    let worst = |target: f64| -> usize {
        deltas
            .iter()
            .max_by(|a, b| {
                (a.1 - target)
                    .abs()
                    .partial_cmp(&(b.1 - target).abs())
                    .unwrap()
            })
            .unwrap()
            .0
    };

    if dev_second_parent <= tol || dev_first_parent <= tol {
        let rel = if dev_first_parent < dev_second_parent {
            Rel::FirstParentOfSecond
        } else if dev_second_parent < dev_first_parent {
            Rel::SecondParentOfFirst
        } else {
            Rel::FirstParentOfSecond // exact tie: lower index leads
        };
        return PairStats {
            rel: Some(rel),
            violation: dev_second_parent.min(dev_first_parent),
            worst_witness: usize::MAX,
        };
    }
    if spread <= tol && mean.abs() <= dij {
        return PairStats {
            rel: Some(Rel::Siblings),
            violation: sibling_violation,
            worst_witness: usize::MAX,
        };
    }
    let violation = sibling_violation
        .min(dev_second_parent)
        .min(dev_first_parent);
    PairStats {
        rel: None,
        violation,
        worst_witness: worst(mean),
    }
}

struct UnionFind {
    parent: HashMap<usize, usize>,
}

impl UnionFind {
    fn new(nodes: &[usize]) -> Self {
        Self {
            parent: nodes.iter().map(|&n| (n, n)).collect(),
        }
    }
    fn find(&mut self, x: usize) -> usize {
        let p = self.parent[&x];
        if p == x {
            x
        } else {
            let r = self.find(p);
            self.parent.insert(x, r);
            r
        }
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Deterministic: larger root points at smaller.
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent.insert(hi, lo);
        }
    }
}

/// Estimate the distance from family member `i` to the family's hidden
/// parent: average of (d_ij + d_ik - d_jk) / 2 over co-members j and
/// witnesses k.
fn hidden_distance(
    dist: &[Vec<f64>],
    active: &[usize],
    family: &[usize],
    i: usize,
) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for &j in family {
        if j == i {
            continue;
        }
        let mut witnessed = false;
        for &k in active {
            if k != i && k != j {
                acc += (dist[i][j] + dist[i][k] - dist[j][k]) / 2.0;
                count += 1;
                witnessed = true;
            }
        }
        if !witnessed {
            // Two-member family with no external witness: split the edge.
            acc += dist[i][j] / 2.0;
            count += 1;
        }
    }
    (acc / count.max(1) as f64).max(MIN_EDGE_LENGTH)
}

/// One grouping pass over `active`, mutating the shared distance matrix when
/// hidden nodes are introduced. Returns the undirected edges (with lengths)
/// spanning the active set plus any created hidden nodes.
fn run_grouping(
    dist: &mut Vec<Vec<f64>>,
    mut active: Vec<usize>,
    tol: f64,
) -> Result<Vec<(usize, usize, f64)>> {
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    active.sort_unstable();

    loop {
        if active.len() <= 1 {
            return Ok(edges);
        }
        if active.len() == 2 {
            let (u, v) = (active[0], active[1]);
            edges.push((u, v, dist[u][v].max(MIN_EDGE_LENGTH)));
            return Ok(edges);
        }

        // Classify every pair.
        let mut rels: BTreeMap<(usize, usize), Rel> = BTreeMap::new();
        let mut best_violation = f64::INFINITY;
        let mut best_triplet = (active[0], active[1], active[2]);
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let (i, j) = (active[a], active[b]);
                let stats = classify_pair(dist, &active, i, j, tol);
                if let Some(rel) = stats.rel {
                    rels.insert((i, j), rel);
                } else if stats.violation < best_violation {
                    best_violation = stats.violation;
                    best_triplet = (i, j, stats.worst_witness);
                }
            }
        }

        // Families: connected components of the relation graph.
        let mut uf = UnionFind::new(&active);
        for &(i, j) in rels.keys() {
            uf.union(i, j);
        }
        let mut families: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &n in &active {
            families.entry(uf.find(n)).or_default().push(n);
        }

        let mut removed: HashSet<usize> = HashSet::new();
        let mut created: Vec<usize> = Vec::new();
        let mut progressed = false;

        for family in families.values() {
            if family.len() < 2 {
                continue;
            }
            progressed = true;

            // Parent/child counts inside the family.
            let mut child_of: HashMap<usize, usize> = HashMap::new(); // node -> #parents
            let mut children_count: HashMap<usize, usize> = HashMap::new();
            for (&(i, j), &rel) in &rels {
                if !family.contains(&i) || !family.contains(&j) {
                    continue;
                }
                match rel {
                    Rel::FirstParentOfSecond => {
                        *children_count.entry(i).or_default() += 1;
                        *child_of.entry(j).or_default() += 1;
                    }
                    Rel::SecondParentOfFirst => {
                        *children_count.entry(j).or_default() += 1;
                        *child_of.entry(i).or_default() += 1;
                    }
                    Rel::Siblings => {}
                }
            }
            let head = family
                .iter()
                .filter(|&&n| children_count.contains_key(&n) && !child_of.contains_key(&n))
                .max_by_key(|&&n| (children_count[&n], std::cmp::Reverse(n)))
                .copied();

            match head {
                Some(h) => {
                    for &m in family {
                        if m != h {
                            edges.push((h, m, dist[h][m].max(MIN_EDGE_LENGTH)));
                            removed.insert(m);
                        }
                    }
                }
                None => {
                    // Pure sibling group: introduce a hidden parent and
                    // estimate its distances to every node in the matrix.
                    let h = dist.len();
                    let member_dist: Vec<(usize, f64)> = family
                        .iter()
                        .map(|&m| (m, hidden_distance(dist, &active, family, m)))
                        .collect();
                    let n_old = dist.len();
                    let mut row = vec![0.0; n_old + 1];
                    for k in 0..n_old {
                        if let Some(&(_, dmh)) = member_dist.iter().find(|&&(m, _)| m == k) {
                            row[k] = dmh;
                        } else {
                            let mut acc = 0.0;
                            for &(m, dmh) in &member_dist {
                                acc += dist[m][k] - dmh;
                            }
                            row[k] = (acc / member_dist.len() as f64).max(MIN_EDGE_LENGTH);
                        }
                    }
                    for (k, r) in dist.iter_mut().enumerate() {
                        r.push(row[k]);
                    }
                    dist.push(row);
                    for &(m, dmh) in &member_dist {
                        edges.push((h, m, dmh));
                        removed.insert(m);
                    }
                    created.push(h);
                }
            }
        }

        if !progressed {
            let (i, j, k) = best_triplet;
            return Err(Error::NotTreeRealizable {
                i,
                j,
                k,
                violation: best_violation,
            });
        }

        active.retain(|n| !removed.contains(n));
        active.extend(created);
        active.sort_unstable();
    }
}

/// Build a latent tree from distances by recursive grouping. For exactly
/// tree-realizable inputs the output's pairwise path distances reproduce the
/// matrix within the tolerance; hidden nodes appear only when a sibling
/// group has no observed parent.
pub fn recursive_grouping(d: &DistanceMatrix, tolerance: f64) -> Result<LatentTree> {
    assert!(tolerance >= 0.0, "tolerance must be non-negative");
    let v = d.len();
    if v == 0 {
        return Err(Error::Config("empty distance matrix".into()));
    }
    let mut dist: Vec<Vec<f64>> = (0..v)
        .map(|i| (0..v).map(|j| d.get(i, j)).collect())
        .collect();
    let edges = run_grouping(&mut dist, (0..v).collect(), tolerance)?;
    LatentTree::from_edges(dist.len(), v, &edges)
}

/// Minimum-spanning tree of the distance matrix over observed variables
/// (equivalently the maximum-correlation spanning tree). Kruskal with edges
/// ordered by (distance, i, j); the lowest-index pair wins ties. Rooted at
/// node 0.
pub fn chow_liu_tree(d: &DistanceMatrix) -> TreeStructure {
    let v = d.len();
    assert!(v >= 1);
    let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(v * (v - 1) / 2);
    for i in 0..v {
        for j in i + 1..v {
            order.push((d.get(i, j), i, j));
        }
    }
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut uf = UnionFind::new(&(0..v).collect::<Vec<_>>());
    let mut edges = Vec::with_capacity(v.saturating_sub(1));
    for (_, i, j) in order {
        if uf.find(i) != uf.find(j) {
            uf.union(i, j);
            edges.push((i, j));
            if edges.len() == v - 1 {
                break;
            }
        }
    }
    TreeStructure::new(v, edges, 0).expect("spanning tree is valid")
}

/// CLGrouping: Chow-Liu spanning tree first, then recursive grouping applied
/// to each internal node's closed neighborhood, splicing the local result
/// back into the tree. More robust than plain recursive grouping on large
/// diameter graphs because witnesses stay local.
pub fn cl_grouping(d: &DistanceMatrix, tolerance: f64) -> Result<LatentTree> {
    let v = d.len();
    if v == 0 {
        return Err(Error::Config("empty distance matrix".into()));
    }
    if v <= 2 {
        let edges: Vec<(usize, usize, f64)> = if v == 2 {
            vec![(0, 1, d.get(0, 1).max(MIN_EDGE_LENGTH))]
        } else {
            Vec::new()
        };
        return LatentTree::from_edges(v, v, &edges);
    }

    let cl = chow_liu_tree(d);
    let mut dist: Vec<Vec<f64>> = (0..v)
        .map(|i| (0..v).map(|j| d.get(i, j)).collect())
        .collect();

    // Mutable undirected adjacency with lengths.
    let mut adj: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for &(a, b) in cl.edges() {
        let len = d.get(a, b).max(MIN_EDGE_LENGTH);
        adj.entry(a).or_default().insert(b, len);
        adj.entry(b).or_default().insert(a, len);
    }

    let internal: Vec<usize> = (0..v).filter(|&n| adj[&n].len() >= 2).collect();
    for vnode in internal {
        let nbrs: Vec<usize> = adj[&vnode].keys().copied().collect();
        let mut active = nbrs.clone();
        active.push(vnode);
        let local = run_grouping(&mut dist, active, tolerance)?;
        for &u in &nbrs {
            adj.get_mut(&vnode).unwrap().remove(&u);
            adj.get_mut(&u).unwrap().remove(&vnode);
        }
        for (a, b, len) in local {
            adj.entry(a).or_default().insert(b, len);
            adj.entry(b).or_default().insert(a, len);
        }
    }

    let mut edges = Vec::new();
    for (&a, nb) in &adj {
        for (&b, &len) in nb {
            if a < b {
                edges.push((a, b, len));
            }
        }
    }
    LatentTree::from_edges(dist.len(), v, &edges)
}
