//! Linear SVM solved by dual coordinate descent over a cache of sparse
//! constraint vectors.
//!
//! Primal: min 1/2 ||w||^2 + C sum_i max(0, 1 - y_i w.x_i). The dual has one
//! box-constrained variable per example; coordinate updates are exact and
//! the weight vector is maintained incrementally. Used for both the visual
//! category classifiers and the joint max-margin objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn new() -> Self {
        Self {
            idx: Vec::new(),
            val: Vec::new(),
        }
    }

    pub fn from_dense(dense: &[f64]) -> Self {
        let mut v = Self::new();
        for (i, &x) in dense.iter().enumerate() {
            if x != 0.0 {
                v.push(i, x);
            }
        }
        v
    }

    pub fn push(&mut self, index: usize, value: f64) {
        debug_assert!(self.idx.last().map_or(true, |&last| (last as usize) < index));
        self.idx.push(index as u32);
        self.val.push(value);
    }

    /// Append a dense block starting at `offset`.
    pub fn push_block(&mut self, offset: usize, values: impl IntoIterator<Item = f64>) {
        for (i, v) in values.into_iter().enumerate() {
            if v != 0.0 {
                self.push(offset + i, v);
            }
        }
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn dot_dense(&self, w: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.val)
            .map(|(&i, &v)| w[i as usize] * v)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.val.iter().map(|v| v * v).sum()
    }

    /// w += scale * self
    pub fn add_into(&self, w: &mut [f64], scale: f64) {
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            w[i as usize] += scale * v;
        }
    }
}

impl Default for SparseVec {
    fn default() -> Self {
        Self::new()
    }
}

/// One margin constraint: y * <w, phi> >= 1 - xi.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub phi: SparseVec,
    pub y: f64,
    /// Permanent constraints (positives) survive cache eviction.
    pub permanent: bool,
    pub alpha: f64,
    norm_sq: f64,
}

impl Constraint {
    pub fn new(phi: SparseVec, y: f64, permanent: bool) -> Self {
        let norm_sq = phi.norm_sq();
        Self {
            phi,
            y,
            permanent,
            alpha: 0.0,
            norm_sq,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub epochs: usize,
    pub kkt_violation: f64,
    pub objective: f64,
}

/// Dual coordinate descent state over a constraint cache.
pub struct DualSvm {
    pub dim: usize,
    pub c: f64,
    pub w: Vec<f64>,
    constraints: Vec<Constraint>,
}

impl DualSvm {
    pub fn new(dim: usize, c: f64) -> Self {
        assert!(c > 0.0, "C must be positive");
        Self {
            dim,
            c,
            w: vec![0.0; dim],
            constraints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn add(&mut self, phi: SparseVec, y: f64, permanent: bool) {
        self.constraints.push(Constraint::new(phi, y, permanent));
    }

    /// Primal objective on the cache: 1/2 ||w||^2 + C sum hinge.
    pub fn objective(&self) -> f64 {
        let reg: f64 = 0.5 * self.w.iter().map(|x| x * x).sum::<f64>();
        let hinge: f64 = self
            .constraints
            .iter()
            .map(|c| (1.0 - c.y * c.phi.dot_dense(&self.w)).max(0.0))
            .sum();
        reg + self.c * hinge
    }

    /// Slack of each cached constraint under the current weights.
    pub fn slacks(&self) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| (1.0 - c.y * c.phi.dot_dense(&self.w)).max(0.0))
            .collect()
    }

    /// Largest projected-gradient magnitude over the dual variables; zero at
    /// the exact optimum.
    pub fn kkt_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for con in &self.constraints {
            let g = con.y * con.phi.dot_dense(&self.w) - 1.0;
            let pg = if con.alpha <= 0.0 {
                g.min(0.0)
            } else if con.alpha >= self.c {
                g.max(0.0)
            } else {
                g
            };
            worst = worst.max(pg.abs());
        }
        worst
    }

    /// Run coordinate descent epochs (seeded shuffles) until the KKT
    /// violation drops below `tol` or `max_epochs` is hit.
    pub fn solve(&mut self, tol: f64, max_epochs: usize, seed: u64) -> SolveStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..self.constraints.len()).collect();
        let c_bound = self.c;
        let mut epochs = 0;
        let constraints = &mut self.constraints;
        let w = &mut self.w;
        for epoch in 0..max_epochs {
            epochs = epoch + 1;
            order.shuffle(&mut rng);
            let mut max_pg = 0.0f64;
            for &i in &order {
                let con = &mut constraints[i];
                if con.norm_sq <= 0.0 {
                    continue;
                }
                let g = con.y * con.phi.dot_dense(w) - 1.0;
                let pg = if con.alpha <= 0.0 {
                    g.min(0.0)
                } else if con.alpha >= c_bound {
                    g.max(0.0)
                } else {
                    g
                };
                if pg.abs() < 1e-14 {
                    continue;
                }
                max_pg = max_pg.max(pg.abs());
                let old = con.alpha;
                let new = (old - g / con.norm_sq).clamp(0.0, c_bound);
                if new != old {
                    con.alpha = new;
                    con.phi.add_into(w, (new - old) * con.y);
                }
            }
            if max_pg < tol {
                break;
            }
        }
        SolveStats {
            epochs,
            kkt_violation: self.kkt_violation(),
            objective: self.objective(),
        }
    }

    /// Evict non-support (alpha = 0), non-permanent constraints until the
    /// cache is at most `cap` entries, oldest first. The weight vector is
    /// untouched (evicted constraints contribute nothing to it).
    pub fn evict_non_support(&mut self, cap: usize) {
        if self.constraints.len() <= cap {
            return;
        }
        let mut excess = self.constraints.len() - cap;
        let mut keep = Vec::with_capacity(self.constraints.len());
        for con in self.constraints.drain(..) {
            if excess > 0 && !con.permanent && con.alpha == 0.0 {
                excess -= 1;
            } else {
                keep.push(con);
            }
        }
        self.constraints = keep;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_svm_matches_closed_form() {
        // Positive u = (2, 0), negative v = (0, 1). The max-margin separator
        // solves beta.u = 1, beta.v = -1 with minimal norm: beta = (1/2, -1).
        let mut svm = DualSvm::new(2, 1e6);
        svm.add(SparseVec::from_dense(&[2.0, 0.0]), 1.0, true);
        svm.add(SparseVec::from_dense(&[0.0, 1.0]), -1.0, true);
        let stats = svm.solve(1e-10, 100_000, 7);
        assert!(stats.kkt_violation < 1e-8);
        assert!((svm.w[0] - 0.5).abs() < 1e-6, "w = {:?}", svm.w);
        assert!((svm.w[1] + 1.0).abs() < 1e-6, "w = {:?}", svm.w);
    }

    #[test]
    fn separable_set_has_tiny_slacks() {
        // Disjoint supports: positives live on coords 0..3, negatives on 3..6.
        let mut svm = DualSvm::new(6, 1000.0);
        for i in 0..5 {
            let mut p = SparseVec::new();
            p.push(i % 3, 1.0 + 0.1 * i as f64);
            svm.add(p, 1.0, true);
            let mut n = SparseVec::new();
            n.push(3 + (i % 3), 0.8 + 0.05 * i as f64);
            svm.add(n, -1.0, false);
        }
        svm.solve(1e-9, 50_000, 3);
        for s in svm.slacks() {
            assert!(s <= 1e-3, "slack {}", s);
        }
    }

    #[test]
    fn kkt_feasible_at_exit() {
        let mut svm = DualSvm::new(4, 10.0);
        // Noisy, non-separable data keeps some alphas at the box bound.
        let data: [([f64; 4], f64); 6] = [
            ([1.0, 0.2, 0.0, 0.0], 1.0),
            ([0.9, -0.1, 0.1, 0.0], 1.0),
            ([0.1, 1.0, 0.0, 0.2], -1.0),
            ([0.0, 0.9, 0.2, 0.0], -1.0),
            ([0.5, 0.5, 0.0, 0.0], 1.0),
            ([0.5, 0.5, 0.1, 0.0], -1.0),
        ];
        for (x, y) in data {
            svm.add(SparseVec::from_dense(&x), y, false);
        }
        let stats = svm.solve(1e-8, 200_000, 11);
        assert!(stats.kkt_violation < 1e-6, "kkt = {}", stats.kkt_violation);
        // Constraints hold exactly under the hinge-defined slacks.
        for (con, s) in svm.constraints().iter().zip(svm.slacks()) {
            assert!(con.y * con.phi.dot_dense(&svm.w) >= 1.0 - s - 1e-9);
        }
    }

    #[test]
    fn solving_never_raises_objective_from_warm_start() {
        let mut svm = DualSvm::new(3, 5.0);
        svm.add(SparseVec::from_dense(&[1.0, 0.0, 0.2]), 1.0, true);
        svm.add(SparseVec::from_dense(&[0.0, 1.0, 0.1]), -1.0, true);
        svm.solve(1e-6, 1000, 1);
        let before = svm.objective();
        svm.add(SparseVec::from_dense(&[0.5, 0.5, 0.0]), -1.0, false);
        let with_new = svm.objective();
        svm.solve(1e-9, 100_000, 2);
        assert!(svm.objective() <= with_new + 1e-9);
        // The new constraint can only push the optimum up from the old one.
        assert!(svm.objective() + 1e-9 >= before);
    }

    #[test]
    fn eviction_keeps_permanent_and_support_vectors() {
        let mut svm = DualSvm::new(2, 1.0);
        svm.add(SparseVec::from_dense(&[1.0, 0.0]), 1.0, true);
        for _ in 0..10 {
            svm.add(SparseVec::from_dense(&[0.0, 1.0]), -1.0, false);
        }
        svm.solve(1e-9, 10_000, 5);
        let support: usize = svm
            .constraints()
            .iter()
            .filter(|c| c.alpha > 0.0 || c.permanent)
            .count();
        svm.evict_non_support(2);
        assert!(svm.len() >= support.min(2));
        assert!(svm.constraints().iter().any(|c| c.permanent));
        let w_before = svm.w.clone();
        svm.solve(1e-9, 10_000, 6);
        for (a, b) in w_before.iter().zip(&svm.w) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
