//! Seeded k-means (k-means++ init, Lloyd iterations to a fixpoint) used for
//! patch-geometry clustering, single-part type derivation, and category
//! label initialization.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub sse: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cluster `points` (rows) into k groups. Empty clusters are re-seeded with
/// the point farthest from its center (lowest index on ties), so every
/// cluster in the result is non-empty. Deterministic for a fixed seed.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Result<KmeansResult> {
    let (n, dim) = points.dim();
    assert!(k >= 1, "k must be >= 1");
    let distinct = {
        let mut rows: Vec<Vec<u64>> = points
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.dedup();
        rows.len()
    };
    if k > distinct {
        return Err(Error::TooFewPoints { k, distinct });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| points.row(i).to_slice().expect("contiguous rows");

    // k-means++ seeding.
    let mut centers = Array2::<f64>::zeros((k, dim));
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers.row(0).to_vec())).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All mass at existing centers: pick the first point that is not
            // already a center.
            (0..n)
                .find(|&i| d2[i] > 0.0)
                .unwrap_or_else(|| rng.gen_range(0..n))
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.row_mut(c).assign(&points.row(next));
        for i in 0..n {
            let d = sq_dist(row(i), &centers.row(c).to_vec());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut labels = vec![0usize; n];
    for _iter in 0..500 {
        // Assign: nearest center, lowest index on ties.
        let mut changed = false;
        for i in 0..n {
            let mut best = f64::INFINITY;
            let mut best_c = 0;
            for c in 0..k {
                let d = sq_dist(row(i), &centers.row(c).to_vec());
                if d < best {
                    best = d;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }

        // Re-seed empty clusters with the worst-fit point.
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let worst = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        sq_dist(row(a), &centers.row(labels[a]).to_vec())
                            .partial_cmp(&sq_dist(row(b), &centers.row(labels[b]).to_vec()))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .expect("k <= distinct points guarantees a donor");
                counts[labels[worst]] -= 1;
                labels[worst] = c;
                counts[c] = 1;
                changed = true;
            }
        }

        // Update.
        let mut new_centers = Array2::<f64>::zeros((k, dim));
        for i in 0..n {
            let mut target = new_centers.row_mut(labels[i]);
            target += &points.row(i);
        }
        for c in 0..k {
            let mut target = new_centers.row_mut(c);
            target /= counts[c] as f64;
        }
        centers = new_centers;
        if !changed {
            break;
        }
    }

    let sse = (0..n)
        .map(|i| sq_dist(row(i), &centers.row(labels[i]).to_vec()))
        .sum();
    Ok(KmeansResult {
        labels,
        centers,
        sse,
    })
}

/// Cluster part bounding boxes by size and return per-cluster mean sizes,
/// rounded to whole HOG cells (at least one cell each way).
pub fn kmeans_patch_geometry(
    instances: &[(f64, f64)],
    k: usize,
    seed: u64,
    cell_size: usize,
) -> Result<Vec<(usize, usize)>> {
    let n = instances.len();
    let mut points = Array2::<f64>::zeros((n, 2));
    for (i, &(w, h)) in instances.iter().enumerate() {
        points[(i, 0)] = w;
        points[(i, 1)] = h;
    }
    let result = kmeans(&points, k, seed)?;
    Ok((0..k)
        .map(|c| {
            let w = (result.centers[(c, 0)] / cell_size as f64).round().max(1.0) as usize;
            let h = (result.centers[(c, 1)] / cell_size as f64).round().max(1.0) as usize;
            (w, h)
        })
        .collect())
}
