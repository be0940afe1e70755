//! PCP (percentage of correct parts) scoring.
//!
//! A predicted limb matches when both of its endpoints lie within half the
//! ground-truth segment length of the corresponding ground-truth endpoints
//! (boundary inclusive). Endpoint correspondence follows annotation order,
//! never nearest-assignment, so flipped limbs get no credit.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A limb as a named segment between two pixel points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbSegment {
    pub name: String,
    pub endpoints: [(f64, f64); 2],
}

impl LimbSegment {
    pub fn length(&self) -> f64 {
        let dx = self.endpoints[1].0 - self.endpoints[0].0;
        let dy = self.endpoints[1].1 - self.endpoints[0].1;
        (dx * dx + dy * dy).sqrt()
    }
}

/// One pose candidate for an image: its detection score plus fitted limbs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSkeleton {
    pub score: f64,
    pub limbs: Vec<LimbSegment>,
}

/// How the evaluated detection is chosen among an image's candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchingPolicy {
    /// Highest detection score (the default protocol).
    BestScore,
    /// The candidate with the most correct limbs; rewards detectors that
    /// report many candidates.
    BestPcp,
}

/// True iff both predicted endpoints are within half the ground-truth length
/// of their corresponding ground-truth endpoints.
pub fn pcp_match(predicted: &LimbSegment, truth: &LimbSegment) -> Result<bool> {
    let len = truth.length();
    if len <= 0.0 {
        return Err(Error::ZeroLengthSegment);
    }
    let tol = 0.5 * len;
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    Ok(dist(predicted.endpoints[0], truth.endpoints[0]) <= tol
        && dist(predicted.endpoints[1], truth.endpoints[1]) <= tol)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartAccuracy {
    pub name: String,
    pub correct: usize,
    pub total: usize,
}

impl PartAccuracy {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Per-part and total PCP. `total_micro` averages over limb instances;
/// `total_macro` averages the per-part fractions. Both are reported since
/// published tables do not always say which they use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcpReport {
    pub parts: Vec<PartAccuracy>,
    pub total_micro: f64,
    pub total_macro: f64,
    pub images: usize,
    pub images_without_detection: usize,
}

impl PcpReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .parts
            .iter()
            .map(|p| p.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        out.push_str(&format!("{:<name_w$}  correct/total  accuracy\n", "part"));
        for p in &self.parts {
            out.push_str(&format!(
                "{:<name_w$}  {:>7}/{:<5}  {:.4}\n",
                p.name,
                p.correct,
                p.total,
                p.fraction()
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  micro {:.4}  macro {:.4}\n",
            "total", self.total_micro, self.total_macro
        ));
        out
    }
}

/// Score predictions against ground truth, image by image.
///
/// `predictions[i]` holds the candidate skeletons for image i (possibly
/// empty: all its limbs count as misses); `ground_truth[i]` holds the true
/// limb segments. Limbs are grouped by name across images.
pub fn evaluate(
    predictions: &[Vec<ScoredSkeleton>],
    ground_truth: &[Vec<LimbSegment>],
    matching: MatchingPolicy,
) -> Result<PcpReport> {
    assert_eq!(
        predictions.len(),
        ground_truth.len(),
        "predictions and ground truth must cover the same images"
    );
    // BTreeMap keeps the per-part table deterministic.
    let mut table: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct_total = 0usize;
    let mut instance_total = 0usize;
    let mut no_detection = 0usize;

    for (candidates, truths) in predictions.iter().zip(ground_truth) {
        let matches_for = |skel: &ScoredSkeleton| -> Result<Vec<bool>> {
            truths
                .iter()
                .map(|truth| {
                    match skel.limbs.iter().find(|l| l.name == truth.name) {
                        Some(pred) => pcp_match(pred, truth),
                        None => Ok(false),
                    }
                })
                .collect()
        };

        let best: Option<Vec<bool>> = match matching {
            MatchingPolicy::BestScore => {
                let best = candidates.iter().max_by(|a, b| {
                    a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal)
                });
                best.map(|s| matches_for(s)).transpose()?
            }
            MatchingPolicy::BestPcp => {
                let mut best: Option<(usize, f64, Vec<bool>)> = None;
                for s in candidates {
                    let m = matches_for(s)?;
                    let n = m.iter().filter(|&&b| b).count();
                    let better = match &best {
                        None => true,
                        Some((bn, bs, _)) => n > *bn || (n == *bn && s.score > *bs),
                    };
                    if better {
                        best = Some((n, s.score, m));
                    }
                }
                best.map(|(_, _, m)| m)
            }
        };
        if best.is_none() {
            no_detection += 1;
        }

        for (k, truth) in truths.iter().enumerate() {
            let hit = best.as_ref().map(|m| m[k]).unwrap_or(false);
            let entry = table.entry(truth.name.clone()).or_insert((0, 0));
            entry.1 += 1;
            if hit {
                entry.0 += 1;
            }
            instance_total += 1;
            if hit {
                correct_total += 1;
            }
        }
    }

    let parts: Vec<PartAccuracy> = table
        .into_iter()
        .map(|(name, (correct, total))| PartAccuracy {
            name,
            correct,
            total,
        })
        .collect();
    let total_micro = if instance_total == 0 {
        0.0
    } else {
        correct_total as f64 / instance_total as f64
    };
    let total_macro = if parts.is_empty() {
        0.0
    } else {
        parts.iter().map(|p| p.fraction()).sum::<f64>() / parts.len() as f64
    };
    Ok(PcpReport {
        parts,
        total_micro,
        total_macro,
        images: predictions.len(),
        images_without_detection: no_detection,
    })
}
