//! Appearance filter responses and the quadratic deformation machinery,
//! including the generalized distance transform used in message passing.
//!
//! Everything is formulated as maximization: deformation scores are concave
//! in displacement, and the transform computes the upper envelope of
//! equal-curvature parabolas in two separable 1-D passes.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::features::HogMap;

/// Quadratic deformation weights must stay at or below -CONCAVITY_EPS.
pub const CONCAVITY_EPS: f64 = 1e-2;

/// Sentinel argmax for cells with no valid child placement.
pub const NO_ARGMAX: (u32, u32) = (u32::MAX, u32::MAX);

/// Score per placement at one pyramid level. `data[(y, x)]`; negative
/// infinity marks placements that are invalid (e.g. filter support leaving
/// the feature map).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub level: usize,
    pub data: Array2<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, level: usize) -> Self {
        Self {
            width,
            height,
            level,
            data: Array2::zeros((height, width)),
        }
    }

    pub fn from_array(data: Array2<f64>, level: usize) -> Self {
        let (height, width) = data.dim();
        Self {
            width,
            height,
            level,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[(y, x)]
    }
}

/// Per-edge, per-type-pair spring: weights over [dx, dy, dx^2, dy^2] and the
/// integer anchor subtracted from the raw child-minus-parent displacement.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeformationParams {
    pub w: [f64; 4],
    pub anchor: (i32, i32),
}

impl Default for DeformationParams {
    fn default() -> Self {
        Self {
            w: [0.0, 0.0, -CONCAVITY_EPS, -CONCAVITY_EPS],
            anchor: (0, 0),
        }
    }
}

impl DeformationParams {
    pub fn new(w: [f64; 4], anchor: (i32, i32)) -> Result<Self> {
        if w[2] > -CONCAVITY_EPS || w[3] > -CONCAVITY_EPS {
            return Err(Error::ConcavityViolation(w[2], w[3]));
        }
        Ok(Self { w, anchor })
    }

    pub fn is_concave(&self) -> bool {
        self.w[2] <= -CONCAVITY_EPS && self.w[3] <= -CONCAVITY_EPS
    }
}

/// Deformation score for a raw displacement (child minus parent), in cells.
pub fn deformation_score(params: &DeformationParams, displacement: (i32, i32)) -> f64 {
    let dx = (displacement.0 - params.anchor.0) as f64;
    let dy = (displacement.1 - params.anchor.1) as f64;
    params.w[0] * dx + params.w[1] * dy + params.w[2] * dx * dx + params.w[3] * dy * dy
}

/// Result of a distance transform: per parent cell, the best
/// child-score-plus-deformation value and the child cell achieving it.
#[derive(Debug, Clone)]
pub struct DtResult {
    pub values: ScoreMap,
    pub argmax: Array2<(u32, u32)>,
}

/// 1-D max transform: out[c] = max_q f[q] + w_lin*(q-c-anchor) +
/// w_quad*(q-c-anchor)^2, with the argmax recorded in `arg`.
///
/// The linear term folds into the parabola vertex: each source q contributes
/// a parabola with curvature w_quad, vertex at q + w_lin/(2 w_quad), and
/// height f[q] - w_lin^2/(4 w_quad). Sources are visited in order, so
/// vertices are strictly increasing and the standard lower-envelope sweep
/// applies.
fn dt_1d(
    f: &[f64],
    w_lin: f64,
    w_quad: f64,
    anchor: i32,
    out: &mut [f64],
    arg: &mut [u32],
) {
    debug_assert!(w_quad < 0.0);
    let shift = w_lin / (2.0 * w_quad);
    let offset = -w_lin * w_lin / (4.0 * w_quad);

    // Envelope of sources with finite score.
    let mut v: Vec<usize> = Vec::with_capacity(f.len());
    let mut z: Vec<f64> = Vec::with_capacity(f.len() + 1);
    for (q, &fq) in f.iter().enumerate() {
        if fq == f64::NEG_INFINITY {
            continue;
        }
        let vq = q as f64 + shift;
        let hq = fq + offset;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let vp = p as f64 + shift;
                    let hp = f[p] + offset;
                    // Intersection of the parabolas rooted at p and q.
                    let s = ((hq - hp) / (w_quad * (vq - vp)) + vp + vq) / 2.0;
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }

    if v.is_empty() {
        out.fill(f64::NEG_INFINITY);
        arg.fill(u32::MAX);
        return;
    }

    let mut k = 0usize;
    for (c, slot) in out.iter_mut().enumerate() {
        let p = c as f64 + anchor as f64;
        while k + 1 < v.len() && z[k + 1] < p {
            k += 1;
        }
        let q = v[k];
        let d = p - (q as f64 + shift);
        *slot = f[q] + offset + w_quad * d * d;
        arg[c] = q as u32;
    }
}

/// Max-plus distance transform of child placement scores under a concave
/// quadratic deformation, evaluated on a parent grid of `out_width` x
/// `out_height` cells. Runs in O(W*H + out_W*out_H).
pub fn distance_transform(
    child: &ScoreMap,
    params: &DeformationParams,
    out_width: usize,
    out_height: usize,
) -> Result<DtResult> {
    if !params.is_concave() {
        return Err(Error::ConcavityViolation(params.w[2], params.w[3]));
    }
    let (wc, hc) = (child.width, child.height);
    assert!(wc > 0 && hc > 0 && out_width > 0 && out_height > 0);

    // Pass 1: transform along x for every child row.
    let mut mid = Array2::<f64>::zeros((hc, out_width));
    let mut mid_arg = Array2::<u32>::zeros((hc, out_width));
    let mut row_buf = vec![0.0f64; wc];
    for qy in 0..hc {
        for qx in 0..wc {
            row_buf[qx] = child.data[(qy, qx)];
        }
        let (mut out_row, mut arg_row) = (vec![0.0f64; out_width], vec![0u32; out_width]);
        dt_1d(
            &row_buf,
            params.w[0],
            params.w[2],
            params.anchor.0,
            &mut out_row,
            &mut arg_row,
        );
        for cx in 0..out_width {
            mid[(qy, cx)] = out_row[cx];
            mid_arg[(qy, cx)] = arg_row[cx];
        }
    }

    // Pass 2: transform along y for every output column.
    let mut values = Array2::<f64>::zeros((out_height, out_width));
    let mut argmax = Array2::<(u32, u32)>::from_elem((out_height, out_width), NO_ARGMAX);
    let mut col_buf = vec![0.0f64; hc];
    let (mut out_col, mut arg_col) = (vec![0.0f64; out_height], vec![0u32; out_height]);
    for cx in 0..out_width {
        for qy in 0..hc {
            col_buf[qy] = mid[(qy, cx)];
        }
        dt_1d(
            &col_buf,
            params.w[1],
            params.w[3],
            params.anchor.1,
            &mut out_col,
            &mut arg_col,
        );
        for cy in 0..out_height {
            values[(cy, cx)] = out_col[cy];
            if arg_col[cy] != u32::MAX {
                let qy = arg_col[cy] as usize;
                argmax[(cy, cx)] = (mid_arg[(qy, cx)], arg_col[cy]);
            }
        }
    }

    Ok(DtResult {
        values: ScoreMap::from_array(values, child.level),
        argmax,
    })
}

/// Valid cross-correlation of a HOG filter against a feature map. The score
/// at (x, y) sums filter * features over the filter support anchored at that
/// cell; output is (cells_x - fw + 1) x (cells_y - fh + 1).
pub fn filter_response(features: &HogMap, filter: &Array3<f64>) -> Result<ScoreMap> {
    let (fh, fw, ch) = filter.dim();
    let (my, mx, mch) = features.data.dim();
    if fw > mx || fh > my {
        return Err(Error::FilterTooLarge {
            fw,
            fh,
            mw: mx,
            mh: my,
        });
    }
    assert_eq!(ch, mch, "filter channel count must match features");
    let out_w = mx - fw + 1;
    let out_h = my - fh + 1;
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    let fdat = filter.as_slice().expect("filter is contiguous");
    let mdat = features.data.as_slice().expect("feature map is contiguous");
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for dy in 0..fh {
                let frow = &fdat[dy * fw * ch..(dy * fw + fw) * ch];
                let mbase = ((y + dy) * mx + x) * ch;
                let mrow = &mdat[mbase..mbase + fw * ch];
                for i in 0..fw * ch {
                    acc += frow[i] * mrow[i];
                }
            }
            out[(y, x)] = acc;
        }
    }
    Ok(ScoreMap::from_array(out, 0))
}

/// Render a score map as an 8-bit PGM heat image (min..max stretched to
/// 0..255); used by the CLI debug dump.
pub fn score_map_to_pgm(map: &ScoreMap) -> Vec<u8> {
    let finite: Vec<f64> = map.data.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.data[(y, x)];
            let b = if v.is_finite() {
                (255.0 * (v - lo) / span).round() as u8
            } else {
                0
            };
            out.push(b);
        }
    }
    out
}
