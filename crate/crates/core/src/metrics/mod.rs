//! Segmentation quality measures and report aggregation.
//!
//! All measures take a prediction map in `[0, 1]` and a binary ground
//! truth of the same `height x width`. Jaccard and Dice binarize the
//! prediction at 0.5. When both maps are empty every measure is 1.

mod edt;
mod report;

pub use edt::{edt_with_indices, Edt};
pub use report::{aggregate, class_scores, EvalMode, FrameRecord, MetricsReport, Scores, VideoRow, METRIC_COLUMNS};

use crate::error::{ensure, Result};

const EPS: f64 = f64::EPSILON;

#[derive(Clone, Copy, Debug)]
pub struct MaskPair<'a> {
    pred: &'a [f64],
    gt: &'a [bool],
    height: usize,
    width: usize,
}

impl<'a> MaskPair<'a> {
    pub fn new(pred: &'a [f64], gt: &'a [bool], height: usize, width: usize) -> Result<Self> {
        ensure!(
            pred.len() == height * width && gt.len() == height * width,
            Contract,
            "prediction ({}) and ground truth ({}) do not both have {height}x{width} pixels",
            pred.len(),
            gt.len()
        );
        ensure!(height > 0 && width > 0, Contract, "empty mask");
        ensure!(
            pred.iter().all(|v| (0.0..=1.0).contains(v)),
            Contract,
            "prediction values must lie in [0, 1]"
        );
        Ok(Self { pred, gt, height, width })
    }

    pub fn pred(&self) -> &[f64] {
        self.pred
    }

    pub fn gt(&self) -> &[bool] {
        self.gt
    }

    fn both_empty(&self) -> bool {
        !self.gt.iter().any(|&g| g) && self.pred.iter().all(|&p| p == 0.0)
    }
}

fn counts(pair: &MaskPair) -> (usize, usize, usize) {
    let (mut inter, mut a, mut b) = (0, 0, 0);
    for (&p, &g) in pair.pred.iter().zip(pair.gt) {
        let p = p >= 0.5;
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    (inter, a, b)
}

/// `|A ∩ B| / |A ∪ B|`.
pub fn jaccard(pair: &MaskPair) -> f64 {
    let (i, a, b) = counts(pair);
    if a + b == 0 {
        return 1.0;
    }
    i as f64 / (a + b - i) as f64
}

/// `2 |A ∩ B| / (|A| + |B|)`.
pub fn dice(pair: &MaskPair) -> f64 {
    let (i, a, b) = counts(pair);
    if a + b == 0 {
        return 1.0;
    }
    2.0 * i as f64 / (a + b) as f64
}

/// Structure measure with object/region balance `alpha`.
pub fn s_measure(pair: &MaskPair, alpha: f64) -> f64 {
    let n = pair.gt.len() as f64;
    let y = pair.gt.iter().filter(|&&g| g).count() as f64 / n;
    let mean_pred = pair.pred.iter().sum::<f64>() / n;
    if y == 0.0 {
        return 1.0 - mean_pred;
    }
    if y == 1.0 {
        return mean_pred;
    }
    let s = alpha * object_score(pair, y) + (1.0 - alpha) * region_score(pair);
    s.clamp(0.0, 1.0)
}

fn object_score(pair: &MaskPair, u: f64) -> f64 {
    let fg: Vec<f64> = pair.pred.iter().zip(pair.gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pair.pred.iter().zip(pair.gt).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p).collect();
    u * s_object(&fg) + (1.0 - u) * s_object(&bg)
}

fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// Foreground centroid as 1-based `(x, y)` split coordinates, rounding
/// half to even; the image centre when the mask is empty.
fn centroid(pair: &MaskPair) -> (usize, usize) {
    let (h, w) = (pair.height, pair.width);
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for (i, &g) in pair.gt.iter().enumerate() {
        if g {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize,
            (h as f64 / 2.0).round_ties_even() as usize,
        );
    }
    let x = (sx / n as f64).round_ties_even() as usize + 1;
    let y = (sy / n as f64).round_ties_even() as usize + 1;
    (x, y)
}

fn region_score(pair: &MaskPair) -> f64 {
    let (h, w) = (pair.height, pair.width);
    let (x, y) = centroid(pair);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let quads = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let weights = [w1, w2, w3, 1.0 - w1 - w2 - w3];
    quads
        .iter()
        .zip(weights)
        .map(|(&(y0, y1, x0, x1), wt)| {
            if y1 <= y0 || x1 <= x0 {
                return 0.0;
            }
            let mut p = Vec::with_capacity((y1 - y0) * (x1 - x0));
            let mut g = Vec::with_capacity(p.capacity());
            for yy in y0..y1 {
                for xx in x0..x1 {
                    p.push(pair.pred[yy * w + xx]);
                    g.push(pair.gt[yy * w + xx] as u8 as f64);
                }
            }
            wt * ssim(&p, &g)
        })
        .sum()
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let denom = if pred.len() > 1 { n - 1.0 } else { 1.0 };
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        sx += (p - x).powi(2);
        sy += (g - y).powi(2);
        sxy += (p - x) * (g - y);
    }
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx + sy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 7x7 Gaussian with sigma 5, normalized to unit sum.
fn gaussian_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
            sum += *v;
        }
    }
    k.iter_mut().flatten().for_each(|v| *v /= sum);
    k
}

/// Weighted F-measure with error dependency and location weighting.
pub fn weighted_f(pair: &MaskPair, beta2: f64) -> f64 {
    let (h, w) = (pair.height, pair.width);
    let any_gt = pair.gt.iter().any(|&g| g);
    if !any_gt {
        return if pair.both_empty() { 1.0 } else { 0.0 };
    }
    let edt = edt_with_indices(pair.gt, h, w);
    let gtf = |i: usize| pair.gt[i] as u8 as f64;
    let e: Vec<f64> = (0..h * w).map(|i| (pair.pred[i] - gtf(i)).abs()).collect();
    let et: Vec<f64> = (0..h * w)
        .map(|i| if pair.gt[i] { e[i] } else { e[edt.nearest[i]] })
        .collect();
    let k = gaussian_kernel();
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                let yy = y as isize + dy as isize - 3;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for (dx, &kv) in row.iter().enumerate() {
                    let xx = x as isize + dx as isize - 3;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += kv * et[yy as usize * w + xx as usize];
                }
            }
            ea[y * w + x] = acc;
        }
    }
    let (mut tpw, mut fpw, mut ew_fg, mut n_fg) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h * w {
        let min_e = if pair.gt[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        if pair.gt[i] {
            ew_fg += min_e;
            n_fg += 1.0;
        } else {
            let b = 2.0 - ((0.5f64).ln() / 5.0 * edt.distance[i]).exp();
            fpw += min_e * b;
        }
    }
    tpw += n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let p = tpw / (tpw + fpw + EPS);
    let q = (1.0 + beta2) * r * p / (r + beta2 * p + EPS);
    q.clamp(0.0, 1.0)
}

/// Enhanced-alignment measure of a (possibly continuous) map.
pub fn e_measure(pair: &MaskPair) -> f64 {
    let n = pair.gt.len() as f64;
    let fg = pair.gt.iter().filter(|&&g| g).count();
    if fg == 0 {
        return pair.pred.iter().map(|p| 1.0 - p).sum::<f64>() / n;
    }
    if fg == pair.gt.len() {
        return pair.pred.iter().sum::<f64>() / n;
    }
    let mp = pair.pred.iter().sum::<f64>() / n;
    let mg = fg as f64 / n;
    pair.pred
        .iter()
        .zip(pair.gt)
        .map(|(&p, &g)| {
            let (a, b) = (p - mp, g as u8 as f64 - mg);
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            (align + 1.0).powi(2) / 4.0
        })
        .sum::<f64>()
        / n
}

/// Mean of [`e_measure`] over the binarizations `pred > j / 256`, `j = 0..256`.
pub fn e_measure_mean(pair: &MaskPair) -> f64 {
    let n = pair.gt.len();
    let nf = n as f64;
    let fg = pair.gt.iter().filter(|&&g| g).count();
    // sorted predictions per ground-truth class give counts above each threshold
    let mut fg_p: Vec<f64> = pair.pred.iter().zip(pair.gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let mut bg_p: Vec<f64> = pair.pred.iter().zip(pair.gt).filter(|(_, &g)| !g).map(|(&p, _)| p).collect();
    fg_p.sort_by(f64::total_cmp);
    bg_p.sort_by(f64::total_cmp);
    let above = |v: &[f64], t: f64| v.len() - v.partition_point(|&p| p <= t);
    let mut total = 0.0;
    for j in 0..256 {
        let t = j as f64 / 256.0;
        let tp = above(&fg_p, t) as f64;
        let fp = above(&bg_p, t) as f64;
        let score = if fg == 0 {
            (nf - fp) / nf
        } else if fg == n {
            tp / nf
        } else {
            let mp = (tp + fp) / nf;
            let mg = fg as f64 / nf;
            let fgf = fg as f64;
            // (gt, pred) combinations: counts and centred values
            let parts = [
                (tp, 1.0 - mg, 1.0 - mp),
                (fgf - tp, 1.0 - mg, -mp),
                (fp, -mg, 1.0 - mp),
                (nf - fgf - fp, -mg, -mp),
            ];
            parts
                .iter()
                .map(|&(count, b, a)| {
                    let align = 2.0 * a * b / (a * a + b * b + EPS);
                    count * (align + 1.0).powi(2) / 4.0
                })
                .sum::<f64>()
                / nf
        };
        total += score;
    }
    total / 256.0
}

#[cfg(test)]
mod tests;
