//! Salient object detection metrics: MAE, the F-measure threshold sweep
//! (MaxF, MeanF) and the structure measure S_m.

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::loss::is_binary;

/// β² of the F-measure.
pub const BETA2: f64 = 0.3;
/// Number of binarisation thresholds `t = i/255`, `i = 0..=255`.
pub const THRESHOLDS: usize = 256;
/// Weight of the object-aware term in S_m.
pub const S_ALPHA: f64 = 0.5;

fn require_probability(pred: &Grid2D) -> Result<()> {
    if let Some(v) = pred.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidInput(format!("prediction value {v} outside [0, 1]")));
    }
    Ok(())
}

fn require_binary_gt(gt: &Grid2D) -> Result<()> {
    if !is_binary(gt) {
        return Err(Error::InvalidInput("ground truth must be binary".into()));
    }
    Ok(())
}

/// Mean absolute pixel difference.
pub fn mae(gt: &Grid2D, pred: &Grid2D) -> Result<f64> {
    gt.require_same_dims(pred)?;
    Ok(gt.data().iter().zip(pred.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / gt.len() as f64)
}

/// Confusion counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Precision, recall and Fβ. An empty prediction against an empty
    /// label scores 1; any other zero denominator scores 0.
    pub fn scores(&self, beta2: f64) -> (f64, f64, f64) {
        let predicted = self.tp + self.fp;
        let actual = self.tp + self.fn_;
        if predicted == 0 && actual == 0 {
            return (1.0, 1.0, 1.0);
        }
        let p = if predicted == 0 { 0.0 } else { self.tp as f64 / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { self.tp as f64 / actual as f64 };
        let f = if p + r == 0.0 { 0.0 } else { (1.0 + beta2) * p * r / (beta2 * p + r) };
        (p, r, f)
    }
}

#[inline]
pub fn threshold(i: usize) -> f64 {
    i as f64 / 255.0
}

/// Number of thresholds strictly below `p`, so `p > t_i` exactly for `i < k`.
fn thresholds_below(p: f64) -> usize {
    let mut k = ((p * 255.0).ceil().max(0.0) as usize).min(THRESHOLDS);
    while k > 0 && p <= threshold(k - 1) {
        k -= 1;
    }
    while k < THRESHOLDS && p > threshold(k) {
        k += 1;
    }
    k
}

/// Confusion counts for every threshold, binarising with `pred > t`.
pub fn confusion_curve(gt: &Grid2D, pred: &Grid2D) -> Result<Vec<Confusion>> {
    gt.require_same_dims(pred)?;
    require_binary_gt(gt)?;
    require_probability(pred)?;
    // hist[k]: pixels positive for exactly the thresholds 0..k
    let mut fg_hist = [0u64; THRESHOLDS + 1];
    let mut bg_hist = [0u64; THRESHOLDS + 1];
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        let k = thresholds_below(p);
        if g == 1.0 {
            fg_hist[k] += 1;
        } else {
            bg_hist[k] += 1;
        }
    }
    let total_fg: u64 = fg_hist.iter().sum();
    let mut curve = vec![Confusion::default(); THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for i in (0..THRESHOLDS).rev() {
        tp += fg_hist[i + 1];
        fp += bg_hist[i + 1];
        curve[i] = Confusion { tp, fp, fn_: total_fg - tp };
    }
    Ok(curve)
}

/// One point of the precision/recall sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FMeasure {
    pub max_f: f64,
    pub mean_f: f64,
    pub curve: Vec<CurvePoint>,
}

/// Fβ over the 256-threshold sweep; MaxF is its maximum, MeanF its mean.
pub fn f_measure_curve(gt: &Grid2D, pred: &Grid2D, beta2: f64) -> Result<FMeasure> {
    let curve: Vec<CurvePoint> = confusion_curve(gt, pred)?
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (precision, recall, f) = c.scores(beta2);
            CurvePoint { threshold: threshold(i), precision, recall, f }
        })
        .collect();
    let max_f = curve.iter().map(|p| p.f).fold(0.0, f64::max);
    let mean_f = curve.iter().map(|p| p.f).sum::<f64>() / curve.len() as f64;
    Ok(FMeasure { max_f, mean_f, curve })
}

/// Fβ at the adaptive threshold `min(2·mean(pred), 1)`, binarising with
/// `pred >= t`.
pub fn adaptive_f_measure(gt: &Grid2D, pred: &Grid2D, beta2: f64) -> Result<f64> {
    gt.require_same_dims(pred)?;
    require_binary_gt(gt)?;
    require_probability(pred)?;
    let t = (2.0 * pred.mean()).min(1.0);
    let mut c = Confusion::default();
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        match (g == 1.0, p >= t) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c.scores(beta2).2)
}

// Structure measure, transcribed from the PySODMetrics implementation.

const S_EPS: f64 = f64::EPSILON;

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `2x̄ / (x̄² + 1 + σ_x)` over the pixels selected by `region`.
fn s_object(values: &[f64], region: &[bool]) -> f64 {
    let picked: Vec<f64> = values.iter().zip(region).filter(|(_, &r)| r).map(|(&v, _)| v).collect();
    if picked.is_empty() {
        return 0.0;
    }
    let (x, sigma) = mean_std(&picked);
    2.0 * x / (x * x + 1.0 + sigma + S_EPS)
}

/// Object-aware structural similarity S_o.
pub fn object_score(gt: &Grid2D, pred: &Grid2D) -> f64 {
    let fg: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(p, g)| p * g).collect();
    let bg: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(p, g)| (1.0 - p) * (1.0 - g)).collect();
    let is_fg: Vec<bool> = gt.data().iter().map(|&g| g == 1.0).collect();
    let is_bg: Vec<bool> = is_fg.iter().map(|f| !f).collect();
    let u = gt.mean();
    u * s_object(&fg, &is_fg) + (1.0 - u) * s_object(&bg, &is_bg)
}

/// Split point `(x, y)`: rounded foreground centroid plus one, so the
/// top-left quadrant is rows `< y`, columns `< x`.
fn centroid(gt: &Grid2D) -> (usize, usize) {
    let (h, w) = gt.dims();
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if gt.get(i, j) != 0.0 {
                sr += i as f64;
                sc += j as f64;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return ((w as f64 / 2.0).round_ties_even() as usize, (h as f64 / 2.0).round_ties_even() as usize);
    }
    ((sc / n).round_ties_even() as usize + 1, (sr / n).round_ties_even() as usize + 1)
}

/// SSIM-style similarity of two equally sized blocks.
fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let dof = (n - 1.0).max(1.0);
    let sx = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / dof;
    let sy = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / dof;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / dof;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + S_EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn block(g: &Grid2D, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    rows.flat_map(|i| cols.clone().map(move |j| (i, j))).map(|(i, j)| g.get(i, j)).collect()
}

/// Region-aware structural similarity S_r.
pub fn region_score(gt: &Grid2D, pred: &Grid2D) -> f64 {
    let (h, w) = gt.dims();
    let (x, y) = centroid(gt);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [(0..y, 0..x, w1), (0..y, x..w, w2), (y..h, 0..x, w3), (y..h, x..w, w4)];
    quads
        .into_iter()
        .map(|(r, c, wt)| {
            if wt == 0.0 {
                0.0
            } else {
                wt * block_ssim(&block(pred, r.clone(), c.clone()), &block(gt, r, c))
            }
        })
        .sum()
}

/// Structure measure `α·S_o + (1−α)·S_r`. An all-background label scores
/// `1 − mean(pred)`, an all-foreground label `mean(pred)`.
pub fn s_measure(gt: &Grid2D, pred: &Grid2D, alpha: f64) -> Result<f64> {
    gt.require_same_dims(pred)?;
    require_binary_gt(gt)?;
    require_probability(pred)?;
    let y = gt.mean();
    if y == 0.0 {
        return Ok(1.0 - pred.mean());
    }
    if y == 1.0 {
        return Ok(pred.mean());
    }
    let s = alpha * object_score(gt, pred) + (1.0 - alpha) * region_score(gt, pred);
    Ok(s.max(0.0))
}

/// The four metrics for one image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub max_f: f64,
    pub mean_f: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub threshold_curve: Vec<CurvePoint>,
}

pub fn evaluate(gt: &Grid2D, pred: &Grid2D) -> Result<MetricReport> {
    let f = f_measure_curve(gt, pred, BETA2)?;
    Ok(MetricReport {
        max_f: f.max_f,
        mean_f: f.mean_f,
        mae: mae(gt, pred)?,
        s_measure: s_measure(gt, pred, S_ALPHA)?,
        threshold_curve: f.curve,
    })
}
