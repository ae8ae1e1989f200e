//! Adaptive pixel intensity (API) loss: per-pixel weights from multi-kernel
//! neighbourhood disagreement with the label, and the weighted BCE, IoU and
//! L1 terms built on them. Every loss returns its gradient with respect to
//! the predicted probabilities.

use crate::error::{param_err, Error, Result};
use crate::grid::{box_mean, Grid2D};

/// Default aggregation windows.
pub const DEFAULT_KERNELS: [usize; 3] = [3, 15, 31];
/// Default override weight λ.
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Probability floor applied before the logarithms of the BCE term.
pub const PROB_EPS: f64 = 1e-7;
/// Guard added to the L1 denominator, which vanishes for all-background labels.
pub const L1_EPS: f64 = 1e-8;
/// How far outside `[0, 1]` a prediction may stray before it is rejected.
pub const RANGE_SLACK: f64 = 1e-3;
/// Threshold used to binarise 8-bit masks.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Per-pixel weights ω and the settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityMap {
    pub omega: Grid2D,
    pub kernels: Vec<usize>,
    pub lambda: f64,
}

/// A scalar loss value with its gradient with respect to `ŷ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Grid2D,
}

/// The three API components, their sum and the summed gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub abce: f64,
    pub aiou: f64,
    pub al1: f64,
    pub total: f64,
    pub grad: Grid2D,
}

/// Maps values `>= threshold` to 1 and the rest to 0.
pub fn binarize(g: &Grid2D, threshold: f64) -> Grid2D {
    g.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

pub fn is_binary(g: &Grid2D) -> bool {
    g.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

fn require_binary(y: &Grid2D, what: &str) -> Result<()> {
    if let Some(v) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!(
            "{what} must be binary (found {v}); binarize the mask first, e.g. at {BINARIZE_THRESHOLD}"
        )));
    }
    Ok(())
}

/// `ω = (1−λ) · Σ_k |box_mean_k(y) − y| · y`.
pub fn pixel_intensity(y: &Grid2D, kernels: &[usize], lambda: f64) -> Result<IntensityMap> {
    require_binary(y, "label")?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(param_err(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if kernels.is_empty() {
        return Err(param_err("at least one kernel size is required"));
    }
    let mut acc = vec![0.0; y.len()];
    for &k in kernels {
        let m = box_mean(y, k)?;
        for ((a, &mean), &label) in acc.iter_mut().zip(m.data()).zip(y.data()) {
            *a += (mean - label).abs() * label;
        }
    }
    let omega = Grid2D::new(y.height(), y.width(), acc.into_iter().map(|v| (1.0 - lambda) * v).collect())?;
    Ok(IntensityMap { omega, kernels: kernels.to_vec(), lambda })
}

/// Checks dims and ranges, returning `ŷ` clipped into `[0, 1]`.
fn prepare(y: &Grid2D, yhat: &Grid2D, omega: &IntensityMap) -> Result<Grid2D> {
    y.require_same_dims(yhat)?;
    y.require_same_dims(&omega.omega)?;
    if let Some(v) = y.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidInput(format!("label value {v} outside [0, 1]")));
    }
    if let Some(v) = yhat
        .data()
        .iter()
        .find(|&&v| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v))
    {
        return Err(Error::InvalidInput(format!(
            "prediction {v} is not a probability; apply a sigmoid first"
        )));
    }
    Ok(yhat.map(|v| v.clamp(0.0, 1.0)))
}

/// Adaptive BCE: `Σ(1+ω)·BCE / Σ(1.5+ω)`, with `ŷ` floored at
/// [`PROB_EPS`] inside the logarithms.
pub fn abce(y: &Grid2D, yhat: &Grid2D, omega: &IntensityMap) -> Result<LossValue> {
    let p = prepare(y, yhat, omega)?;
    let w = omega.omega.data();
    let denom: f64 = w.iter().map(|&o| 1.5 + o).sum();
    let mut num = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for ((&t, &raw), &o) in y.data().iter().zip(p.data()).zip(w) {
        let q = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        num += (1.0 + o) * -(t * q.ln() + (1.0 - t) * (1.0 - q).ln());
        let g = if raw == q {
            (1.0 + o) * (q - t) / (q * (1.0 - q)) / denom
        } else {
            0.0
        };
        grad.push(g);
    }
    Ok(LossValue {
        value: num / denom,
        grad: Grid2D::new(y.height(), y.width(), grad)?,
    })
}

/// Adaptive IoU: `1 − Σ yŷ(1+ω) / Σ (y+ŷ−yŷ)(1+ω)`.
///
/// When both label and prediction are empty the union vanishes; the loss
/// is defined as 0 with a zero gradient there.
pub fn aiou(y: &Grid2D, yhat: &Grid2D, omega: &IntensityMap) -> Result<LossValue> {
    let p = prepare(y, yhat, omega)?;
    let w = omega.omega.data();
    let (mut inter, mut union) = (0.0, 0.0);
    for ((&t, &q), &o) in y.data().iter().zip(p.data()).zip(w) {
        inter += t * q * (1.0 + o);
        union += (t + q - t * q) * (1.0 + o);
    }
    if union == 0.0 {
        return Ok(LossValue { value: 0.0, grad: Grid2D::zeros(y.height(), y.width()) });
    }
    let grad = y
        .data()
        .iter()
        .zip(w)
        .map(|(&t, &o)| {
            let wt = 1.0 + o;
            -(t * wt * union - inter * (1.0 - t) * wt) / (union * union)
        })
        .collect();
    Ok(LossValue {
        value: 1.0 - inter / union,
        grad: Grid2D::new(y.height(), y.width(), grad)?,
    })
}

/// Adaptive L1: `Σ|y−ŷ|(1+ω) / (H·W·Σω + ε)`.
///
/// For labels without foreground `Σω = 0` and only the [`L1_EPS`] guard
/// remains in the denominator, so the value is huge but finite.
pub fn al1(y: &Grid2D, yhat: &Grid2D, omega: &IntensityMap) -> Result<LossValue> {
    let p = prepare(y, yhat, omega)?;
    let w = omega.omega.data();
    let denom = y.len() as f64 * omega.omega.sum() + L1_EPS;
    let mut num = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for ((&t, &q), &o) in y.data().iter().zip(p.data()).zip(w) {
        let diff = q - t;
        num += diff.abs() * (1.0 + o);
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.push(sign * (1.0 + o) / denom);
    }
    Ok(LossValue {
        value: num / denom,
        grad: Grid2D::new(y.height(), y.width(), grad)?,
    })
}

/// Sum of the three components for a precomputed intensity map.
pub fn api_loss_with(y: &Grid2D, yhat: &Grid2D, omega: &IntensityMap) -> Result<LossReport> {
    let b = abce(y, yhat, omega)?;
    let i = aiou(y, yhat, omega)?;
    let l = al1(y, yhat, omega)?;
    let grad = b.grad.zip_map(&i.grad, |a, c| a + c)?.zip_map(&l.grad, |a, c| a + c)?;
    Ok(LossReport {
        abce: b.value,
        aiou: i.value,
        al1: l.value,
        total: b.value + i.value + l.value,
        grad,
    })
}

pub fn api_loss(y: &Grid2D, yhat: &Grid2D, kernels: &[usize], lambda: f64) -> Result<LossReport> {
    let omega = pixel_intensity(y, kernels, lambda)?;
    api_loss_with(y, yhat, &omega)
}

/// Deep-supervision objective: one API term per supervision map against
/// the ground truth plus one for the edge prediction against the edge label.
pub fn total_loss_with(
    gt: &Grid2D,
    ds_maps: &[Grid2D],
    edge_gt: &Grid2D,
    edge_pred: &Grid2D,
    kernels: &[usize],
    lambda: f64,
) -> Result<f64> {
    if ds_maps.is_empty() {
        return Err(param_err("no supervision maps"));
    }
    let omega = pixel_intensity(gt, kernels, lambda)?;
    let mut total = 0.0;
    for ds in ds_maps {
        total += api_loss_with(gt, ds, &omega)?.total;
    }
    Ok(total + api_loss(edge_gt, edge_pred, kernels, lambda)?.total)
}

/// [`total_loss_with`] over the four maps `DS_0, DS_1, DS_2, DS_e` with the
/// default kernels and λ.
pub fn total_loss(gt: &Grid2D, ds_maps: &[Grid2D; 4], edge_gt: &Grid2D, edge_pred: &Grid2D) -> Result<f64> {
    total_loss_with(gt, ds_maps, edge_gt, edge_pred, &DEFAULT_KERNELS, DEFAULT_LAMBDA)
}

/// Foreground pixels with at least one 4-neighbour in the background.
pub fn boundary_mask(y: &Grid2D) -> Grid2D {
    let (h, w) = y.dims();
    Grid2D::from_fn(h, w, |i, j| {
        if y.get(i, j) < 0.5 {
            return 0.0;
        }
        let bg = |a: usize, b: usize| y.get(a, b) < 0.5;
        let touches = (i > 0 && bg(i - 1, j))
            || (i + 1 < h && bg(i + 1, j))
            || (j > 0 && bg(i, j - 1))
            || (j + 1 < w && bg(i, j + 1));
        if touches {
            1.0
        } else {
            0.0
        }
    })
}
