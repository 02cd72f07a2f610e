//! Training losses and evaluation metrics.
//!
//! Training optimizes a relative-error term plus a spectral-difference term
//! that matches the band-to-band contrast structure of the target:
//! `total = mrae + gamma * dif`. Evaluation reports mean relative absolute
//! error, root-mean-square error, and peak signal-to-noise ratio on
//! `[0, 1]`-clamped predictions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the reference magnitude in relative errors, so empty bands do not
/// blow the loss up.
pub const MRAE_FLOOR: f64 = 1e-6;

/// PSNR values are capped here once the mean squared error underflows
/// `1e-10`.
pub const PSNR_CAP: f64 = 100.0;

/// How the spectral-difference term is averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DifNormalization {
    /// Divide by bands * height * width (a per-pixel average).
    #[default]
    PixelMean,
    /// Divide by bands only (pixels are summed, not averaged).
    PixelSum,
}

fn check_same_shape(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    if pred.shape().len() != 3 {
        return Err(Error::invalid(op, format!("expected [H, W, B], got {:?}", pred.shape())));
    }
    Ok(())
}

/// Mean relative absolute error: `mean(|gt - pred| / max(gt, 1e-6))`.
/// The reference weights are precomputed from `gt`, which is treated as a
/// constant; only `pred` carries gradients.
pub fn mrae_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same_shape("mrae", pred, gt)?;
    let recip: Vec<f64> = gt.data().iter().map(|&g| 1.0 / g.max(MRAE_FLOOR)).collect();
    let weights = Tensor::from_vec(recip, gt.shape())?;
    gt.detached().sub(pred)?.abs()?.mul(&weights)?.mean_all()
}

/// Spectral-difference loss: for every ordered band pair (i, j), the
/// absolute gap between the target's band contrast `|gt_i - gt_j|` and the
/// prediction's `|pred_i - pred_j|`, summed over pixels and pairs.
///
/// The ordered-pair sum is computed as twice the unordered-pair sum, which is
/// exact because `|a - b| = |b - a|` holds bitwise in IEEE arithmetic.
pub fn spectral_difference_loss(
    pred: &Tensor,
    gt: &Tensor,
    normalization: DifNormalization,
) -> Result<Tensor> {
    check_same_shape("dif", pred, gt)?;
    let bands = pred.shape()[2];
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let mut acc: Option<Tensor> = None;
    let gtd = gt.data();
    for i in 0..bands {
        let pi = pred.slice(2, i, 1)?;
        for j in (i + 1)..bands {
            let pj = pred.slice(2, j, 1)?;
            // Target contrast is a constant with respect to the prediction.
            let gap: Vec<f64> = (0..h * w)
                .map(|pix| (gtd[pix * bands + i] - gtd[pix * bands + j]).abs())
                .collect();
            let gap = Tensor::from_vec(gap, &[h, w, 1])?;
            let term = gap.sub(&pi.sub(&pj)?.abs()?)?.abs()?.sum_all()?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
    }
    let total = match acc {
        Some(a) => a,
        None => Tensor::scalar(0.0), // single band: no pairs
    };
    let denom = match normalization {
        DifNormalization::PixelMean => (bands * h * w) as f64,
        DifNormalization::PixelSum => bands as f64,
    };
    total.affine(2.0 / denom, 0.0)
}

/// Combined training objective. Returns the differentiable total together
/// with the two component values for logging.
pub fn total_loss(
    pred: &Tensor,
    gt: &Tensor,
    gamma: f64,
    normalization: DifNormalization,
) -> Result<(Tensor, f64, f64)> {
    let mrae = mrae_loss(pred, gt)?;
    let dif = spectral_difference_loss(pred, gt, normalization)?;
    let mrae_val = mrae.item()?;
    let dif_val = dif.item()?;
    let total = mrae.add(&dif.affine(gamma, 0.0)?)?;
    Ok((total, mrae_val, dif_val))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub mrae: f64,
    pub rmse: f64,
    pub psnr: f64,
}

/// Evaluation metrics on plain buffers. Predictions are clamped to `[0, 1]`
/// first; PSNR assumes a unit peak and is capped at 100 dB when the mean
/// squared error drops below 1e-10.
pub fn eval_metrics(pred: &[f64], gt: &[f64]) -> Result<EvalMetrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(
            "eval",
            format!("buffer lengths differ or are empty: {} vs {}", pred.len(), gt.len()),
        ));
    }
    let n = pred.len() as f64;
    let mut abs_rel = 0.0;
    let mut sq = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        let pc = p.clamp(0.0, 1.0);
        let d = g - pc;
        abs_rel += d.abs() / g.max(MRAE_FLOOR);
        sq += d * d;
    }
    let mse = sq / n;
    let psnr = if mse < 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    };
    Ok(EvalMetrics {
        mrae: abs_rel / n,
        rmse: mse.sqrt(),
        psnr,
    })
}
