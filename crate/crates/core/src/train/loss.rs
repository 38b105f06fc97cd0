//! Boundary-weighted IoU and BCE losses with deep supervision.

use serde::{Deserialize, Serialize};

use crate::maskio::Mask;
use crate::ndarr::{Graph, Scalar, Tensor, TensorResult, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the IoU term; BCE gets `1 - lambda`.
    pub lambda: f64,
    /// Weights of `S1, S2, S3`.
    pub alpha: [f64; 3],
    pub boundary_mu: f64,
    pub boundary_window: usize,
    pub prob_clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            alpha: [1.0 / 3.0; 3],
            boundary_mu: 5.0,
            boundary_window: 15,
            prob_clip: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("loss.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.alpha.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("loss.alpha must be non-negative, got {:?}", self.alpha)));
        }
        let s: f64 = self.alpha.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("loss.alpha must sum to 1, sums to {s}")));
        }
        if self.boundary_window % 2 == 0 {
            return Err(Error::Config(format!(
                "loss.boundary_window must be odd, got {}",
                self.boundary_window
            )));
        }
        if !(self.boundary_mu >= 0.0 && self.boundary_mu.is_finite()) {
            return Err(Error::Config(format!("loss.boundary_mu must be non-negative, got {}", self.boundary_mu)));
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return Err(Error::Config(format!("loss.prob_clip must lie in (0, 0.5), got {}", self.prob_clip)));
        }
        Ok(())
    }
}

/// `ω = 1 + μ·|meanpool(g) − g|` with a `window × window` mean filter whose
/// out-of-image taps replicate the nearest edge pixel.
pub fn boundary_weight(g: &Mask, mu: f64, window: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("boundary window must be odd, got {window}")));
    }
    let (h, w) = g.shape();
    let r = (window / 2) as isize;
    // Summed-area table over the edge-padded mask.
    let (ph, pw) = (h + window - 1, w + window - 1);
    let mut sat = vec![0u32; (ph + 1) * (pw + 1)];
    for i in 0..ph {
        let si = (i as isize - r).clamp(0, h as isize - 1) as usize;
        let mut row = 0u32;
        for j in 0..pw {
            let sj = (j as isize - r).clamp(0, w as isize - 1) as usize;
            row += g.bits()[si * w + sj] as u32;
            sat[(i + 1) * (pw + 1) + j + 1] = sat[i * (pw + 1) + j + 1] + row;
        }
    }
    let area = (window * window) as f64;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (i1, j1) = (i + window, j + window);
            let s = sat[i1 * (pw + 1) + j1] + sat[i * (pw + 1) + j] - sat[i * (pw + 1) + j1] - sat[i1 * (pw + 1) + j];
            let pooled = s as f64 / area;
            out.push(1.0 + mu * (pooled - g.bits()[i * w + j] as f64).abs());
        }
    }
    Ok(out)
}

/// Per-sample reciprocal of `Σω`, as a `[N]` constant.
fn inv_weight_sums<T: Scalar>(g: &mut Graph<T>, weights: Var) -> TensorResult<Var> {
    let w = g.value(weights);
    let n = w.shape()[0];
    let per = w.numel() / n;
    let inv: Vec<T> = w
        .data()
        .chunks(per)
        .map(|c| T::from_f64(1.0 / c.iter().map(|v| v.as_f64()).sum::<f64>()))
        .collect();
    g.constant(Tensor::new(&[n], inv)?)
}

fn probabilities<T: Scalar>(g: &mut Graph<T>, logits: Var, clip: f64) -> TensorResult<Var> {
    let p = g.sigmoid(logits)?;
    g.clamp(p, T::from_f64(clip), T::from_f64(1.0 - clip))
}

/// Batch mean of `Σω·BCE(p, g) / Σω`. `logits`, `target` and `weights` share
/// the shape `[N, 1, H, W]`.
pub fn wbce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: Var, weights: Var, clip: f64) -> TensorResult<Var> {
    g.same_shape("wbce_loss", logits, target)?;
    g.same_shape("wbce_loss", logits, weights)?;
    let p = probabilities(g, logits, clip)?;
    let lp = g.ln(p)?;
    let one_minus_p = g.neg(p)?;
    let one_minus_p = g.add_scalar(one_minus_p, T::one())?;
    let lq = g.ln(one_minus_p)?;
    let one_minus_t = g.neg(target)?;
    let one_minus_t = g.add_scalar(one_minus_t, T::one())?;
    let a = g.mul(target, lp)?;
    let b = g.mul(one_minus_t, lq)?;
    let ll = g.add(a, b)?;
    let weighted = g.mul(weights, ll)?;
    let per = g.sum_per_sample(weighted)?;
    let inv = inv_weight_sums(g, weights)?;
    let per = g.mul(per, inv)?;
    let m = g.mean(per)?;
    g.neg(m)
}

/// Batch mean of `1 − Σωpg / Σω(p + g − pg)`.
pub fn wiou_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: Var, weights: Var, clip: f64) -> TensorResult<Var> {
    g.same_shape("wiou_loss", logits, target)?;
    g.same_shape("wiou_loss", logits, weights)?;
    let p = probabilities(g, logits, clip)?;
    let pg = g.mul(p, target)?;
    let wpg = g.mul(weights, pg)?;
    let inter = g.sum_per_sample(wpg)?;
    let u = g.add(p, target)?;
    let u = g.sub(u, pg)?;
    let wu = g.mul(weights, u)?;
    let union = g.sum_per_sample(wu)?;
    let ratio = g.div(inter, union)?;
    let m = g.mean(ratio)?;
    let m = g.neg(m)?;
    g.add_scalar(m, T::one())
}

/// `λ·wIoU + (1 − λ)·wBCE`.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: Var,
    weights: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let iou = wiou_loss(g, logits, target, weights, cfg.prob_clip)?;
    let bce = wbce_loss(g, logits, target, weights, cfg.prob_clip)?;
    let a = g.mul_scalar(iou, T::from_f64(cfg.lambda))?;
    let b = g.mul_scalar(bce, T::from_f64(1.0 - cfg.lambda))?;
    Ok(g.add(a, b)?)
}

/// `Σ α_i · combined(S_i)` over the three heads.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    outputs: [Var; 3],
    target: Var,
    weights: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut total: Option<Var> = None;
    for (s, &alpha) in outputs.iter().zip(&cfg.alpha) {
        let l = combined_loss(g, *s, target, weights, cfg)?;
        let l = g.mul_scalar(l, T::from_f64(alpha))?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("three outputs"))
}

/// Stacked boundary weights for a batch of masks, `[N, 1, H, W]`.
pub fn weight_batch<T: Scalar>(masks: &[&Mask], cfg: &LossConfig) -> Result<Tensor<T>> {
    let first = masks.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.shape() != (h, w) {
            return Err(Error::Shape("masks in a batch must share a shape".into()));
        }
        data.extend(
            boundary_weight(m, cfg.boundary_mu, cfg.boundary_window)?
                .into_iter()
                .map(T::from_f64),
        );
    }
    Ok(Tensor::new(&[masks.len(), 1, h, w], data)?)
}
