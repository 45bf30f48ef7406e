//! Training losses: IoU-gated smooth-L1 regression with a corner term,
//! soft-target binary cross-entropy and binary focal loss.
//!
//! Every loss returns its value together with the gradient with respect to
//! the network outputs it consumes.

use serde::{Deserialize, Serialize};

use crate::boxes::{self, corners, corners_jacobian, Box3D, NormalizedResidual7};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub theta_reg: f64,
    pub theta_h: f64,
    pub theta_l: f64,
    pub smooth_l1_beta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub corner_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            theta_reg: 0.55,
            theta_h: 0.75,
            theta_l: 0.25,
            smooth_l1_beta: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            corner_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.theta_l) || !unit.contains(&self.theta_h) || self.theta_l >= self.theta_h
        {
            return Err(Error::Config(format!(
                "loss.theta_l/theta_h must satisfy 0 <= theta_l < theta_h <= 1 (got {}, {})",
                self.theta_l, self.theta_h
            )));
        }
        if !unit.contains(&self.theta_reg) {
            return Err(Error::Config("loss.theta_reg must lie in [0, 1]".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("loss.smooth_l1_beta must be > 0".into()));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("loss.focal_gamma must be >= 0".into()));
        }
        if !(self.corner_weight >= 0.0) {
            return Err(Error::Config("loss.corner_weight must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    let e = (pred - target).abs();
    if e < beta {
        0.5 * e * e / beta
    } else {
        e - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_grad(pred: f64, target: f64, beta: f64) -> f64 {
    let e = pred - target;
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}

/// Bound on decoded log-extent ratios for predicted boxes.
pub const LOG_EXTENT_LIMIT: f64 = 3.0;

/// Decodes a predicted normalized residual against its proposal. Log-extent
/// components are clamped to `±LOG_EXTENT_LIMIT` so early, badly scaled
/// predictions cannot overflow. Also returns `∂box/∂x̂₀`, which is diagonal.
pub fn decode_prediction(
    proposal: &Box3D,
    pred: &NormalizedResidual7,
) -> Result<(Box3D, [f64; 7])> {
    let scales = boxes::normalization_scales(proposal);
    let mut r = boxes::denormalize(pred, proposal);
    let mut active = [1.0; 7];
    for i in 3..6 {
        if r[i].abs() > LOG_EXTENT_LIMIT {
            r[i] = r[i].clamp(-LOG_EXTENT_LIMIT, LOG_EXTENT_LIMIT);
            active[i] = 0.0;
        }
    }
    let b = boxes::decode(proposal, &r)?;
    let d = proposal.base_diagonal();
    let jac = [
        d * scales[0],
        d * scales[1],
        proposal.h * scales[2],
        b.w * scales[3] * active[3],
        b.h * scales[4] * active[4],
        b.l * scales[5] * active[5],
        scales[6],
    ];
    Ok((b, jac))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient per sample with respect to the consumed network output.
    pub grad: Vec<[f64; 7]>,
    /// Set when the batch was empty.
    pub empty: bool,
}

/// One sample of the regression loss.
#[derive(Debug, Clone, Copy)]
pub struct RegressionSample {
    pub pred: NormalizedResidual7,
    pub target: NormalizedResidual7,
    pub proposal: Box3D,
    pub target_box: Box3D,
    pub iou: f64,
}

/// Mean over samples of `1(IoU ≥ θ_reg)·[Σ smoothL1(residual) +
/// w_c·Σ smoothL1(corners)]`, corners taken from the decoded prediction and
/// the target box.
pub fn regression_loss(samples: &[RegressionSample], cfg: &LossConfig) -> Result<LossOutput> {
    if samples.is_empty() {
        return Ok(LossOutput {
            value: 0.0,
            grad: Vec::new(),
            empty: true,
        });
    }
    let n = samples.len() as f64;
    let beta = cfg.smooth_l1_beta;
    let mut total = 0.0;
    let mut grad = vec![[0.0; 7]; samples.len()];
    for (s, g) in samples.iter().zip(grad.iter_mut()) {
        if s.iou < cfg.theta_reg {
            continue;
        }
        for k in 0..7 {
            total += smooth_l1(s.pred[k], s.target[k], beta) / n;
            g[k] += smooth_l1_grad(s.pred[k], s.target[k], beta) / n;
        }
        if cfg.corner_weight == 0.0 {
            continue;
        }
        let (pred_box, dbox) = decode_prediction(&s.proposal, &s.pred)?;
        let pc = corners(&pred_box);
        let tc = corners(&s.target_box);
        let jac = corners_jacobian(&pred_box);
        let mut dparams = [0.0; 7];
        for j in 0..8 {
            for c in 0..3 {
                total += cfg.corner_weight * smooth_l1(pc[j][c], tc[j][c], beta) / n;
                let gc = cfg.corner_weight * smooth_l1_grad(pc[j][c], tc[j][c], beta) / n;
                for p in 0..7 {
                    dparams[p] += gc * jac[j][c][p];
                }
            }
        }
        for k in 0..7 {
            g[k] += dparams[k] * dbox[k];
        }
    }
    Ok(LossOutput {
        value: total,
        grad,
        empty: false,
    })
}

/// Numerically stable BCE on a logit: `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

pub fn logit_of(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Classification loss from logits; gradient is with respect to the logits.
pub fn classification_loss_logits(
    logits: &[f64],
    ious: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != ious.len() {
        return Err(Error::Config(format!(
            "{} logits vs {} ious",
            logits.len(),
            ious.len()
        )));
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &iou) in logits.iter().zip(ious) {
        let y = boxes::classification_target(iou, cfg.theta_l, cfg.theta_h)?;
        value += bce_with_logit(z, y) / n;
        grad.push((crate::network::logistic(z) - y) / n);
    }
    Ok((value, grad))
}

/// Mean BCE of confidences in `(0, 1)` against IoU-ramped soft targets.
pub fn classification_loss(c_hats: &[f64], ious: &[f64], cfg: &LossConfig) -> Result<f64> {
    let logits: Vec<f64> = c_hats.iter().map(|&p| logit_of(p)).collect();
    Ok(classification_loss_logits(&logits, ious, cfg)?.0)
}

/// Mean focal loss `−α(1−p_t)^γ ln p_t`; gradient with respect to the scores.
pub fn focal_loss(s_hats: &[f64], labels: &[bool], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    if s_hats.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores vs {} labels",
            s_hats.len(),
            labels.len()
        )));
    }
    if s_hats.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = s_hats.len() as f64;
    let (a, gamma) = (cfg.focal_alpha, cfg.focal_gamma);
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(s_hats.len());
    for (&s, &label) in s_hats.iter().zip(labels) {
        let (pt, dpt) = if label { (s, 1.0) } else { (1.0 - s, -1.0) };
        let q = 1.0 - pt;
        let lnp = pt.ln();
        value += -a * q.powf(gamma) * lnp / n;
        // d/dpt [−α q^γ ln pt] = α γ q^{γ−1} ln pt − α q^γ / pt
        let dq = if gamma == 0.0 {
            0.0
        } else {
            a * gamma * q.powf(gamma - 1.0) * lnp
        };
        let dl_dpt = dq - a * q.powf(gamma) / pt;
        grad.push(dl_dpt * dpt / n);
    }
    Ok((value, grad))
}
