//! Training objectives for the coarse and fine stages, each returning its
//! value together with analytic gradients with respect to its differentiable
//! inputs.
//!
//! Per-frame functions take flat `H·W` slices; batch reductions are sums of
//! per-frame values (the trainer divides by the batch size). Composite losses
//! take raw logits and apply the sigmoid themselves. Binarized teacher
//! targets are constants: no gradient flows into the logits they came from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLossForm {
    /// Batch InfoNCE with in-batch negatives; `1 - cos` when the batch has one frame.
    #[default]
    InfoNce,
    /// Mean `1 - cos` over matched pairs, no negatives.
    AttractionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub eps_dice: f64,
    pub focal_exponent: f64,
    pub tau: f64,
    pub lambda_ts: f64,
    pub lambda_ts_prime: f64,
    pub lambda_ws_stu: f64,
    pub lambda_ws_stu_prime: f64,
    pub lambda_ws_tea: f64,
    pub lambda_ws_tea_prime: f64,
    pub lambda_c_focal: f64,
    pub lambda_c_dice: f64,
    pub prob_clamp: f64,
    /// Probability threshold used when binarizing teacher outputs into targets.
    pub target_threshold: f64,
    pub embedding_loss_form: EmbeddingLossForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eps_dice: 1e-6,
            focal_exponent: 2.0,
            tau: 0.3,
            lambda_ts: 1.0,
            lambda_ts_prime: 1.0,
            lambda_ws_stu: 0.5,
            lambda_ws_stu_prime: 0.5,
            lambda_ws_tea: 0.5,
            lambda_ws_tea_prime: 0.5,
            lambda_c_focal: 0.5,
            lambda_c_dice: 0.5,
            prob_clamp: 1e-6,
            target_threshold: 0.5,
            embedding_loss_form: EmbeddingLossForm::InfoNce,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::param("loss.tau", "must be positive"));
        }
        if !(self.eps_dice > 0.0) {
            return Err(Error::param("loss.eps_dice", "must be positive"));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp <= 0.01) {
            return Err(Error::param("loss.prob_clamp", "must lie in (0, 0.01]"));
        }
        if !(self.target_threshold > 0.0 && self.target_threshold < 1.0) {
            return Err(Error::param("loss.target_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Weights of the four-term total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl LossWeights {
    pub const WARMUP: LossWeights = LossWeights {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.5,
        delta: 1.0,
    };
    pub const SELF_TRAIN: LossWeights = LossWeights {
        alpha: 5.0,
        beta: 0.0,
        gamma: 1.0,
        delta: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("weights.alpha", self.alpha),
            ("weights.beta", self.beta),
            ("weights.gamma", self.gamma),
            ("weights.delta", self.delta),
        ] {
            if !(v >= 0.0) {
                return Err(Error::param(name, "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ts: f64,
    pub ws: f64,
    pub emb: f64,
    pub pred: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

/// The `Sig` operator: sigmoid then threshold, as a constant target.
pub fn binarize_logits(logits: &[f64], threshold: f64) -> Vec<f64> {
    logits
        .iter()
        .map(|&x| if sigmoid(x) >= threshold { 1.0 } else { 0.0 })
        .collect()
}

pub fn sigmoid_all(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| sigmoid(x)).collect()
}

/// Chain a probability-space gradient back through the sigmoid.
fn through_sigmoid(grad_prob: &[f64], prob: &[f64], scale: f64) -> Vec<f64> {
    grad_prob
        .iter()
        .zip(prob)
        .map(|(g, p)| scale * g * p * (1.0 - p))
        .collect()
}

/// `1 - (2 Σ x y + ε) / (Σ x + Σ y + ε)` for one frame.
pub fn dice_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    Ok(dice_loss_grad(pred, target, eps)?.0)
}

/// Dice loss and its gradient with respect to `pred`.
pub fn dice_loss_grad(pred: &[f64], target: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    check_len(pred, target)?;
    let inter: f64 = pred.iter().zip(target).map(|(x, y)| x * y).sum();
    let sum_x: f64 = pred.iter().sum();
    let sum_y: f64 = target.iter().sum();
    let num = 2.0 * inter + eps;
    let den = sum_x + sum_y + eps;
    let loss = 1.0 - num / den;
    let den2 = den * den;
    let grad = target.iter().map(|y| -(2.0 * y * den - num) / den2).collect();
    Ok((loss, grad))
}

/// Binary focal loss over one frame, normalised by the pixel count. `target`
/// must be binary; probabilities are clamped to `[clamp, 1 - clamp]`.
pub fn focal_loss(pred: &[f64], target: &[f64], exponent: f64, clamp: f64) -> Result<f64> {
    Ok(focal_loss_grad(pred, target, exponent, clamp)?.0)
}

pub fn focal_loss_grad(pred: &[f64], target: &[f64], exponent: f64, clamp: f64) -> Result<(f64, Vec<f64>)> {
    check_len(pred, target)?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let x = p.clamp(clamp, 1.0 - clamp);
        let inside = p > clamp && p < 1.0 - clamp;
        let (l, d) = if y == 1.0 {
            let w = (1.0 - x).powf(exponent);
            let l = -w * x.ln();
            let d = exponent * (1.0 - x).powf(exponent - 1.0) * x.ln() - w / x;
            (l, d)
        } else {
            let w = x.powf(exponent);
            let l = -w * (1.0 - x).ln();
            let d = -exponent * x.powf(exponent - 1.0) * (1.0 - x).ln() + w / (1.0 - x);
            (l, d)
        };
        loss += l;
        grad.push(if inside { d / n } else { 0.0 });
    }
    Ok((loss / n, grad))
}

/// Value plus gradients with respect to the student logits. The teacher
/// logits only define a binarized target, so their gradient is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TsLoss {
    pub value: f64,
    pub grad_stu: Vec<f64>,
    pub grad_stu_aug: Vec<f64>,
    pub grad_tea: Vec<f64>,
}

/// Teacher–student loss: dice of both student branches against the
/// binarized clean teacher prediction.
pub fn ts_loss(p_stu: &[f64], p_stu_aug: &[f64], p_tea: &[f64], cfg: &LossConfig) -> Result<TsLoss> {
    check_len(p_stu, p_tea)?;
    check_len(p_stu_aug, p_tea)?;
    let target = binarize_logits(p_tea, cfg.target_threshold);
    let s = sigmoid_all(p_stu);
    let sa = sigmoid_all(p_stu_aug);
    let (l1, g1) = dice_loss_grad(&s, &target, cfg.eps_dice)?;
    let (l2, g2) = dice_loss_grad(&sa, &target, cfg.eps_dice)?;
    Ok(TsLoss {
        value: cfg.lambda_ts * l1 + cfg.lambda_ts_prime * l2,
        grad_stu: through_sigmoid(&g1, &s, cfg.lambda_ts),
        grad_stu_aug: through_sigmoid(&g2, &sa, cfg.lambda_ts_prime),
        grad_tea: vec![0.0; p_tea.len()],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WsLoss {
    pub value: f64,
    pub grad_stu: Vec<f64>,
    pub grad_stu_aug: Vec<f64>,
    pub grad_tea: Vec<f64>,
    pub grad_tea_aug: Vec<f64>,
}

/// Weak supervision: λ-weighted dice of all four predictions against the pseudo-label.
pub fn ws_loss(
    p_stu: &[f64],
    p_stu_aug: &[f64],
    p_tea: &[f64],
    p_tea_aug: &[f64],
    y_p: &[f64],
    cfg: &LossConfig,
) -> Result<WsLoss> {
    let branch = |logits: &[f64], lambda: f64| -> Result<(f64, Vec<f64>)> {
        check_len(logits, y_p)?;
        let p = sigmoid_all(logits);
        let (l, g) = dice_loss_grad(&p, y_p, cfg.eps_dice)?;
        Ok((lambda * l, through_sigmoid(&g, &p, lambda)))
    };
    let (a, ga) = branch(p_stu, cfg.lambda_ws_stu)?;
    let (b, gb) = branch(p_stu_aug, cfg.lambda_ws_stu_prime)?;
    let (c, gc) = branch(p_tea, cfg.lambda_ws_tea)?;
    let (d, gd) = branch(p_tea_aug, cfg.lambda_ws_tea_prime)?;
    Ok(WsLoss {
        value: a + b + c + d,
        grad_stu: ga,
        grad_stu_aug: gb,
        grad_tea: gc,
        grad_tea_aug: gd,
    })
}

/// Student half of the weak supervision, used by the pseudo-label-only baseline.
pub fn ws_student_loss(p_stu: &[f64], p_stu_aug: &[f64], y_p: &[f64], cfg: &LossConfig) -> Result<WsLoss> {
    let zero = LossConfig {
        lambda_ws_tea: 0.0,
        lambda_ws_tea_prime: 0.0,
        ..cfg.clone()
    };
    ws_loss(p_stu, p_stu_aug, p_stu, p_stu_aug, y_p, &zero)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredLoss {
    pub value: f64,
    pub grad_tea_aug: Vec<f64>,
    pub grad_tea: Vec<f64>,
}

/// Prediction consistency of the teacher under perturbation: focal + dice of
/// the augmented branch against the binarized clean branch.
pub fn pred_consistency_loss(p_tea: &[f64], p_tea_aug: &[f64], cfg: &LossConfig) -> Result<PredLoss> {
    check_len(p_tea, p_tea_aug)?;
    let target = binarize_logits(p_tea, cfg.target_threshold);
    let pa = sigmoid_all(p_tea_aug);
    let (lf, gf) = focal_loss_grad(&pa, &target, cfg.focal_exponent, cfg.prob_clamp)?;
    let (ld, gd) = dice_loss_grad(&pa, &target, cfg.eps_dice)?;
    let grad_prob: Vec<f64> = gf
        .iter()
        .zip(&gd)
        .map(|(f, d)| cfg.lambda_c_focal * f + cfg.lambda_c_dice * d)
        .collect();
    Ok(PredLoss {
        value: cfg.lambda_c_focal * lf + cfg.lambda_c_dice * ld,
        grad_tea_aug: through_sigmoid(&grad_prob, &pa, 1.0),
        grad_tea: vec![0.0; p_tea.len()],
    })
}

/// Max-pool a pixel mask onto a `grid_h × grid_w` cell grid: a cell is
/// foreground when any of its pixels is.
pub fn downsample_mask(mask: &[u8], height: usize, width: usize, grid_h: usize, grid_w: usize) -> Result<Vec<f64>> {
    if mask.len() != height * width {
        return Err(Error::shape(height * width, mask.len()));
    }
    if grid_h == 0 || grid_w == 0 || height % grid_h != 0 || width % grid_w != 0 {
        return Err(Error::shape(format!("grid dividing {height}x{width}"), format!("{grid_h}x{grid_w}")));
    }
    let (ph, pw) = (height / grid_h, width / grid_w);
    let mut cells = vec![0.0; grid_h * grid_w];
    for r in 0..height {
        for c in 0..width {
            if mask[r * width + c] != 0 {
                cells[(r / ph) * grid_w + c / pw] = 1.0;
            }
        }
    }
    Ok(cells)
}

/// Masked mean of embedding cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledEmbedding {
    pub vector: Vec<f64>,
    /// Per-cell weight `w / Σ w`, needed to route gradients back to the grid.
    pub cell_weights: Vec<f64>,
}

impl PooledEmbedding {
    /// Gradient with respect to the `[cells, dim]` embedding given `dL/dz⁺`.
    pub fn backward(&self, grad: &[f64]) -> Vec<f64> {
        let d = self.vector.len();
        let mut out = vec![0.0; self.cell_weights.len() * d];
        for (i, &w) in self.cell_weights.iter().enumerate() {
            if w != 0.0 {
                for j in 0..d {
                    out[i * d + j] = w * grad[j];
                }
            }
        }
        out
    }
}

/// `z⁺ = Σ y·z / Σ y` over a `[cells, dim]` embedding and per-cell weights `y`.
pub fn pooled_positive_embedding(z: &[f64], dim: usize, cell_mask: &[f64]) -> Result<PooledEmbedding> {
    if z.len() != cell_mask.len() * dim {
        return Err(Error::shape(cell_mask.len() * dim, z.len()));
    }
    let total: f64 = cell_mask.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyPool);
    }
    let mut vector = vec![0.0; dim];
    for (i, &w) in cell_mask.iter().enumerate() {
        if w != 0.0 {
            for j in 0..dim {
                vector[j] += w * z[i * dim + j];
            }
        }
    }
    for v in &mut vector {
        *v /= total;
    }
    Ok(PooledEmbedding {
        vector,
        cell_weights: cell_mask.iter().map(|w| w / total).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbLoss {
    pub value: f64,
    /// Gradients with respect to the unnormalised pooled vectors.
    pub grad_stu: Vec<Vec<f64>>,
    pub grad_tea: Vec<Vec<f64>>,
}

fn normalise(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::param("embedding", "zero or non-finite pooled vector"));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Back through `v / |v|`: `(g - v̂ (v̂·g)) / |v|`.
fn through_normalise(g: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let dot: f64 = g.iter().zip(unit).map(|(a, b)| a * b).sum();
    g.iter().zip(unit).map(|(a, u)| (a - u * dot) / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Embedding consistency between matched student/teacher pooled vectors.
pub fn embedding_consistency_loss(
    stu: &[Vec<f64>],
    tea: &[Vec<f64>],
    tau: f64,
    form: EmbeddingLossForm,
) -> Result<EmbLoss> {
    if stu.len() != tea.len() {
        return Err(Error::shape(stu.len(), tea.len()));
    }
    if stu.is_empty() {
        return Err(Error::EmptyDataset("embedding consistency over an empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::param("loss.tau", "must be positive"));
    }
    let b = stu.len();
    let s: Vec<(Vec<f64>, f64)> = stu.iter().map(|v| normalise(v)).collect::<Result<_>>()?;
    let t: Vec<(Vec<f64>, f64)> = tea.iter().map(|v| normalise(v)).collect::<Result<_>>()?;
    for (a, c) in s.iter().zip(&t) {
        check_len(&a.0, &c.0)?;
    }

    let mut gs: Vec<Vec<f64>> = s.iter().map(|v| vec![0.0; v.0.len()]).collect();
    let mut gt: Vec<Vec<f64>> = t.iter().map(|v| vec![0.0; v.0.len()]).collect();
    let value;
    if b == 1 || form == EmbeddingLossForm::AttractionOnly {
        // Mean of 1 - cos over matched pairs.
        let mut total = 0.0;
        for i in 0..b {
            total += 1.0 - dot(&s[i].0, &t[i].0);
            for j in 0..gs[i].len() {
                gs[i][j] = -t[i].0[j] / b as f64;
                gt[i][j] = -s[i].0[j] / b as f64;
            }
        }
        value = total / b as f64;
    } else {
        let mut total = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..b).map(|j| dot(&s[i].0, &t[j].0) / tau).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - logits[i];
            for j in 0..b {
                let soft = (logits[j] - lse).exp();
                let dl = (soft - if i == j { 1.0 } else { 0.0 }) / b as f64;
                for k in 0..gs[i].len() {
                    gs[i][k] += dl * t[j].0[k] / tau;
                    gt[j][k] += dl * s[i].0[k] / tau;
                }
            }
        }
        value = total / b as f64;
    }
    let grad_stu = gs
        .iter()
        .zip(&s)
        .map(|(g, (u, n))| through_normalise(g, u, *n))
        .collect();
    let grad_tea = gt
        .iter()
        .zip(&t)
        .map(|(g, (u, n))| through_normalise(g, u, *n))
        .collect();
    Ok(EmbLoss {
        value,
        grad_stu,
        grad_tea,
    })
}

/// `α·L_ts + β·L_ws + γ·L_emb + δ·L_pred`; any non-finite part is an error.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("ts", parts.ts), ("ws", parts.ws), ("emb", parts.emb), ("pred", parts.pred)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                part: name,
                value: v,
                epoch: 0,
                step: 0,
            });
        }
    }
    Ok(w.alpha * parts.ts + w.beta * parts.ws + w.gamma * parts.emb + w.delta * parts.pred)
}
