//! Training losses, all written as quantities to minimize.
//!
//! The graph builders take `[P, d]` matrices whose rows are the non-padded
//! positions of a batch. Plain-tensor wrappers evaluate the same code for
//! tests and diagnostics.

use crate::autograd::{Graph, Var};
use crate::config::LossTerms;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logits are clamped to `±LOGIT_CLAMP` before `ln σ`.
pub const LOGIT_CLAMP: f64 = 15.0;

/// `−⟨x_t, x̂⟩`.
pub fn dissimilarity(x_t: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x_t.len() != x_hat.len() {
        return Err(Error::DimensionMismatch(x_t.len(), x_hat.len()));
    }
    Ok(-x_t.iter().zip(x_hat).map(|(a, b)| a * b).sum::<f64>())
}

fn rows(g: &Graph, v: Var) -> usize {
    g.value(v).rows()
}

/// `−mean_p [ln σ(⟨x̂_p, x⁺_p⟩) + ln σ(−⟨x̂_p, x⁻_p⟩)]`.
pub fn cross_divergence(g: &mut Graph, x_hat: Var, x_pos: Var, x_neg: Var) -> Result<Var> {
    if rows(g, x_hat) == 0 {
        return Err(Error::EmptyBatch);
    }
    let pos = g.row_dot(x_hat, x_pos);
    let neg = g.row_dot(x_hat, x_neg);
    let neg = g.scale(neg, -1.0);
    let lp = g.log_sigmoid(pos, LOGIT_CLAMP);
    let ln = g.log_sigmoid(neg, LOGIT_CLAMP);
    let s = g.add(lp, ln);
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// `mean_p ‖x̂_p − x_p‖²`.
pub fn squared_error(g: &mut Graph, x_hat: Var, x_t: Var) -> Result<Var> {
    if rows(g, x_hat) == 0 {
        return Err(Error::EmptyBatch);
    }
    let diff = g.sub(x_hat, x_t);
    let sq = g.row_dot(diff, diff);
    Ok(g.mean(sq))
}

/// InfoNCE with anchors `a`, positives `k` (row-aligned) and negatives from
/// every other key plus every other anchor:
/// `mean_i [lse_j(⟨a_i,k_j⟩/τ ; ⟨a_i,a_j⟩/τ, j≠i) − ⟨a_i,k_i⟩/τ]`.
///
/// With `groups`, anchor `i` only sees keys and anchors with the same group.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
pub fn info_nce(g: &mut Graph, anchors: Var, keys: Var, tau: f64, groups: Option<&[usize]>) -> Result<Var> {
    let p = rows(g, anchors);
    if p < 2 {
        return Err(Error::InvalidArgument(format!("InfoNCE needs at least 2 positions, got {p}")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let inv = 1.0 / tau;
    let ak = g.matmul(anchors, keys, true);
    let ak = g.scale(ak, inv);
    let aa = g.matmul(anchors, anchors, true);
    let aa = g.scale(aa, inv);
    let logits = g.concat_cols(&[ak, aa]);
    let mut mask = vec![true; p * 2 * p];
    for i in 0..p {
        mask[i * 2 * p + p + i] = false;
        if let Some(gr) = groups {
            for j in 0..p {
                if gr[i] != gr[j] {
                    mask[i * 2 * p + j] = false;
                    mask[i * 2 * p + p + j] = false;
                }
            }
        }
    }
    let lse = g.log_sum_exp(logits, mask);
    let pos = g.row_dot(anchors, keys);
    let pos = g.scale(pos, inv);
    let diff = g.sub(lse, pos);
    Ok(g.mean(diff))
}

fn eval_with(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    Ok(g.value(v).item())
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(a.numel(), b.numel()));
    }
    Ok(())
}

pub fn cross_divergence_loss(x_hat: &Tensor, x_pos: &Tensor, x_neg: &Tensor) -> Result<f64> {
    check_pair(x_hat, x_pos)?;
    check_pair(x_hat, x_neg)?;
    eval_with(|g| {
        let (h, p, n) = (g.constant(x_hat.clone()), g.constant(x_pos.clone()), g.constant(x_neg.clone()));
        cross_divergence(g, h, p, n)
    })
}

pub fn in_view_infonce(x_hat: &Tensor, x_t: &Tensor, tau: f64) -> Result<f64> {
    check_pair(x_hat, x_t)?;
    eval_with(|g| {
        let (h, k) = (g.constant(x_hat.clone()), g.constant(x_t.clone()));
        info_nce(g, h, k, tau, None)
    })
}

pub fn cross_view_infonce(x_hat: &Tensor, x_hat_aug: &Tensor, tau: f64) -> Result<f64> {
    in_view_infonce(x_hat, x_hat_aug, tau)
}

/// Loss components at one diffusion step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub t: usize,
    /// Reconstruction term: cross-divergence, or squared error for the
    /// MSE variants.
    pub cd: f64,
    pub in_view: f64,
    pub cross_view: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub per_step: Vec<StepLoss>,
    /// Step weight applied to each entry of `per_step`.
    pub weights: Vec<f64>,
    pub total: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl LossBreakdown {
    /// Weighted contribution of entry `i`.
    pub fn step_total(&self, i: usize) -> f64 {
        let s = &self.per_step[i];
        self.weights[i] * (s.cd + self.lambda * (s.in_view + s.cross_view))
    }
}

/// `1/(t+1)` when rescaling, otherwise `1/(T+1)`.
pub fn step_weight(t: usize, steps: usize, rescale: bool) -> f64 {
    if rescale {
        1.0 / (t + 1) as f64
    } else {
        1.0 / (steps + 1) as f64
    }
}

/// `Σ_t w_t (cd_t + λ (in_t + cross_t))` over the given steps, with
/// switched-off terms contributing zero.
pub fn total_loss(per_step: &[StepLoss], steps: usize, lambda: f64, tau: f64, terms: LossTerms) -> Result<LossBreakdown> {
    let mut out = LossBreakdown { lambda, tau, ..Default::default() };
    for s in per_step {
        for (name, v) in [("cd", s.cd), ("in_view", s.in_view), ("cross_view", s.cross_view)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { t: s.t, component: name });
            }
        }
        let kept = StepLoss {
            t: s.t,
            cd: if terms.cross_divergence || terms.mse { s.cd } else { 0.0 },
            in_view: if terms.in_view { s.in_view } else { 0.0 },
            cross_view: if terms.cross_view { s.cross_view } else { 0.0 },
        };
        out.per_step.push(kept);
        out.weights.push(step_weight(s.t, steps, terms.rescale));
    }
    out.total = (0..out.per_step.len()).map(|i| out.step_total(i)).sum();
    Ok(out)
}
