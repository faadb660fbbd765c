//! Training objectives: the BPR baseline, the consecutive-pair ranking loss,
//! gradient-density confidence weights, noise supervision and the combined
//! objective.

use serde::Serialize;
use thiserror::Error;

use crate::model::{ModelError, NoisyTriple, PrpModel};
use crate::tensor::linalg;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("ranking loss needs at least two items, got {0}")]
    TooShort(usize),
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("confidence pool is empty")]
    EmptyPool,
    #[error("gradient magnitude {0} outside [0, 1]")]
    PoolRange(f64),
    #[error("expected {expected} confidence weights, got {got}")]
    AlphaMismatch { expected: usize, got: usize },
    #[error("bin count must be positive")]
    NoBins,
    #[error("beta must be finite and non-negative, got {0}")]
    BadBeta(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// ln(1 + e^x) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BprOutput {
    pub loss: f64,
    pub grad_pos: f64,
    pub grad_neg: f64,
}

/// −ln σ(s_p − s_n)
pub fn bpr_loss(s_p: f64, s_n: f64) -> BprOutput {
    let g = sigmoid(s_n - s_p);
    BprOutput {
        loss: softplus(s_n - s_p),
        grad_pos: -g,
        grad_neg: g,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingOutput {
    pub loss: f64,
    /// ∂L/∂s(π(v)) for v = 1..k, in π order.
    pub grads: Vec<f64>,
    /// g_v = σ(δ_v) for v = 1..k−1.
    pub g: Vec<f64>,
}

fn check_scores(ordered: &[f64]) -> Result<(), LossError> {
    if ordered.len() < 2 {
        return Err(LossError::TooShort(ordered.len()));
    }
    match ordered.iter().position(|s| !s.is_finite()) {
        Some(p) => Err(LossError::NonFinite(p)),
        None => Ok(()),
    }
}

/// Σ_{v=1}^{k−1} softplus(s(π(v+1)) − s(π(v))) over scores given best first.
pub fn ranking_loss(ordered: &[f64]) -> Result<RankingOutput, LossError> {
    check_scores(ordered)?;
    let k = ordered.len();
    let mut loss = 0.0;
    let mut grads = vec![0.0; k];
    let mut g = Vec::with_capacity(k - 1);
    for v in 0..k - 1 {
        let delta = ordered[v + 1] - ordered[v];
        loss += softplus(delta);
        let gv = sigmoid(delta);
        grads[v] -= gv;
        grads[v + 1] += gv;
        g.push(gv);
    }
    Ok(RankingOutput { loss, grads, g })
}

/// Only the per-gap derivatives, for filling a confidence pool before the
/// weighted loss is evaluated.
pub fn gap_gradients(ordered: &[f64]) -> Result<Vec<f64>, LossError> {
    check_scores(ordered)?;
    Ok(ordered.windows(2).map(|w| sigmoid(w[1] - w[0])).collect())
}

/// Histogram of a batch pool of g values over equal-width bins on
/// [0, max g].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceProfile {
    pub bins: usize,
    pub max_g: f64,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl ConfidenceProfile {
    pub fn bin_of(&self, g: f64) -> usize {
        if self.max_g <= 0.0 {
            return 0;
        }
        (((g / self.max_g) * self.bins as f64).floor() as usize).min(self.bins - 1)
    }

    /// α for a gradient magnitude from this pool.
    pub fn alpha(&self, g: f64) -> f64 {
        if self.max_g <= 0.0 {
            return 1.0;
        }
        self.counts[self.bin_of(g)] as f64 / self.total as f64
    }

    pub fn alphas(&self, gs: &[f64]) -> Vec<f64> {
        gs.iter().map(|&g| self.alpha(g)).collect()
    }
}

pub fn confidence_weights(pool: &[f64], bins: usize) -> Result<ConfidenceProfile, LossError> {
    if bins == 0 {
        return Err(LossError::NoBins);
    }
    if pool.is_empty() {
        return Err(LossError::EmptyPool);
    }
    if let Some(&bad) = pool.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(LossError::PoolRange(bad));
    }
    let max_g = pool.iter().copied().fold(0.0, f64::max);
    let mut profile = ConfidenceProfile {
        bins,
        max_g,
        counts: vec![0; bins],
        total: pool.len(),
    };
    for &g in pool {
        let b = profile.bin_of(g);
        profile.counts[b] += 1;
    }
    Ok(profile)
}

/// Σ α_v·softplus(δ_v). α is a constant: the gradients are the unweighted
/// per-term gradients scaled by α_v.
pub fn weighted_ranking_loss(ordered: &[f64], alphas: &[f64]) -> Result<RankingOutput, LossError> {
    check_scores(ordered)?;
    let k = ordered.len();
    if alphas.len() != k - 1 {
        return Err(LossError::AlphaMismatch {
            expected: k - 1,
            got: alphas.len(),
        });
    }
    let mut loss = 0.0;
    let mut grads = vec![0.0; k];
    let mut g = Vec::with_capacity(k - 1);
    for v in 0..k - 1 {
        let delta = ordered[v + 1] - ordered[v];
        let a = alphas[v];
        loss += a * softplus(delta);
        let gv = sigmoid(delta);
        grads[v] -= a * gv;
        grads[v + 1] += a * gv;
        g.push(gv);
    }
    Ok(RankingOutput { loss, grads, g })
}

/// Ranker scores of the three perturbed positives, ground-truth order.
#[derive(Debug, Clone)]
pub struct NoiseSupervision {
    pub scores: [f64; 3],
    pub g: [f64; 2],
}

/// Scores a noisy triple with the ranker. The loss itself is
/// `weighted_ranking_loss(&scores, alphas)`; α comes from the L_p pool.
pub fn noise_supervision_scores(model: &PrpModel, triple: &NoisyTriple) -> Result<NoiseSupervision, LossError> {
    let d = model.dim();
    let eu = model.user_vec(triple.user)?;
    let mut input = Vec::with_capacity(6 * d);
    for e in &triple.embeddings {
        input.extend_from_slice(eu);
        input.extend_from_slice(e);
    }
    let (out, _) = model.ranker.mlp.forward(&model.params, &input).map_err(ModelError::from)?;
    let scores = [out[0], out[1], out[2]];
    let g = gap_gradients(&scores)?;
    Ok(NoiseSupervision { scores, g: [g[0], g[1]] })
}

/// Single-triple reference for L_p with explicit α, including the backward
/// pass into every participating tensor (ranker, noise nets, e_u, e_p).
/// Gradients are accumulated with the given scale.
pub fn noise_supervision_loss(
    model: &mut PrpModel,
    triple: &NoisyTriple,
    alphas: &[f64],
    scale: f64,
) -> Result<f64, LossError> {
    let d = model.dim();
    let u = triple.user as usize;
    let p = triple.positive as usize;
    let eu = model.user_vec(triple.user)?.to_vec();
    let mut input = Vec::with_capacity(6 * d);
    for e in &triple.embeddings {
        input.extend_from_slice(&eu);
        input.extend_from_slice(e);
    }
    let (out, tape) = model.ranker.mlp.forward(&model.params, &input).map_err(ModelError::from)?;
    let res = weighted_ranking_loss(&out, alphas)?;
    let out_grad: Vec<f64> = res.grads.iter().map(|g| g * scale).collect();
    let ranker = model.ranker.mlp.clone();
    let in_grad = ranker.backward(&mut model.params, &tape, &out_grad).map_err(ModelError::from)?;

    let thetas = triple.thetas.values();
    let mut g_eu = vec![0.0; d];
    let mut g_ep = vec![0.0; d];
    let mut g_eps = vec![0.0; d];
    for m in 0..3 {
        let row = &in_grad[m * 2 * d..(m + 1) * 2 * d];
        linalg::axpy(1.0, &row[..d], &mut g_eu);
        linalg::axpy(1.0, &row[d..], &mut g_ep);
        linalg::axpy(thetas[m], &row[d..], &mut g_eps);
    }
    let g_in_eu = noise_backward(model, triple, &g_eps)?;
    linalg::axpy(1.0, &g_in_eu, &mut g_eu);

    let (ue, ie) = (model.emb.user, model.emb.item);
    linalg::axpy(1.0, &g_eu, &mut model.params.grad_mut(ue)[u * d..(u + 1) * d]);
    linalg::axpy(1.0, &g_ep, &mut model.params.grad_mut(ie)[p * d..(p + 1) * d]);
    Ok(res.loss)
}

/// Backpropagates dL/dε through the reparameterization and both noise nets;
/// returns dL/de_u.
pub(crate) fn noise_backward(model: &mut PrpModel, triple: &NoisyTriple, g_eps: &[f64]) -> Result<Vec<f64>, LossError> {
    let n = &triple.noise;
    let mut g_mu = g_eps.to_vec();
    let g_lv: Vec<f64> = (0..g_eps.len())
        .map(|j| {
            if crate::model::logvar_passes_gradient(n.logvar[j]) {
                g_eps[j] * n.eta[j] * 0.5 * n.sigma[j]
            } else {
                0.0
            }
        })
        .collect();
    let (mu_net, lv_net) = (model.noise.mu.clone(), model.noise.logvar.clone());
    let g_mu_from_lv = lv_net.backward(&mut model.params, &triple.tape.logvar, &g_lv).map_err(ModelError::from)?;
    linalg::axpy(1.0, &g_mu_from_lv, &mut g_mu);
    Ok(mu_net.backward(&mut model.params, &triple.tape.mu, &g_mu).map_err(ModelError::from)?)
}

/// (Σ main + β·Σ L_p) / B
pub fn total_loss(rank_sum: f64, lp_sum: f64, beta: f64, batch: usize) -> Result<f64, LossError> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(LossError::BadBeta(beta));
    }
    Ok((rank_sum + beta * lp_sum) / batch.max(1) as f64)
}
