//! One training step over a batch: pseudo-ranking, main ranking loss,
//! noise supervision, confidence weighting and the backward pass.
//!
//! [`forward_backward`] is the batched path used for training. It splits the
//! ranker's first layer into user and item column blocks so each distinct
//! user and item is projected once per step. [`reference_forward_backward`]
//! computes the same quantity pair by pair through the scorer and loss
//! primitives and exists to cross-check the batched path.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::data::{Batch, ItemIdx, UserIdx};
use crate::loss::{
    confidence_weights, gap_gradients, noise_supervision_loss, noise_supervision_scores, weighted_ranking_loss,
    ConfidenceProfile, LossError,
};
use crate::model::{
    build_noisy_triple_with_eta, clamp_logvar, draw_eta, logvar_passes_gradient, pseudo_rank, ModelError, PrpModel,
    Thetas,
};
use crate::tensor::{linalg, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum StepError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("ranking {index} has length {got}, expected {expected}")]
    RaggedRanking { index: usize, expected: usize, got: usize },
    #[error("noise draws cover {got} values, expected {expected}")]
    EtaLength { expected: usize, got: usize },
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What one step computes. BPR training is `use_ranker = use_lp = false`,
/// no confidence, k = 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub beta: f64,
    pub thetas: Thetas,
    pub bins: usize,
    pub use_ranker: bool,
    pub use_lp: bool,
    pub confidence_main: bool,
    pub confidence_lp: bool,
    pub pin_positive: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            beta: 0.3,
            thetas: Thetas::default(),
            bins: crate::loss::DEFAULT_BINS,
            use_ranker: true,
            use_lp: true,
            confidence_main: true,
            confidence_lp: true,
            pin_positive: true,
        }
    }
}

/// Everything random about a step, fixed before the loss is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub pairs: Vec<(UserIdx, ItemIdx)>,
    /// π_u per pair, best first.
    pub rankings: Vec<Vec<ItemIdx>>,
    /// One standard-normal d-vector per pair, row-major; empty without L_p.
    pub etas: Vec<f64>,
}

impl StepPlan {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn k(&self) -> usize {
        self.rankings.first().map_or(0, Vec::len)
    }
}

/// Confidence weights used by a step, flattened per pair: `main` has k−1
/// entries per pair, `lp` has 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphas {
    pub main: Vec<f64>,
    pub lp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Batch means of the weighted terms.
    pub rank_loss: f64,
    pub lp_loss: f64,
    /// (Σ main + β·Σ L_p) / B; the gradients are of this quantity.
    pub total_loss: f64,
    pub alphas: Alphas,
    pub main_profile: Option<ConfidenceProfile>,
    pub lp_profile: Option<ConfidenceProfile>,
}

impl StepOutput {
    pub fn mean_alpha(&self) -> f64 {
        if self.alphas.main.is_empty() {
            return 1.0;
        }
        self.alphas.main.iter().sum::<f64>() / self.alphas.main.len() as f64
    }
}

/// Dense index → slot map for the distinct users or items of a batch, in
/// first-seen order.
struct Slots {
    slot: Vec<u32>,
    ids: Vec<u32>,
}

impl Slots {
    fn new(universe: usize) -> Self {
        Slots {
            slot: vec![u32::MAX; universe],
            ids: Vec::new(),
        }
    }

    fn insert(&mut self, id: u32) -> usize {
        let s = &mut self.slot[id as usize];
        if *s == u32::MAX {
            *s = self.ids.len() as u32;
            self.ids.push(id);
        }
        *s as usize
    }

    fn get(&self, id: u32) -> usize {
        self.slot[id as usize] as usize
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Ranker first-layer projections for the distinct users and items of a
/// batch: `a_u = W1[:, :d]·e_u + b1`, `c_i = W1[:, d:]·e_i`.
struct RankerCache {
    users: Slots,
    items: Slots,
    a: Vec<f64>,
    c: Vec<f64>,
}

impl RankerCache {
    fn build<'a>(model: &PrpModel, pairs: &[(UserIdx, ItemIdx)], items: impl Iterator<Item = &'a [ItemIdx]>) -> Self {
        let d = model.dim();
        let mlp = &model.ranker.mlp;
        let h = mlp.hidden_dim;
        let (w1, b1) = (model.params.values(mlp.w1), model.params.values(mlp.b1));
        let ue = model.params.values(model.emb.user);
        let ie = model.params.values(model.emb.item);
        let mut users = Slots::new(model.emb.n_users);
        let mut item_slots = Slots::new(model.emb.n_items);
        let mut a = Vec::new();
        let mut c = Vec::new();
        for &(u, _) in pairs {
            if users.slot[u as usize] == u32::MAX {
                users.insert(u);
                let start = a.len();
                a.resize(start + h, 0.0);
                linalg::matvec_block(w1, 2 * d, 0, &ue[u as usize * d..(u as usize + 1) * d], &mut a[start..]);
                linalg::axpy(1.0, b1, &mut a[start..]);
            }
        }
        for list in items {
            for &i in list {
                if item_slots.slot[i as usize] == u32::MAX {
                    item_slots.insert(i);
                    let start = c.len();
                    c.resize(start + h, 0.0);
                    linalg::matvec_block(w1, 2 * d, d, &ie[i as usize * d..(i as usize + 1) * d], &mut c[start..]);
                }
            }
        }
        RankerCache {
            users,
            items: item_slots,
            a,
            c,
        }
    }

    fn a(&self, u: UserIdx, h: usize) -> &[f64] {
        let s = self.users.get(u);
        &self.a[s * h..(s + 1) * h]
    }

    fn c(&self, i: ItemIdx, h: usize) -> &[f64] {
        let s = self.items.get(i);
        &self.c[s * h..(s + 1) * h]
    }
}

/// Ranker scores of every candidate of every pair, in candidate order.
pub fn batch_ranker_scores(model: &PrpModel, batch: &Batch) -> Vec<Vec<f64>> {
    let mlp = &model.ranker.mlp;
    let h = mlp.hidden_dim;
    let cache = RankerCache::build(model, &batch.pairs, batch.candidates.iter().map(Vec::as_slice));
    let (w2, b2) = (model.params.values(mlp.w2), model.params.values(mlp.b2)[0]);
    batch
        .pairs
        .iter()
        .zip(&batch.candidates)
        .map(|(&(u, _), cands)| {
            let a = cache.a(u, h);
            cands
                .iter()
                .map(|&i| {
                    let c = cache.c(i, h);
                    let mut r = b2;
                    for j in 0..h {
                        let pre = a[j] + c[j];
                        if pre > 0.0 {
                            r += w2[j] * pre;
                        }
                    }
                    r
                })
                .collect()
        })
        .collect()
}

/// Orders every candidate set and draws the noise for the step.
///
/// With the ranker disabled the candidates are shuffled with `order_rng`
/// (the positive stays first when pinning).
pub fn plan_step<R1, R2>(
    model: &PrpModel,
    batch: &Batch,
    opts: &StepOptions,
    order_rng: &mut R1,
    noise_rng: &mut R2,
) -> Result<StepPlan, StepError>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(StepError::EmptyBatch);
    }
    let rankings = if opts.use_ranker {
        let scores = batch_ranker_scores(model, batch);
        scores
            .iter()
            .zip(&batch.candidates)
            .map(|(s, c)| pseudo_rank(s, c, opts.pin_positive).map(|r| r.items))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        batch
            .candidates
            .iter()
            .map(|c| {
                let mut order = c.clone();
                let start = usize::from(opts.pin_positive);
                order[start..].shuffle(order_rng);
                order
            })
            .collect()
    };
    let etas = if opts.use_lp {
        (0..batch.len()).flat_map(|_| draw_eta(model.dim(), noise_rng)).collect()
    } else {
        Vec::new()
    };
    Ok(StepPlan {
        pairs: batch.pairs.clone(),
        rankings,
        etas,
    })
}

fn validate(model: &PrpModel, plan: &StepPlan, opts: &StepOptions) -> Result<usize, StepError> {
    if plan.is_empty() {
        return Err(StepError::EmptyBatch);
    }
    let k = plan.k();
    if k < 2 {
        return Err(LossError::TooShort(k).into());
    }
    if let Some((index, r)) = plan.rankings.iter().enumerate().find(|(_, r)| r.len() != k) {
        return Err(StepError::RaggedRanking {
            index,
            expected: k,
            got: r.len(),
        });
    }
    if opts.use_lp && plan.etas.len() != plan.len() * model.dim() {
        return Err(StepError::EtaLength {
            expected: plan.len() * model.dim(),
            got: plan.etas.len(),
        });
    }
    Ok(k)
}

fn resolve_alphas(
    pool: &[f64],
    frozen: Option<&[f64]>,
    confidence: bool,
    bins: usize,
) -> Result<(Vec<f64>, Option<ConfidenceProfile>), StepError> {
    if let Some(f) = frozen {
        if f.len() != pool.len() {
            return Err(LossError::AlphaMismatch {
                expected: pool.len(),
                got: f.len(),
            }
            .into());
        }
        return Ok((f.to_vec(), None));
    }
    if confidence {
        let profile = confidence_weights(pool, bins)?;
        Ok((profile.alphas(pool), Some(profile)))
    } else {
        Ok((vec![1.0; pool.len()], None))
    }
}

fn finite(v: f64, what: &'static str) -> Result<f64, StepError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(StepError::NonFiniteLoss(what))
    }
}

/// Evaluates the step loss and accumulates its gradient into the model's
/// gradient buffers. `frozen` replaces the confidence weights (used when
/// differentiating numerically).
pub fn forward_backward(
    model: &mut PrpModel,
    plan: &StepPlan,
    opts: &StepOptions,
    frozen: Option<&Alphas>,
) -> Result<StepOutput, StepError> {
    let k = validate(model, plan, opts)?;
    let b_count = plan.len();
    let inv_b = 1.0 / b_count as f64;
    let d = model.dim();
    let ue_id = model.emb.user;
    let ie_id = model.emb.item;

    // main ranking loss on model scores along π
    let mut main_scores = vec![0.0; b_count * k];
    {
        let ue = model.params.values(ue_id);
        let ie = model.params.values(ie_id);
        for (b, (&(u, _), pi)) in plan.pairs.iter().zip(&plan.rankings).enumerate() {
            let eu = &ue[u as usize * d..(u as usize + 1) * d];
            for (v, &i) in pi.iter().enumerate() {
                main_scores[b * k + v] = linalg::dot(eu, &ie[i as usize * d..(i as usize + 1) * d]);
            }
        }
    }
    let mut main_pool = Vec::with_capacity(b_count * (k - 1));
    for b in 0..b_count {
        main_pool.extend(gap_gradients(&main_scores[b * k..(b + 1) * k])?);
    }
    let (main_alphas, main_profile) = resolve_alphas(
        &main_pool,
        frozen.map(|f| f.main.as_slice()),
        opts.confidence_main,
        opts.bins,
    )?;

    let mut g_user: Vec<(UserIdx, Vec<f64>)> = Vec::new();
    let mut g_item: Vec<(ItemIdx, Vec<f64>)> = Vec::new();
    let mut rank_sum = 0.0;
    let mut score_grads = vec![0.0; b_count * k];
    for b in 0..b_count {
        let out = weighted_ranking_loss(
            &main_scores[b * k..(b + 1) * k],
            &main_alphas[b * (k - 1)..(b + 1) * (k - 1)],
        )?;
        rank_sum += out.loss;
        score_grads[b * k..(b + 1) * k].copy_from_slice(&out.grads);
    }
    {
        let ue = model.params.values(ue_id);
        let ie = model.params.values(ie_id);
        for (b, (&(u, _), pi)) in plan.pairs.iter().zip(&plan.rankings).enumerate() {
            let eu = &ue[u as usize * d..(u as usize + 1) * d];
            let mut gu = vec![0.0; d];
            for (v, &i) in pi.iter().enumerate() {
                let gs = score_grads[b * k + v] * inv_b;
                let ei = &ie[i as usize * d..(i as usize + 1) * d];
                linalg::axpy(gs, ei, &mut gu);
                g_item.push((i, eu.iter().map(|x| gs * x).collect()));
            }
            g_user.push((u, gu));
        }
    }

    let mut lp_sum = 0.0;
    let mut lp_alphas = Vec::new();
    let mut lp_profile = None;
    if opts.use_lp {
        let (sum, alphas, profile) = lp_forward_backward(model, plan, opts, frozen, &mut g_user, &mut g_item)?;
        lp_sum = sum;
        lp_alphas = alphas;
        lp_profile = profile;
    }

    {
        let gu = model.params.grad_mut(ue_id);
        for (u, g) in &g_user {
            linalg::axpy(1.0, g, &mut gu[*u as usize * d..(*u as usize + 1) * d]);
        }
    }
    {
        let gi = model.params.grad_mut(ie_id);
        for (i, g) in &g_item {
            linalg::axpy(1.0, g, &mut gi[*i as usize * d..(*i as usize + 1) * d]);
        }
    }

    let rank_sum = finite(rank_sum, "ranking")?;
    let lp_sum = finite(lp_sum, "noise-supervision")?;
    Ok(StepOutput {
        rank_loss: rank_sum * inv_b,
        lp_loss: lp_sum * inv_b,
        total_loss: finite(crate::loss::total_loss(rank_sum, lp_sum, opts.beta, b_count)?, "total")?,
        alphas: Alphas {
            main: main_alphas,
            lp: lp_alphas,
        },
        main_profile,
        lp_profile,
    })
}

type LpResult = (f64, Vec<f64>, Option<ConfidenceProfile>);

fn lp_forward_backward(
    model: &mut PrpModel,
    plan: &StepPlan,
    opts: &StepOptions,
    frozen: Option<&Alphas>,
    g_user: &mut Vec<(UserIdx, Vec<f64>)>,
    g_item: &mut Vec<(ItemIdx, Vec<f64>)>,
) -> Result<LpResult, StepError> {
    let b_count = plan.len();
    let d = model.dim();
    let mlp = model.ranker.mlp.clone();
    let h = mlp.hidden_dim;
    let stride = 2 * d;
    let thetas = opts.thetas.values();
    let scale = opts.beta / b_count as f64;

    let cache = RankerCache::build(model, &plan.pairs, plan.pairs.iter().map(|(_, p)| std::slice::from_ref(p)));
    let n_u = cache.users.len();

    // noise nets over the distinct users
    let mut eu_rows = Vec::with_capacity(n_u * d);
    for &u in &cache.users.ids {
        eu_rows.extend_from_slice(model.user_vec(u)?);
    }
    let (mu, mu_tape) = model.noise.mu.forward(&model.params, &eu_rows)?;
    let (logvar, lv_tape) = model.noise.logvar.forward(&model.params, &mu)?;
    let sigma: Vec<f64> = logvar.iter().map(|&lv| (0.5 * clamp_logvar(lv)).exp()).collect();

    let w1 = model.params.values(mlp.w1).to_vec();
    let w2 = model.params.values(mlp.w2).to_vec();
    let b2 = model.params.values(mlp.b2)[0];

    // forward per pair
    let mut eps = vec![0.0; b_count * d];
    let mut pre = vec![0.0; b_count * 3 * h];
    let mut scores = vec![0.0; b_count * 3];
    let mut w_eps = vec![0.0; h];
    for (b, &(u, p)) in plan.pairs.iter().enumerate() {
        let us = cache.users.get(u);
        let e = &mut eps[b * d..(b + 1) * d];
        let eta = &plan.etas[b * d..(b + 1) * d];
        for j in 0..d {
            e[j] = mu[us * d + j] + sigma[us * d + j] * eta[j];
        }
        linalg::matvec_block(&w1, stride, d, e, &mut w_eps);
        let (a, c) = (cache.a(u, h), cache.c(p, h));
        for m in 0..3 {
            let row = &mut pre[(b * 3 + m) * h..(b * 3 + m + 1) * h];
            let mut r = b2;
            for j in 0..h {
                row[j] = a[j] + c[j] + thetas[m] * w_eps[j];
                if row[j] > 0.0 {
                    r += w2[j] * row[j];
                }
            }
            scores[b * 3 + m] = r;
        }
    }

    let mut pool = Vec::with_capacity(b_count * 2);
    for b in 0..b_count {
        pool.extend(gap_gradients(&scores[b * 3..(b + 1) * 3])?);
    }
    let (alphas, profile) = resolve_alphas(&pool, frozen.map(|f| f.lp.as_slice()), opts.confidence_lp, opts.bins)?;

    // backward
    let mut g_w1 = vec![0.0; h * stride];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; h];
    let mut g_b2 = 0.0;
    let mut su = vec![0.0; n_u * h];
    let mut sp: Vec<(ItemIdx, Vec<f64>)> = Vec::new();
    let mut sp_slot = Slots::new(model.emb.n_items);
    let mut g_mu = vec![0.0; n_u * d];
    let mut g_lv = vec![0.0; n_u * d];
    let mut lp_sum = 0.0;
    let mut dpre = vec![0.0; h];
    let mut s_acc = vec![0.0; h];
    let mut t_acc = vec![0.0; h];
    let mut g_eps = vec![0.0; d];
    for (b, &(u, p)) in plan.pairs.iter().enumerate() {
        let out = weighted_ranking_loss(&scores[b * 3..(b + 1) * 3], &alphas[b * 2..(b + 1) * 2])?;
        lp_sum += out.loss;
        s_acc.iter_mut().for_each(|x| *x = 0.0);
        t_acc.iter_mut().for_each(|x| *x = 0.0);
        for m in 0..3 {
            let dr = out.grads[m] * scale;
            let row = &pre[(b * 3 + m) * h..(b * 3 + m + 1) * h];
            g_b2 += dr;
            for j in 0..h {
                if row[j] > 0.0 {
                    g_w2[j] += dr * row[j];
                    dpre[j] = dr * w2[j];
                } else {
                    dpre[j] = 0.0;
                }
            }
            linalg::axpy(1.0, &dpre, &mut s_acc);
            linalg::axpy(thetas[m], &dpre, &mut t_acc);
        }
        linalg::axpy(1.0, &s_acc, &mut g_b1);
        let us = cache.users.get(u);
        linalg::axpy(1.0, &s_acc, &mut su[us * h..(us + 1) * h]);
        let ps = sp_slot.insert(p);
        if ps == sp.len() {
            sp.push((p, vec![0.0; h]));
        }
        linalg::axpy(1.0, &s_acc, &mut sp[ps].1);

        let e = &eps[b * d..(b + 1) * d];
        linalg::outer_block_acc(&mut g_w1, stride, d, &t_acc, e);
        g_eps.iter_mut().for_each(|x| *x = 0.0);
        linalg::matvec_t_block_acc(&w1, stride, d, &t_acc, &mut g_eps);
        let eta = &plan.etas[b * d..(b + 1) * d];
        for j in 0..d {
            g_mu[us * d + j] += g_eps[j];
            if logvar_passes_gradient(logvar[us * d + j]) {
                g_lv[us * d + j] += g_eps[j] * eta[j] * 0.5 * sigma[us * d + j];
            }
        }
    }

    for (us, &u) in cache.users.ids.iter().enumerate() {
        let s = &su[us * h..(us + 1) * h];
        let eu = model.user_vec(u)?;
        linalg::outer_block_acc(&mut g_w1, stride, 0, s, eu);
        let mut g = vec![0.0; d];
        linalg::matvec_t_block_acc(&w1, stride, 0, s, &mut g);
        g_user.push((u, g));
    }
    for (p, s) in &sp {
        let ep = model.item_vec(*p)?;
        linalg::outer_block_acc(&mut g_w1, stride, d, s, ep);
        let mut g = vec![0.0; d];
        linalg::matvec_t_block_acc(&w1, stride, d, s, &mut g);
        g_item.push((*p, g));
    }

    let params = &mut model.params;
    linalg::axpy(1.0, &g_w1, params.grad_mut(mlp.w1));
    linalg::axpy(1.0, &g_b1, params.grad_mut(mlp.b1));
    linalg::axpy(1.0, &g_w2, params.grad_mut(mlp.w2));
    params.grad_mut(mlp.b2)[0] += g_b2;

    let (mu_net, lv_net) = (model.noise.mu.clone(), model.noise.logvar.clone());
    let g_mu_from_lv = lv_net.backward(&mut model.params, &lv_tape, &g_lv)?;
    linalg::axpy(1.0, &g_mu_from_lv, &mut g_mu);
    let g_eu = mu_net.backward(&mut model.params, &mu_tape, &g_mu)?;
    for (us, &u) in cache.users.ids.iter().enumerate() {
        g_user.push((u, g_eu[us * d..(us + 1) * d].to_vec()));
    }
    Ok((lp_sum, alphas, profile))
}

/// Pair-by-pair evaluation of the same loss and gradient as
/// [`forward_backward`], built only from the scorer and loss primitives.
pub fn reference_forward_backward(
    model: &mut PrpModel,
    plan: &StepPlan,
    opts: &StepOptions,
    frozen: Option<&Alphas>,
) -> Result<StepOutput, StepError> {
    let k = validate(model, plan, opts)?;
    let b_count = plan.len();
    let inv_b = 1.0 / b_count as f64;
    let d = model.dim();

    let mut main_scores = Vec::with_capacity(b_count);
    for (&(u, _), pi) in plan.pairs.iter().zip(&plan.rankings) {
        let s = pi.iter().map(|&i| model.score(u, i)).collect::<Result<Vec<_>, _>>()?;
        main_scores.push(s);
    }
    let pool: Vec<f64> = main_scores
        .iter()
        .map(|s| gap_gradients(s))
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    let (main_alphas, main_profile) =
        resolve_alphas(&pool, frozen.map(|f| f.main.as_slice()), opts.confidence_main, opts.bins)?;
    let mut rank_sum = 0.0;
    for (b, (&(u, _), pi)) in plan.pairs.iter().zip(&plan.rankings).enumerate() {
        let out = weighted_ranking_loss(&main_scores[b], &main_alphas[b * (k - 1)..(b + 1) * (k - 1)])?;
        rank_sum += out.loss;
        let eu = model.user_vec(u)?.to_vec();
        for (v, &i) in pi.iter().enumerate() {
            let ei = model.item_vec(i)?.to_vec();
            let gs = out.grads[v] * inv_b;
            let (ue, ie) = (model.emb.user, model.emb.item);
            linalg::axpy(gs, &ei, &mut model.params.grad_mut(ue)[u as usize * d..(u as usize + 1) * d]);
            linalg::axpy(gs, &eu, &mut model.params.grad_mut(ie)[i as usize * d..(i as usize + 1) * d]);
        }
    }

    let mut lp_sum = 0.0;
    let mut lp_alphas = Vec::new();
    let mut lp_profile = None;
    if opts.use_lp {
        let mut triples = Vec::with_capacity(b_count);
        let mut pool = Vec::with_capacity(2 * b_count);
        for (b, &(u, p)) in plan.pairs.iter().enumerate() {
            let t = build_noisy_triple_with_eta(model, u, p, opts.thetas, &plan.etas[b * d..(b + 1) * d])?;
            pool.extend(noise_supervision_scores(model, &t)?.g);
            triples.push(t);
        }
        let (alphas, profile) = resolve_alphas(&pool, frozen.map(|f| f.lp.as_slice()), opts.confidence_lp, opts.bins)?;
        for (b, t) in triples.iter().enumerate() {
            lp_sum += noise_supervision_loss(model, t, &alphas[b * 2..(b + 1) * 2], opts.beta * inv_b)?;
        }
        lp_alphas = alphas;
        lp_profile = profile;
    }
    Ok(StepOutput {
        rank_loss: rank_sum * inv_b,
        lp_loss: lp_sum * inv_b,
        total_loss: crate::loss::total_loss(rank_sum, lp_sum, opts.beta, b_count)?,
        alphas: Alphas {
            main: main_alphas,
            lp: lp_alphas,
        },
        main_profile,
        lp_profile,
    })
}
