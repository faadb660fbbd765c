//! Matrix-factorization scorer, the pseudo-ranker MLP and the
//! user-conditioned Gaussian noise generator.
//!
//! All three read the same user and item embedding tables. Tensor names
//! (`user_emb`, `item_emb`, `ranker.*`, `noise_mu.*`, `noise_logvar.*`) are
//! the checkpoint keys.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{ItemIdx, UserIdx};
use crate::tensor::{linalg, xavier_init, Activation, Mlp, MlpTape, ParamId, ParamStore, TensorError};

pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("user index {0} out of range")]
    UserOutOfRange(UserIdx),
    #[error("item index {0} out of range")]
    ItemOutOfRange(ItemIdx),
    #[error("embedding width {got} does not match model width {expected}")]
    Width { expected: usize, got: usize },
    #[error("noise magnitudes must satisfy 0 = theta1 < theta2 < theta3, got {0:?}")]
    ThetaOrder([f64; 3]),
    #[error("non-finite ranker score at position {0}")]
    NonFiniteScore(usize),
    #[error("candidate list and score list lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Anything that can score the full item universe for a user. The MF model
/// implements it; graph-based scorers would plug in here.
pub trait Scorer {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    /// Writes `score(u, i)` for every item into `out` (length `n_items`).
    fn score_items(&self, u: UserIdx, out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub user: ParamId,
    pub item: ParamId,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
}

/// Shared per-item MLP over `[e_u ; e_i]`: 2d → d → 1.
#[derive(Debug, Clone)]
pub struct RankerNet {
    pub mlp: Mlp,
}

/// `mu = mlp1(e_u)`, `log sigma^2 = mlp2(mu)`, both d → d → d.
#[derive(Debug, Clone)]
pub struct NoiseNet {
    pub mu: Mlp,
    pub logvar: Mlp,
}

/// Every learnable tensor plus the handles into it.
#[derive(Debug, Clone)]
pub struct PrpModel {
    pub params: ParamStore,
    pub emb: EmbeddingModel,
    pub ranker: RankerNet,
    pub noise: NoiseNet,
}

impl PrpModel {
    /// All-zero model; call [`PrpModel::init_xavier`] before training.
    pub fn new(n_users: usize, n_items: usize, dim: usize) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        let user = params.add("user_emb", &[n_users, dim])?;
        let item = params.add("item_emb", &[n_items, dim])?;
        let ranker = Mlp::new(&mut params, "ranker", 2 * dim, dim, 1, Activation::Relu)?;
        let mu = Mlp::new(&mut params, "noise_mu", dim, dim, dim, Activation::Relu)?;
        let logvar = Mlp::new(&mut params, "noise_logvar", dim, dim, dim, Activation::Relu)?;
        Ok(PrpModel {
            params,
            emb: EmbeddingModel {
                user,
                item,
                n_users,
                n_items,
                dim,
            },
            ranker: RankerNet { mlp: ranker },
            noise: NoiseNet { mu, logvar },
        })
    }

    /// Xavier-uniform for the embedding tables and every MLP weight matrix.
    /// Tables use fan_in = d, fan_out = rows.
    pub fn init_xavier<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), ModelError> {
        let (nu, ni, d) = (self.emb.n_users, self.emb.n_items, self.emb.dim);
        xavier_init(self.params.tensor_mut(self.emb.user), d, nu, rng)?;
        xavier_init(self.params.tensor_mut(self.emb.item), d, ni, rng)?;
        self.ranker.mlp.init_xavier(&mut self.params, rng)?;
        self.noise.mu.init_xavier(&mut self.params, rng)?;
        self.noise.logvar.init_xavier(&mut self.params, rng)?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.emb.dim
    }

    pub fn user_vec(&self, u: UserIdx) -> Result<&[f64], ModelError> {
        if (u as usize) >= self.emb.n_users {
            return Err(ModelError::UserOutOfRange(u));
        }
        let d = self.emb.dim;
        Ok(&self.params.values(self.emb.user)[u as usize * d..(u as usize + 1) * d])
    }

    pub fn item_vec(&self, i: ItemIdx) -> Result<&[f64], ModelError> {
        if (i as usize) >= self.emb.n_items {
            return Err(ModelError::ItemOutOfRange(i));
        }
        let d = self.emb.dim;
        Ok(&self.params.values(self.emb.item)[i as usize * d..(i as usize + 1) * d])
    }

    /// s_u(i) = e_u · e_i
    pub fn score(&self, u: UserIdx, i: ItemIdx) -> Result<f64, ModelError> {
        Ok(linalg::dot(self.user_vec(u)?, self.item_vec(i)?))
    }

    /// Scores an arbitrary item embedding (e.g. a perturbed positive).
    pub fn score_embedding(&self, u: UserIdx, e: &[f64]) -> Result<f64, ModelError> {
        if e.len() != self.emb.dim {
            return Err(ModelError::Width {
                expected: self.emb.dim,
                got: e.len(),
            });
        }
        Ok(linalg::dot(self.user_vec(u)?, e))
    }
}

impl Scorer for PrpModel {
    fn n_users(&self) -> usize {
        self.emb.n_users
    }

    fn n_items(&self) -> usize {
        self.emb.n_items
    }

    fn score_items(&self, u: UserIdx, out: &mut [f64]) {
        let d = self.emb.dim;
        let eu = &self.params.values(self.emb.user)[u as usize * d..(u as usize + 1) * d];
        let items = self.params.values(self.emb.item);
        for (i, o) in out.iter_mut().enumerate() {
            *o = linalg::dot(eu, &items[i * d..(i + 1) * d]);
        }
    }
}

/// Ranker scores r_u(i) = mlp([e_u ; e_i]) for each candidate, in input
/// order, with the tape for backpropagation.
pub fn ranker_scores(model: &PrpModel, u: UserIdx, candidates: &[ItemIdx]) -> Result<(Vec<f64>, MlpTape), ModelError> {
    let eu = model.user_vec(u)?;
    let mut input = Vec::with_capacity(candidates.len() * 2 * model.dim());
    for &i in candidates {
        input.extend_from_slice(eu);
        input.extend_from_slice(model.item_vec(i)?);
    }
    Ok(model.ranker.mlp.forward(&model.params, &input)?)
}

/// An ordered candidate list π_u with the ranker scores in π order.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRanking {
    pub items: Vec<ItemIdx>,
    pub scores: Vec<f64>,
}

impl PseudoRanking {
    /// γ_u: 1-based position of `item`, if present.
    pub fn position(&self, item: ItemIdx) -> Option<usize> {
        self.items.iter().position(|&i| i == item).map(|p| p + 1)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Sorts candidates by score descending, ties by ascending item index. With
/// `pin_positive` the first candidate (the positive) is forced to the top and
/// only the rest are sorted.
pub fn pseudo_rank(scores: &[f64], candidates: &[ItemIdx], pin_positive: bool) -> Result<PseudoRanking, ModelError> {
    if scores.len() != candidates.len() {
        return Err(ModelError::Length(candidates.len(), scores.len()));
    }
    if let Some(p) = scores.iter().position(|s| !s.is_finite()) {
        return Err(ModelError::NonFiniteScore(p));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let start = usize::from(pin_positive && !order.is_empty());
    order[start..].sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite")
            .then(candidates[a].cmp(&candidates[b]))
    });
    Ok(PseudoRanking {
        items: order.iter().map(|&p| candidates[p]).collect(),
        scores: order.iter().map(|&p| scores[p]).collect(),
    })
}

/// One reparameterized draw ε_u = μ_u + σ_u ⊙ η.
#[derive(Debug, Clone)]
pub struct NoiseSample {
    pub mu: Vec<f64>,
    /// Unclamped network output.
    pub logvar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eta: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NoiseTape {
    pub mu: MlpTape,
    pub logvar: MlpTape,
}

pub fn draw_eta<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[inline]
pub(crate) fn clamp_logvar(lv: f64) -> f64 {
    lv.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)
}

#[inline]
pub(crate) fn logvar_passes_gradient(lv: f64) -> bool {
    lv > LOGVAR_CLAMP.0 && lv < LOGVAR_CLAMP.1
}

/// Noise draw with a caller-supplied standard-normal vector.
pub fn sample_noise_with_eta(model: &PrpModel, u: UserIdx, eta: &[f64]) -> Result<(NoiseSample, NoiseTape), ModelError> {
    let d = model.dim();
    if eta.len() != d {
        return Err(ModelError::Width {
            expected: d,
            got: eta.len(),
        });
    }
    let (mu, mu_tape) = model.noise.mu.forward(&model.params, model.user_vec(u)?)?;
    let (logvar, lv_tape) = model.noise.logvar.forward(&model.params, &mu)?;
    let sigma: Vec<f64> = logvar.iter().map(|&lv| (0.5 * clamp_logvar(lv)).exp()).collect();
    let eps = (0..d).map(|j| mu[j] + sigma[j] * eta[j]).collect();
    Ok((
        NoiseSample {
            mu,
            logvar,
            sigma,
            eta: eta.to_vec(),
            eps,
        },
        NoiseTape {
            mu: mu_tape,
            logvar: lv_tape,
        },
    ))
}

pub fn sample_noise<R: Rng + ?Sized>(model: &PrpModel, u: UserIdx, rng: &mut R) -> Result<(NoiseSample, NoiseTape), ModelError> {
    let eta = draw_eta(model.dim(), rng);
    sample_noise_with_eta(model, u, &eta)
}

/// 𝒯_θ(e) = e + θ·ε
pub fn inject_noise(e: &[f64], eps: &[f64], theta: f64) -> Result<Vec<f64>, ModelError> {
    if e.len() != eps.len() {
        return Err(ModelError::Width {
            expected: e.len(),
            got: eps.len(),
        });
    }
    Ok(e.iter().zip(eps).map(|(a, b)| a + theta * b).collect())
}

/// Validated noise magnitudes (θ₁, θ₂, θ₃) with θ₁ = 0 < θ₂ < θ₃.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thetas([f64; 3]);

impl Thetas {
    pub fn new(t: [f64; 3]) -> Result<Self, ModelError> {
        if t[0] == 0.0 && t[1] > 0.0 && t[2] > t[1] && t[2].is_finite() {
            Ok(Thetas(t))
        } else {
            Err(ModelError::ThetaOrder(t))
        }
    }

    pub fn values(&self) -> [f64; 3] {
        self.0
    }
}

impl Default for Thetas {
    fn default() -> Self {
        Thetas([0.0, 0.01, 0.1])
    }
}

/// The perturbed positives e_p¹, e_p², e_p³, best first.
#[derive(Debug, Clone)]
pub struct NoisyTriple {
    pub user: UserIdx,
    pub positive: ItemIdx,
    pub thetas: Thetas,
    pub embeddings: [Vec<f64>; 3],
    pub noise: NoiseSample,
    pub tape: NoiseTape,
}

pub fn build_noisy_triple_with_eta(
    model: &PrpModel,
    u: UserIdx,
    positive: ItemIdx,
    thetas: Thetas,
    eta: &[f64],
) -> Result<NoisyTriple, ModelError> {
    let (noise, tape) = sample_noise_with_eta(model, u, eta)?;
    let ep = model.item_vec(positive)?;
    let t = thetas.values();
    let embeddings = [
        inject_noise(ep, &noise.eps, t[0])?,
        inject_noise(ep, &noise.eps, t[1])?,
        inject_noise(ep, &noise.eps, t[2])?,
    ];
    Ok(NoisyTriple {
        user: u,
        positive,
        thetas,
        embeddings,
        noise,
        tape,
    })
}

/// One ε_u draw shared by all three magnitudes.
pub fn build_noisy_triple<R: Rng + ?Sized>(
    model: &PrpModel,
    u: UserIdx,
    positive: ItemIdx,
    thetas: Thetas,
    rng: &mut R,
) -> Result<NoisyTriple, ModelError> {
    let eta = draw_eta(model.dim(), rng);
    build_noisy_triple_with_eta(model, u, positive, thetas, &eta)
}
