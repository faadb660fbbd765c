//! Dense f64 parameter storage, one-hidden-layer MLPs with hand-written
//! backward passes, Xavier initialization, Adam with coupled L2, and a
//! central finite-difference gradient checker.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dim {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tape was recorded at parameter generation {tape}, store is at {store}")]
    StaleTape { tape: u64, store: u64 },
    #[error("non-finite gradient in tensor `{0}`; optimizer step aborted")]
    NonFiniteGradient(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("xavier fan sizes must be >= 1 (fan_in={0}, fan_out={1})")]
    BadFan(usize, usize),
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadStep(f64),
}

/// One learnable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone)]
pub struct ParameterTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
    /// Set when a backward pass writes into `grad`; Adam skips untouched
    /// tensors the same way autograd optimizers skip parameters without a
    /// gradient.
    pub touched: bool,
}

impl ParameterTensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        ParameterTensor {
            name: name.to_owned(),
            shape: shape.to_vec(),
            values: vec![0.0; len],
            grad: vec![0.0; len],
            adam_m: vec![0.0; len],
            adam_v: vec![0.0; len],
            step_count: 0,
            touched: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every tensor of a model. `generation` advances on each optimizer
/// step so stale backward tapes can be detected.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<ParameterTensor>,
    generation: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, TensorError> {
        if self.find(name).is_some() {
            return Err(TensorError::DuplicateName(name.to_owned()));
        }
        self.tensors.push(ParameterTensor::zeros(name, shape));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &ParameterTensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut ParameterTensor {
        &mut self.tensors[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].values
    }

    /// Gradient buffer for accumulation; marks the tensor as touched.
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        let t = &mut self.tensors[id.0];
        t.touched = true;
        &mut t.grad
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
            t.touched = false;
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParameterTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(ParameterTensor::len).sum()
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.values.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.tensors.len());
        for (t, v) in self.tensors.iter_mut().zip(snapshot) {
            t.values.copy_from_slice(v);
        }
        self.generation += 1;
    }
}

/// Fills `tensor` from U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_init<R: Rng + ?Sized>(
    tensor: &mut ParameterTensor,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    if fan_in == 0 || fan_out == 0 {
        return Err(TensorError::BadFan(fan_in, fan_out));
    }
    let bound = xavier_bound(fan_in, fan_out);
    for v in &mut tensor.values {
        *v = rng.random_range(-bound..=bound);
    }
    Ok(())
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) mod linalg {
    /// Dot product with four independent accumulators.
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f64; 4];
        let ca = a.chunks_exact(4);
        let cb = b.chunks_exact(4);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            acc[0] += x[0] * y[0];
            acc[1] += x[1] * y[1];
            acc[2] += x[2] * y[2];
            acc[3] += x[3] * y[3];
        }
        let mut tail = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            tail += x * y;
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    /// `y += alpha * x`
    #[inline]
    pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    /// `out = W x` for a row-major block of `W` (columns `col0..col0+x.len()`
    /// of a matrix with `stride` columns).
    pub fn matvec_block(w: &[f64], stride: usize, col0: usize, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * stride + col0..r * stride + col0 + n];
            *o = dot(row, x);
        }
    }

    /// `out += W_blockᵀ y`
    pub fn matvec_t_block_acc(w: &[f64], stride: usize, col0: usize, y: &[f64], out: &mut [f64]) {
        let n = out.len();
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, &w[r * stride + col0..r * stride + col0 + n], out);
            }
        }
    }

    /// `G_block += y xᵀ`
    pub fn outer_block_acc(g: &mut [f64], stride: usize, col0: usize, y: &[f64], x: &[f64]) {
        let n = x.len();
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, x, &mut g[r * stride + col0..r * stride + col0 + n]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `out = W2 act(W1 x + b1) + b2`, weights stored row-major as
/// `[out_rows, in_cols]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Cached activations of one forward pass over `rows` inputs.
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub rows: usize,
    pub input: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    generation: u64,
}

impl Mlp {
    /// Registers `{prefix}.w1`, `.b1`, `.w2`, `.b2`, all zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self, TensorError> {
        Ok(Mlp {
            in_dim,
            hidden_dim,
            out_dim,
            activation,
            w1: store.add(&format!("{prefix}.w1"), &[hidden_dim, in_dim])?,
            b1: store.add(&format!("{prefix}.b1"), &[hidden_dim])?,
            w2: store.add(&format!("{prefix}.w2"), &[out_dim, hidden_dim])?,
            b2: store.add(&format!("{prefix}.b2"), &[out_dim])?,
        })
    }

    /// Xavier weights, zero biases.
    pub fn init_xavier<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        xavier_init(store.tensor_mut(self.w1), self.in_dim, self.hidden_dim, rng)?;
        xavier_init(store.tensor_mut(self.w2), self.hidden_dim, self.out_dim, rng)?;
        store.values_mut(self.b1).iter_mut().for_each(|v| *v = 0.0);
        store.values_mut(self.b2).iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    /// Forward pass over `input.len() / in_dim` row-major rows.
    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<(Vec<f64>, MlpTape), TensorError> {
        if input.len() % self.in_dim != 0 || input.is_empty() {
            return Err(TensorError::Dim {
                context: "mlp input",
                expected: self.in_dim,
                got: input.len(),
            });
        }
        let rows = input.len() / self.in_dim;
        let (w1, b1, w2, b2) = (
            store.values(self.w1),
            store.values(self.b1),
            store.values(self.w2),
            store.values(self.b2),
        );
        let mut hidden_pre = vec![0.0; rows * self.hidden_dim];
        let mut hidden = vec![0.0; rows * self.hidden_dim];
        let mut output = vec![0.0; rows * self.out_dim];
        for r in 0..rows {
            let x = &input[r * self.in_dim..(r + 1) * self.in_dim];
            let pre = &mut hidden_pre[r * self.hidden_dim..(r + 1) * self.hidden_dim];
            linalg::matvec_block(w1, self.in_dim, 0, x, pre);
            for (p, b) in pre.iter_mut().zip(b1) {
                *p += b;
            }
            let h = &mut hidden[r * self.hidden_dim..(r + 1) * self.hidden_dim];
            for (hv, &pv) in h.iter_mut().zip(pre.iter()) {
                *hv = self.activation.apply(pv);
            }
            let out = &mut output[r * self.out_dim..(r + 1) * self.out_dim];
            linalg::matvec_block(w2, self.hidden_dim, 0, h, out);
            for (o, b) in out.iter_mut().zip(b2) {
                *o += b;
            }
        }
        let tape = MlpTape {
            rows,
            input: input.to_vec(),
            hidden_pre,
            hidden,
            generation: store.generation(),
        };
        Ok((output, tape))
    }

    /// Accumulates parameter gradients (`+=`) and returns dL/dinput.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        tape: &MlpTape,
        output_grad: &[f64],
    ) -> Result<Vec<f64>, TensorError> {
        if tape.generation != store.generation() {
            return Err(TensorError::StaleTape {
                tape: tape.generation,
                store: store.generation(),
            });
        }
        if output_grad.len() != tape.rows * self.out_dim {
            return Err(TensorError::Dim {
                context: "mlp output grad",
                expected: tape.rows * self.out_dim,
                got: output_grad.len(),
            });
        }
        let (h, n, o) = (self.hidden_dim, self.in_dim, self.out_dim);
        let mut input_grad = vec![0.0; tape.rows * n];
        let mut hidden_grad = vec![0.0; h];
        for r in 0..tape.rows {
            let go = &output_grad[r * o..(r + 1) * o];
            let hid = &tape.hidden[r * h..(r + 1) * h];
            let pre = &tape.hidden_pre[r * h..(r + 1) * h];
            let x = &tape.input[r * n..(r + 1) * n];
            linalg::outer_block_acc(store.grad_mut(self.w2), h, 0, go, hid);
            linalg::axpy(1.0, go, store.grad_mut(self.b2));
            hidden_grad.iter_mut().for_each(|g| *g = 0.0);
            linalg::matvec_t_block_acc(store.values(self.w2), h, 0, go, &mut hidden_grad);
            for (g, &p) in hidden_grad.iter_mut().zip(pre) {
                *g *= self.activation.derivative(p);
            }
            linalg::axpy(1.0, &hidden_grad, store.grad_mut(self.b1));
            linalg::outer_block_acc(store.grad_mut(self.w1), n, 0, &hidden_grad, x);
            linalg::matvec_t_block_acc(store.values(self.w1), n, 0, &hidden_grad, &mut input_grad[r * n..(r + 1) * n]);
        }
        Ok(input_grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
        }
    }
}

/// One Adam update over every touched tensor, with `l2 * value` added to
/// the gradient first. Gradients are zeroed afterwards. If any touched
/// gradient is non-finite nothing is modified.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<(), TensorError> {
    if let Some(bad) = store
        .tensors
        .iter()
        .find(|t| t.touched && t.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(TensorError::NonFiniteGradient(bad.name.clone()));
    }
    for t in &mut store.tensors {
        if !t.touched {
            continue;
        }
        t.step_count += 1;
        let bc1 = 1.0 - cfg.beta1.powi(t.step_count as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t.step_count as i32);
        for j in 0..t.values.len() {
            let g = t.grad[j] + cfg.l2 * t.values[j];
            let m = cfg.beta1 * t.adam_m[j] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * t.adam_v[j] + (1.0 - cfg.beta2) * g * g;
            t.adam_m[j] = m;
            t.adam_v[j] = v;
            t.values[j] -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            t.grad[j] = 0.0;
        }
        t.touched = false;
    }
    store.generation += 1;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub failures: usize,
    pub tolerance: f64,
    pub worst: Option<GradCheckEntry>,
    pub tensors_covered: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_SCALE_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient produced by `loss_fn` against central
/// differences on `n_coords` coordinates, drawn round-robin over tensors.
///
/// `loss_fn` must return the loss and accumulate its gradient into the
/// store; it is called with gradients zeroed.
pub fn finite_diff_check<F, R>(
    store: &mut ParamStore,
    mut loss_fn: F,
    h: f64,
    tol: f64,
    n_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut ParamStore) -> f64,
    R: Rng + ?Sized,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::BadStep(h));
    }
    store.zero_grad();
    loss_fn(store);
    let analytic: Vec<Vec<f64>> = store.tensors.iter().map(|t| t.grad.clone()).collect();
    store.zero_grad();

    let candidates: Vec<usize> = (0..store.tensors.len()).filter(|&t| !store.tensors[t].is_empty()).collect();
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        failures: 0,
        tolerance: tol,
        worst: None,
        tensors_covered: Vec::new(),
    };
    if candidates.is_empty() {
        return Ok(report);
    }
    for c in 0..n_coords {
        let t = candidates[c % candidates.len()];
        let j = rng.random_range(0..store.tensors[t].len());
        let orig = store.tensors[t].values[j];
        store.tensors[t].values[j] = orig + h;
        let plus = loss_fn(store);
        store.zero_grad();
        store.tensors[t].values[j] = orig - h;
        let minus = loss_fn(store);
        store.zero_grad();
        store.tensors[t].values[j] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[t][j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_SCALE_FLOOR);
        report.coords_checked += 1;
        if rel > tol || !rel.is_finite() {
            report.failures += 1;
        }
        let name = &store.tensors[t].name;
        if !report.tensors_covered.contains(name) {
            report.tensors_covered.push(name.clone());
        }
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some(GradCheckEntry {
                tensor: name.clone(),
                index: j,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn xavier_bounds() {
        assert_eq!(xavier_bound(3, 3), 1.0);
        assert!((xavier_bound(64, 64) - (6.0f64 / 128.0).sqrt()).abs() < 1e-15);
        assert!((xavier_bound(64, 64) - 0.21651).abs() < 1e-5);
        let mut t = ParameterTensor::zeros("w", &[3, 3]);
        xavier_init(&mut t, 3, 3, &mut rng(1)).unwrap();
        assert!(t.values.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(xavier_init(&mut t, 0, 3, &mut rng(1)), Err(TensorError::BadFan(0, 3)));
    }

    #[test]
    fn xavier_variance_matches_uniform_moment() {
        let mut t = ParameterTensor::zeros("w", &[100_000]);
        xavier_init(&mut t, 64, 64, &mut rng(2)).unwrap();
        let b = xavier_bound(64, 64);
        let n = t.len() as f64;
        let mean = t.values.iter().sum::<f64>() / n;
        let var = t.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = b * b / 3.0;
        assert!((var - expected).abs() / expected < 0.05, "var={var} expected={expected}");
    }

    fn mlp_fixture(i: usize, h: usize, o: usize, act: Activation, seed: u64) -> (ParamStore, Mlp) {
        let mut s = ParamStore::new();
        let m = Mlp::new(&mut s, "net", i, h, o, act).unwrap();
        m.init_xavier(&mut s, &mut rng(seed)).unwrap();
        // non-zero biases so they are exercised
        let mut r = rng(seed + 100);
        for id in [m.b1, m.b2] {
            for v in s.values_mut(id) {
                *v = r.random_range(-0.3..0.3);
            }
        }
        (s, m)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut s = ParamStore::new();
        let m = Mlp::new(&mut s, "z", 3, 4, 2, Activation::Relu).unwrap();
        let (out, _) = m.forward(&s, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_identity_network_is_identity() {
        let mut s = ParamStore::new();
        let m = Mlp::new(&mut s, "id", 1, 1, 1, Activation::Identity).unwrap();
        s.values_mut(m.w1)[0] = 1.0;
        s.values_mut(m.w2)[0] = 1.0;
        let (out, _) = m.forward(&s, &[0.7, -3.25]).unwrap();
        assert_eq!(out, vec![0.7, -3.25]);
    }

    #[test]
    fn forward_matches_naive_matrix_arithmetic() {
        let (s, m) = mlp_fixture(4, 8, 2, Activation::Relu, 3);
        let mut r = rng(4);
        let x: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let (out, _) = m.forward(&s, &x).unwrap();
        let (w1, b1, w2, b2) = (s.values(m.w1), s.values(m.b1), s.values(m.w2), s.values(m.b2));
        for row in 0..3 {
            let xr = &x[row * 4..row * 4 + 4];
            let mut hid = [0.0; 8];
            for j in 0..8 {
                let mut acc = b1[j];
                for c in 0..4 {
                    acc += w1[j * 4 + c] * xr[c];
                }
                hid[j] = if acc > 0.0 { acc } else { 0.0 };
            }
            for o in 0..2 {
                let mut acc = b2[o];
                for j in 0..8 {
                    acc += w2[o * 8 + j] * hid[j];
                }
                assert!((out[row * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_width() {
        let (s, m) = mlp_fixture(4, 8, 2, Activation::Relu, 3);
        assert!(matches!(m.forward(&s, &[1.0; 5]), Err(TensorError::Dim { .. })));
    }

    #[test]
    fn zero_output_grad_accumulates_nothing() {
        let (mut s, m) = mlp_fixture(4, 8, 2, Activation::Relu, 5);
        let (_, tape) = m.forward(&s, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let gi = m.backward(&mut s, &tape, &[0.0, 0.0]).unwrap();
        assert!(gi.iter().all(|&g| g == 0.0));
        assert!(s.iter().all(|(_, t)| t.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn linear_backward_is_transposed_product() {
        let (mut s, m) = mlp_fixture(3, 5, 2, Activation::Identity, 6);
        let (_, tape) = m.forward(&s, &[0.5, -1.0, 2.0]).unwrap();
        let go = [0.3, -0.7];
        let gi = m.backward(&mut s, &tape, &go).unwrap();
        let (w1, w2) = (s.values(m.w1), s.values(m.w2));
        for c in 0..3 {
            let mut expected = 0.0;
            for j in 0..5 {
                let w2t_go = w2[j] * go[0] + w2[5 + j] * go[1];
                expected += w1[j * 3 + c] * w2t_go;
            }
            assert!((gi[c] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn stale_tape_rejected() {
        let (mut s, m) = mlp_fixture(2, 3, 1, Activation::Relu, 7);
        let (_, tape) = m.forward(&s, &[0.1, 0.2]).unwrap();
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert!(matches!(m.backward(&mut s, &tape, &[1.0]), Err(TensorError::StaleTape { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mut s, m) = mlp_fixture(4, 8, 2, Activation::Relu, 8);
        let mut r = rng(9);
        let x: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let weights = [0.7, -1.3, 0.4, 2.0];
        let loss = |s: &mut ParamStore| {
            let (out, tape) = m.forward(s, &x).unwrap();
            m.backward(s, &tape, &weights).unwrap();
            out.iter().zip(&weights).map(|(o, w)| o * w).sum::<f64>()
        };
        let report = finite_diff_check(&mut s, loss, 1e-5, 1e-6, 200, &mut rng(10)).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.tensors_covered.len(), 4);
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let (mut s, m) = mlp_fixture(3, 6, 2, Activation::Relu, 11);
        let x = vec![0.3, -0.8, 0.5];
        let (_, tape) = m.forward(&s, &x).unwrap();
        let gi = m.backward(&mut s, &tape, &[1.0, -0.5]).unwrap();
        for c in 0..3 {
            let f = |d: f64| {
                let mut xp = x.clone();
                xp[c] += d;
                let (o, _) = m.forward(&s, &xp).unwrap();
                o[0] - 0.5 * o[1]
            };
            let num = (f(1e-5) - f(-1e-5)) / 2e-5;
            assert!((num - gi[c]).abs() < 1e-8);
        }
    }

    #[test]
    fn accumulation_is_additive() {
        let (mut a, m) = mlp_fixture(3, 4, 2, Activation::Relu, 12);
        let mut b = a.clone();
        let x = [0.2, 0.1, -0.4];
        let (_, ta) = m.forward(&a, &x).unwrap();
        m.backward(&mut a, &ta, &[0.5, 1.0]).unwrap();
        m.backward(&mut a, &ta, &[0.5, 1.0]).unwrap();
        let (_, tb) = m.forward(&b, &x).unwrap();
        m.backward(&mut b, &tb, &[1.0, 2.0]).unwrap();
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            for (ga, gb) in ta.grad.iter().zip(&tb.grad) {
                assert!((ga - gb).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut s = ParamStore::new();
        let id = s.add("p", &[3]).unwrap();
        s.values_mut(id).copy_from_slice(&[1.0, -2.0, 0.5]);
        s.grad_mut(id);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.values(id), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("p", &[1]).unwrap();
        s.grad_mut(id)[0] = 1.0;
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        let moved = -s.values(id)[0];
        assert!((moved - 0.001).abs() < 1e-10, "{moved}");
        assert_eq!(s.grad(id)[0], 0.0);
    }

    #[test]
    fn adam_l2_pulls_toward_zero() {
        let mut s = ParamStore::new();
        let id = s.add("p", &[1]).unwrap();
        s.values_mut(id)[0] = 1.0;
        s.grad_mut(id);
        let cfg = AdamConfig {
            l2: 1e-4,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &cfg).unwrap();
        // g' = 1e-4, m̂/(√v̂ + eps) = 1e-4 / (1e-4 + 1e-8)
        let expected = 1.0 - 0.001 * 1e-4 / (1e-4 + 1e-8);
        assert!((s.values(id)[0] - expected).abs() < 1e-15);
        assert!((1.0 - s.values(id)[0] - 0.001).abs() < 1e-6);
    }

    #[test]
    fn adam_skips_untouched_tensors() {
        let mut s = ParamStore::new();
        let id = s.add("p", &[1]).unwrap();
        s.values_mut(id)[0] = 1.0;
        let cfg = AdamConfig {
            l2: 1e-4,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &cfg).unwrap();
        assert_eq!(s.values(id)[0], 1.0);
        assert_eq!(s.tensor(id).step_count, 0);
    }

    #[test]
    fn adam_aborts_on_non_finite_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("ok", &[1]).unwrap();
        let b = s.add("bad", &[2]).unwrap();
        s.grad_mut(a)[0] = 1.0;
        s.grad_mut(b)[1] = f64::NAN;
        let err = adam_step(&mut s, &AdamConfig::default()).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("bad".into()));
        assert_eq!(s.values(a)[0], 0.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let (mut a, m) = mlp_fixture(3, 4, 2, Activation::Relu, 13);
        let (_, t) = m.forward(&a, &[0.1, 0.2, 0.3]).unwrap();
        m.backward(&mut a, &t, &[1.0, -1.0]).unwrap();
        let mut b = a.clone();
        adam_step(&mut a, &AdamConfig::default()).unwrap();
        adam_step(&mut b, &AdamConfig::default()).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn quadratic_gradient_check_is_exact() {
        let mut s = ParamStore::new();
        let id = s.add("x", &[50]).unwrap();
        let mut r = rng(14);
        for v in s.values_mut(id) {
            *v = r.random_range(-2.0..2.0);
        }
        let loss = |s: &mut ParamStore| {
            let x = s.values(id).to_vec();
            let g = s.grad_mut(id);
            for (gi, xi) in g.iter_mut().zip(&x) {
                *gi += xi;
            }
            0.5 * x.iter().map(|v| v * v).sum::<f64>()
        };
        let report = finite_diff_check(&mut s, loss, 1e-5, 1e-9, 200, &mut rng(15)).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn zero_step_is_rejected() {
        let mut s = ParamStore::new();
        s.add("x", &[1]).unwrap();
        let err = finite_diff_check(&mut s, |_| 0.0, 0.0, 1e-6, 10, &mut rng(0)).unwrap_err();
        assert_eq!(err, TensorError::BadStep(0.0));
    }
}
