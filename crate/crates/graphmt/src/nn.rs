//! Dense layers with explicit forward caches and analytic backward passes.
//! Everything runs in f64; shapes follow the row convention (sequence or
//! node positions as rows, features as columns). Weights use the
//! [out x in] layout, so `y = x · Wᵀ + b`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "elu" => Some(Activation::Elu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over a slice; a single logit maps to exactly 1.0.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward through softmax: given weights p and upstream dp, return dlogits.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - dot)).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

/// Xavier-uniform fill driven by a seeded ChaCha stream.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    /// [out x in]
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

impl Linear {
    pub fn init(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize, bias: bool) -> Self {
        Self {
            w: xavier(rng, out_dim, in_dim),
            b: bias.then(|| Array1::zeros(out_dim)),
        }
    }

    pub fn zeros_like(&self) -> LinearGrad {
        LinearGrad {
            w: Array2::zeros(self.w.raw_dim()),
            b: self.b.as_ref().map(|b| Array1::zeros(b.raw_dim())),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    /// y = x · Wᵀ + b, rows are positions.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }

    /// Given the forward input and upstream dy, return dx and accumulate
    /// parameter gradients into `grad`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut LinearGrad) -> Array2<f64> {
        grad.w += &dy.t().dot(x);
        if let Some(db) = &mut grad.b {
            *db += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w)
    }
}

impl LinearGrad {
    pub fn add_assign(&mut self, other: &LinearGrad) {
        self.w += &other.w;
        if let (Some(a), Some(b)) = (&mut self.b, &other.b) {
            *a += b;
        }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn init(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> LayerNormGrad {
        LayerNormGrad {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    /// Row-wise normalization with learnable scale and shift.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut x_hat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(x.nrows());
        let mut y = Array2::zeros(x.raw_dim());
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                x_hat[[i, j]] = xh;
                y[[i, j]] = xh * self.gamma[j] + self.beta[j];
            }
        }
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNormGrad,
    ) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..dy.ncols() {
                let g = dy[[i, j]];
                grad.gamma[j] += g * cache.x_hat[[i, j]];
                grad.beta[j] += g;
                let dxhat = g * self.gamma[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * cache.x_hat[[i, j]];
            }
            let is = cache.inv_std[i];
            for j in 0..dy.ncols() {
                let dxhat = dy[[i, j]] * self.gamma[j];
                dx[[i, j]] =
                    is * (dxhat - sum_dxhat / d - cache.x_hat[[i, j]] * sum_dxhat_xhat / d);
            }
        }
        dx
    }
}

impl LayerNormGrad {
    pub fn add_assign(&mut self, other: &LayerNormGrad) {
        self.gamma += &other.gamma;
        self.beta += &other.beta;
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionGrad {
    pub q: LinearGrad,
    pub k: LinearGrad,
    pub v: LinearGrad,
    pub o: LinearGrad,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q_in: Array2<f64>,
    pub kv_in: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax weights per head, each [Tq x Tk].
    pub weights: Vec<Array2<f64>>,
    /// Concatenated per-head contexts, [Tq x d].
    pub context: Array2<f64>,
}

impl AttentionParams {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "dim must be divisible by heads");
        Self {
            q: Linear::init(rng, dim, dim, true),
            k: Linear::init(rng, dim, dim, true),
            v: Linear::init(rng, dim, dim, true),
            o: Linear::init(rng, dim, dim, true),
            heads,
        }
    }

    pub fn zeros_like(&self) -> AttentionGrad {
        AttentionGrad {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    /// Scaled dot-product attention. `key_mask[j] = true` hides key j from
    /// every query; `causal` additionally hides keys with j > i (requires
    /// Tq == Tk). A fully-masked query row would be a caller bug.
    pub fn forward(
        &self,
        q_in: &Array2<f64>,
        kv_in: &Array2<f64>,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> (Array2<f64>, AttentionCache) {
        let d = self.q.out_dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tq = q_in.nrows();
        let tk = kv_in.nrows();

        let q = self.q.forward(q_in);
        let k = self.k.forward(kv_in);
        let v = self.v.forward(kv_in);

        let mut weights = Vec::with_capacity(self.heads);
        let mut context = Array2::zeros((tq, d));
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut w = Array2::zeros((tq, tk));
            for i in 0..tq {
                let mut logits = vec![f64::NEG_INFINITY; tk];
                for j in 0..tk {
                    if causal && j > i {
                        continue;
                    }
                    if key_mask.map_or(false, |m| m[j]) {
                        continue;
                    }
                    logits[j] = qh.row(i).dot(&kh.row(j)) * scale;
                }
                let p = masked_softmax(&logits);
                for j in 0..tk {
                    w[[i, j]] = p[j];
                }
            }
            let ctx = w.dot(&vh);
            context
                .slice_mut(ndarray::s![.., cols])
                .assign(&ctx);
            weights.push(w);
        }

        let out = self.o.forward(&context);
        let cache = AttentionCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            weights,
            context,
        };
        (out, cache)
    }

    /// Returns (d_q_in, d_kv_in) and accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        d_out: &Array2<f64>,
        grad: &mut AttentionGrad,
    ) -> (Array2<f64>, Array2<f64>) {
        let d = self.q.out_dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let d_context = self.o.backward(&cache.context, d_out, &mut grad.o);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
            let w = &cache.weights[h];
            let dctx = d_context.slice(ndarray::s![.., cols.clone()]);

            // dW = dctx · Vᵀ ; dV = Wᵀ · dctx
            let dw = dctx.dot(&vh.t());
            dv.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&w.t().dot(&dctx));

            // softmax backward per query row; masked entries have w = 0 so
            // their logit gradient vanishes automatically.
            let mut ds = Array2::zeros(w.raw_dim());
            for i in 0..w.nrows() {
                let wrow: Vec<f64> = w.row(i).to_vec();
                let dwrow: Vec<f64> = dw.row(i).to_vec();
                let dl = softmax_backward(&wrow, &dwrow);
                for j in 0..w.ncols() {
                    ds[[i, j]] = dl[j] * scale;
                }
            }

            dq.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&ds.dot(&kh));
            dk.slice_mut(ndarray::s![.., cols])
                .assign(&ds.t().dot(&qh));
        }

        let d_q_in = self.q.backward(&cache.q_in, &dq, &mut grad.q);
        let mut d_kv_in = self.k.backward(&cache.kv_in, &dk, &mut grad.k);
        d_kv_in += &self.v.backward(&cache.kv_in, &dv, &mut grad.v);
        (d_q_in, d_kv_in)
    }
}

impl AttentionGrad {
    pub fn add_assign(&mut self, other: &AttentionGrad) {
        self.q.add_assign(&other.q);
        self.k.add_assign(&other.k);
        self.v.add_assign(&other.v);
        self.o.add_assign(&other.o);
    }
}

/// Softmax that tolerates -inf entries (fully masked positions get 0).
fn masked_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "attention row has no visible key");
    let exps: Vec<f64> = logits
        .iter()
        .map(|&x| if x.is_finite() { (x - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
