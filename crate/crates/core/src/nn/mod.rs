//! Minimal neural-network layers with explicit forward caches and analytic
//! backward passes, sized for single-sequence (T×D) activations in `f64`.
//!
//! Nothing here is clever: each layer stores what its backward needs, every
//! backward is checked against finite differences in the tests, and Adam
//! state lives inside [`Param`] so checkpoints capture optimizer moments.

pub mod conv;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        let m = Array2::zeros(value.raw_dim());
        let v = Array2::zeros(value.raw_dim());
        Self { value, grad, m, v }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Parameter traversal for optimizers and checkpoints. Names are stable
/// contract: checkpoints key arrays by them.
pub trait Layer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
}

/// Forward mode: evaluation is deterministic, training samples dropout masks
/// from the provided stream.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Adam with constant learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Begin an optimizer step (advances the shared timestep).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter with the current timestep. `grad_scale`
    /// multiplies raw accumulated gradients (1/effective_batch for
    /// sum-based losses). The gradient is consumed (zeroed).
    pub fn update(&self, p: &mut Param, grad_scale: f64) {
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        ndarray::Zip::from(&mut p.value)
            .and(&mut p.m)
            .and(&mut p.v)
            .and(&p.grad)
            .for_each(|w, m, v, &g| {
                let g = g * grad_scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / b1c;
                let vhat = *v / b2c;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        p.zero_grad();
    }

    /// One update over the given parameters.
    pub fn step(&mut self, params: &mut [&mut Param], grad_scale: f64) {
        self.begin_step();
        for p in params.iter_mut() {
            self.update(p, grad_scale);
        }
    }
}

/// Seeded Xavier-style init.
pub fn init_weight(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Array2<f64> {
    let std = (2.0 / (d_in + d_out) as f64).sqrt();
    Array2::from_shape_fn((d_in, d_out), |_| {
        let u: f64 = rng.random_range(-1.0f64..1.0);
        u * std * 1.7320508
    })
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    cache_x: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self {
            w: Param::new(init_weight(rng, d_in, d_out)),
            b: Param::new(Array2::zeros((1, d_out))),
            cache_x: None,
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Param::new(Array2::zeros((d_in, d_out))),
            b: Param::new(Array2::zeros((1, d_out))),
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.cache_x = Some(x.clone());
        x.dot(&self.w.value) + &self.b.value
    }

    /// Forward without caching, for inference-only paths.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.value) + &self.b.value
    }

    pub fn backward(&mut self, d_y: &Array2<f64>) -> Array2<f64> {
        let x = self.cache_x.as_ref().expect("forward before backward");
        self.w.grad += &x.t().dot(d_y);
        self.b.grad += &d_y.sum_axis(Axis(0)).insert_axis(Axis(0));
        d_y.dot(&self.w.value.t())
    }
}

impl Layer for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    eps: f64,
    cache: Option<(Array2<f64>, Array1<f64>)>, // (xhat, inv_std per row)
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Param::new(Array2::ones((1, d))),
            beta: Param::new(Array2::zeros((1, d))),
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let d = x.shape()[1] as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.shape()[0]);
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            row -= mean[i];
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + self.eps).sqrt();
            row *= is;
            inv_std[i] = is;
        }
        let out = &xhat * &self.gamma.value + &self.beta.value;
        self.cache = Some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, d_y: &Array2<f64>) -> Array2<f64> {
        let (xhat, inv_std) = self.cache.as_ref().expect("forward before backward");
        let d = xhat.shape()[1] as f64;
        self.gamma.grad += &(d_y * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &d_y.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_xhat = d_y * &self.gamma.value;
        let mut d_x = Array2::zeros(xhat.raw_dim());
        for i in 0..xhat.shape()[0] {
            let dxh = d_xhat.row(i);
            let xh = xhat.row(i);
            let sum_dxh = dxh.sum();
            let sum_dxh_xh: f64 = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            for j in 0..xhat.shape()[1] {
                d_x[[i, j]] = inv_std[i] / d * (d * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
            }
        }
        d_x
    }
}

impl Layer for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Inverted dropout; the mask is cached for the backward pass.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    mask: Option<Array2<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p));
        Self { p, mask: None }
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: &mut Mode) -> Array2<f64> {
        match mode {
            Mode::Eval => {
                self.mask = None;
                x.clone()
            }
            Mode::Train(rng) => {
                if self.p == 0.0 {
                    self.mask = None;
                    return x.clone();
                }
                let keep = 1.0 - self.p;
                let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
                    if rng.random_range(0.0..1.0) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let y = x * &mask;
                self.mask = Some(mask);
                y
            }
        }
    }

    pub fn backward(&mut self, d_y: &Array2<f64>) -> Array2<f64> {
        match &self.mask {
            None => d_y.clone(),
            Some(m) => d_y * m,
        }
    }
}

/// Additive attention-logit bias. `NEG_INFINITY` entries mask positions.
#[derive(Debug, Clone)]
pub enum AttnBias {
    None,
    /// Same bias matrix for every head (T_q×T_k).
    Shared(Array2<f64>),
    /// One bias matrix per head.
    PerHead(Vec<Array2<f64>>),
}

impl AttnBias {
    fn get(&self, head: usize) -> Option<&Array2<f64>> {
        match self {
            AttnBias::None => None,
            AttnBias::Shared(m) => Some(m),
            AttnBias::PerHead(v) => Some(&v[head]),
        }
    }
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    s
}

struct HeadCache {
    attn: Array2<f64>,      // post-dropout weights used for the output
    attn_raw: Array2<f64>,  // softmax output (pre-dropout)
    drop_mask: Option<Array2<f64>>,
}

/// Multi-head attention over single sequences (no batch dimension).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub dropout_p: f64,
    cache: Option<MhaCache>,
}

#[derive(Debug, Clone)]
struct MhaCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    attn_raw: Vec<Array2<f64>>,
    drop_masks: Vec<Option<Array2<f64>>>,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize, dropout_p: f64) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must divide into heads");
        Self {
            wq: Linear::new(rng, d_model, d_model),
            wk: Linear::new(rng, d_model, d_model),
            wv: Linear::new(rng, d_model, d_model),
            wo: Linear::new(rng, d_model, d_model),
            n_heads,
            dropout_p,
            cache: None,
        }
    }

    pub fn forward(
        &mut self,
        x_q: &Array2<f64>,
        x_kv: &Array2<f64>,
        bias: &AttnBias,
        mode: &mut Mode,
    ) -> Array2<f64> {
        let d = self.wq.w.value.shape()[0];
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x_q);
        let k = self.wk.forward(x_kv);
        let v = self.wv.forward(x_kv);
        let (tq, _tk) = (q.shape()[0], k.shape()[0]);
        let mut out = Array2::zeros((tq, d));
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols).to_owned();
            let kh = k.slice(cols).to_owned();
            let vh = v.slice(cols).to_owned();
            let mut s = qh.dot(&kh.t()) * scale;
            if let Some(b) = bias.get(h) {
                s += b;
            }
            let attn_raw = softmax_rows(s);
            let (attn, drop_mask) = match mode {
                Mode::Train(rng) if self.dropout_p > 0.0 => {
                    let keep = 1.0 - self.dropout_p;
                    let mask = Array2::from_shape_fn(attn_raw.raw_dim(), |_| {
                        if rng.random_range(0.0..1.0) < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    ((&attn_raw * &mask), Some(mask))
                }
                _ => (attn_raw.clone(), None),
            };
            let oh = attn.dot(&vh);
            out.slice_mut(cols).assign(&oh);
            heads.push(HeadCache {
                attn,
                attn_raw,
                drop_mask,
            });
        }
        let y = self.wo.forward(&out);
        self.cache = Some(MhaCache {
            q,
            k,
            v,
            attn: heads.iter().map(|h| h.attn.clone()).collect(),
            attn_raw: heads.iter().map(|h| h.attn_raw.clone()).collect(),
            drop_masks: heads.into_iter().map(|h| h.drop_mask).collect(),
        });
        y
    }

    /// Returns (d_x_q, d_x_kv). For self-attention, add the two.
    pub fn backward(&mut self, d_y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let cache = self.cache.take().expect("forward before backward");
        let d = self.wq.w.value.shape()[0];
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_out = self.wo.backward(d_y);

        let mut d_q = Array2::zeros(cache.q.raw_dim());
        let mut d_k = Array2::zeros(cache.k.raw_dim());
        let mut d_v = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.n_heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let d_oh = d_out.slice(cols).to_owned();
            let attn = &cache.attn[h];
            let attn_raw = &cache.attn_raw[h];
            let vh = cache.v.slice(cols).to_owned();

            // each head owns a disjoint column block of d_q/d_k/d_v
            let mut d_attn = d_oh.dot(&vh.t());
            d_v.slice_mut(cols).assign(&attn.t().dot(&d_oh));

            if let Some(mask) = &cache.drop_masks[h] {
                d_attn *= mask;
            }
            // softmax backward: dS = A ⊙ (dA − rowsum(dA ⊙ A))
            let mut d_s = Array2::zeros(d_attn.raw_dim());
            for i in 0..d_attn.shape()[0] {
                let a = attn_raw.row(i);
                let da = d_attn.row(i);
                let dot: f64 = a.iter().zip(da.iter()).map(|(x, y)| x * y).sum();
                for j in 0..d_attn.shape()[1] {
                    d_s[[i, j]] = a[j] * (da[j] - dot);
                }
            }
            let qh = cache.q.slice(cols).to_owned();
            let kh = cache.k.slice(cols).to_owned();
            d_q.slice_mut(cols).assign(&(d_s.dot(&kh) * scale));
            d_k.slice_mut(cols).assign(&(d_s.t().dot(&qh) * scale));
        }
        let d_xq = self.wq.backward(&d_q);
        let d_xkv = self.wk.backward(&d_k) + self.wv.backward(&d_v);
        (d_xq, d_xkv)
    }
}

impl Layer for MultiHeadAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.wq.visit_params(&format!("{prefix}.wq"), f);
        self.wk.visit_params(&format!("{prefix}.wk"), f);
        self.wv.visit_params(&format!("{prefix}.wv"), f);
        self.wo.visit_params(&format!("{prefix}.wo"), f);
    }
}

/// Two-layer ReLU feed-forward with dropout after the activation.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
    drop: Dropout,
    cache_h: Option<Array2<f64>>,
}

impl FeedForward {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, d_ff: usize, dropout_p: f64) -> Self {
        Self {
            lin1: Linear::new(rng, d_model, d_ff),
            lin2: Linear::new(rng, d_ff, d_model),
            drop: Dropout::new(dropout_p),
            cache_h: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: &mut Mode) -> Array2<f64> {
        let h = self.lin1.forward(x).mapv(|v| v.max(0.0));
        self.cache_h = Some(h.clone());
        let h = self.drop.forward(&h, mode);
        self.lin2.forward(&h)
    }

    pub fn backward(&mut self, d_y: &Array2<f64>) -> Array2<f64> {
        let d_h = self.drop.backward(&self.lin2.backward(d_y));
        let h = self.cache_h.as_ref().unwrap();
        let d_pre = ndarray::Zip::from(&d_h)
            .and(h)
            .map_collect(|&d, &hv| if hv > 0.0 { d } else { 0.0 });
        self.lin1.backward(&d_pre)
    }
}

impl Layer for FeedForward {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.lin1.visit_params(&format!("{prefix}.lin1"), f);
        self.lin2.visit_params(&format!("{prefix}.lin2"), f);
    }
}

/// Post-norm transformer encoder layer (self-attention + feed-forward).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    drop1: Dropout,
    drop2: Dropout,
}

impl EncoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize, d_ff: usize, p: f64) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(rng, d_model, n_heads, p),
            ff: FeedForward::new(rng, d_model, d_ff, p),
            norm1: LayerNorm::new(d_model),
            norm2: LayerNorm::new(d_model),
            drop1: Dropout::new(p),
            drop2: Dropout::new(p),
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, bias: &AttnBias, mode: &mut Mode) -> Array2<f64> {
        let sa = self.self_attn.forward(x, x, bias, mode);
        let x1 = self.norm1.forward(&(x + &self.drop1.forward(&sa, mode)));
        let ff = self.ff.forward(&x1, mode);
        self.norm2.forward(&(&x1 + &self.drop2.forward(&ff, mode)))
    }

    pub fn backward(&mut self, d_y: &Array2<f64>) -> Array2<f64> {
        let d_res2 = self.norm2.backward(d_y);
        let d_x1 = &d_res2 + &self.ff.backward(&self.drop2.backward(&d_res2));
        let d_res1 = self.norm1.backward(&d_x1);
        let (d_q, d_kv) = self.self_attn.backward(&self.drop1.backward(&d_res1));
        d_res1 + d_q + d_kv
    }
}

impl Layer for EncoderLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.self_attn.visit_params(&format!("{prefix}.self_attn"), f);
        self.ff.visit_params(&format!("{prefix}.ff"), f);
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
    }
}

/// Post-norm transformer decoder layer: biased causal self-attention,
/// cross-attention to the encoder memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
    drop1: Dropout,
    drop2: Dropout,
    drop3: Dropout,
}

impl DecoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize, d_ff: usize, p: f64) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(rng, d_model, n_heads, p),
            cross_attn: MultiHeadAttention::new(rng, d_model, n_heads, p),
            ff: FeedForward::new(rng, d_model, d_ff, p),
            norm1: LayerNorm::new(d_model),
            norm2: LayerNorm::new(d_model),
            norm3: LayerNorm::new(d_model),
            drop1: Dropout::new(p),
            drop2: Dropout::new(p),
            drop3: Dropout::new(p),
        }
    }

    pub fn forward(
        &mut self,
        x: &Array2<f64>,
        memory: &Array2<f64>,
        self_bias: &AttnBias,
        cross_bias: &AttnBias,
        mode: &mut Mode,
    ) -> Array2<f64> {
        let sa = self.self_attn.forward(x, x, self_bias, mode);
        let x1 = self.norm1.forward(&(x + &self.drop1.forward(&sa, mode)));
        let ca = self.cross_attn.forward(&x1, memory, cross_bias, mode);
        let x2 = self.norm2.forward(&(&x1 + &self.drop2.forward(&ca, mode)));
        let ff = self.ff.forward(&x2, mode);
        self.norm3.forward(&(&x2 + &self.drop3.forward(&ff, mode)))
    }

    /// Returns (d_x, d_memory).
    pub fn backward(&mut self, d_y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d_res3 = self.norm3.backward(d_y);
        let d_x2 = &d_res3 + &self.ff.backward(&self.drop3.backward(&d_res3));
        let d_res2 = self.norm2.backward(&d_x2);
        let (d_q2, d_mem) = self.cross_attn.backward(&self.drop2.backward(&d_res2));
        let d_x1 = d_res2 + d_q2;
        let d_res1 = self.norm1.backward(&d_x1);
        let (d_q1, d_kv1) = self.self_attn.backward(&self.drop1.backward(&d_res1));
        (d_res1 + d_q1 + d_kv1, d_mem)
    }
}

impl Layer for DecoderLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.self_attn.visit_params(&format!("{prefix}.self_attn"), f);
        self.cross_attn.visit_params(&format!("{prefix}.cross_attn"), f);
        self.ff.visit_params(&format!("{prefix}.ff"), f);
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
        self.norm3.visit_params(&format!("{prefix}.norm3"), f);
    }
}

/// Sinusoidal positional encoding row for position `pos` (optionally
/// wrapped to a period).
pub fn sinusoidal_row(pos: usize, d: usize) -> Array1<f64> {
    let mut row = Array1::zeros(d);
    for k in 0..d / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / d as f64);
        row[2 * k] = (pos as f64 * freq).sin();
        row[2 * k + 1] = (pos as f64 * freq).cos();
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// FD check of d(loss)/d(input) for a layer closure.
    fn check_input_grad<F, G>(x: &Array2<f64>, weights: &Array2<f64>, fwd: F, analytic: G)
    where
        F: Fn(&Array2<f64>) -> Array2<f64>,
        G: Fn() -> Array2<f64>,
    {
        let loss = |xv: &Array2<f64>| (fwd(xv) * weights).sum();
        let a = analytic();
        let flat_x: Vec<f64> = x.iter().copied().collect();
        let numeric = fd::grad_central(
            |flat: &[f64]| {
                let xm = Array2::from_shape_vec(x.raw_dim(), flat.to_vec()).unwrap();
                loss(&xm)
            },
            &flat_x,
            1e-6,
        );
        let analytic_flat: Vec<f64> = a.iter().copied().collect();
        let err = fd::max_rel_error(&analytic_flat, &numeric, 1e-8);
        assert!(err < 1e-6, "input grad rel err {err}");
    }

    #[test]
    fn linear_grads() {
        let mut r = rng();
        let mut lin = Linear::new(&mut r, 5, 4);
        let x = rand_mat(&mut r, 6, 5);
        let w = rand_mat(&mut r, 6, 4);
        let y = lin.forward(&x);
        assert_eq!(y.shape(), [6, 4]);
        let dx = lin.backward(&w);
        let lin_fwd = lin.clone();
        check_input_grad(&x, &w, |xv| lin_fwd.apply(xv), || dx.clone());

        // weight gradient via fd
        let flat_w: Vec<f64> = lin.w.value.iter().copied().collect();
        let numeric = fd::grad_central(
            |flat| {
                let wm = Array2::from_shape_vec((5, 4), flat.to_vec()).unwrap();
                (x.dot(&wm) * &w).sum()
            },
            &flat_w,
            1e-6,
        );
        let analytic: Vec<f64> = lin.w.grad.iter().copied().collect();
        assert!(fd::max_rel_error(&analytic, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn layernorm_grads() {
        let mut r = rng();
        let mut ln = LayerNorm::new(6);
        // non-trivial gamma/beta
        ln.gamma.value = rand_mat(&mut r, 1, 6);
        ln.beta.value = rand_mat(&mut r, 1, 6);
        let x = rand_mat(&mut r, 4, 6);
        let w = rand_mat(&mut r, 4, 6);
        let _ = ln.forward(&x);
        let dx = ln.backward(&w);
        let ln_ref = ln.clone();
        check_input_grad(
            &x,
            &w,
            |xv| {
                let mut l = ln_ref.clone();
                l.forward(xv)
            },
            || dx.clone(),
        );
    }

    #[test]
    fn mha_grads_with_bias_and_masking() {
        let mut r = rng();
        let mut mha = MultiHeadAttention::new(&mut r, 8, 2, 0.0);
        let xq = rand_mat(&mut r, 5, 8);
        let xkv = rand_mat(&mut r, 7, 8);
        // causal-ish bias with some -inf and finite entries, per head
        let mut b0 = Array2::zeros((5, 7));
        let mut b1 = Array2::zeros((5, 7));
        for i in 0..5 {
            for j in 0..7 {
                if j > i + 2 {
                    b0[[i, j]] = f64::NEG_INFINITY;
                    b1[[i, j]] = f64::NEG_INFINITY;
                } else {
                    b0[[i, j]] = -0.3 * (i as f64 - j as f64).abs();
                    b1[[i, j]] = -0.1 * (i as f64 - j as f64).abs();
                }
            }
        }
        let bias = AttnBias::PerHead(vec![b0, b1]);
        let w = rand_mat(&mut r, 5, 8);
        let _ = mha.forward(&xq, &xkv, &bias, &mut Mode::Eval);
        let (dxq, dxkv) = mha.backward(&w);

        let mha_ref = mha.clone();
        let xkv_ref = xkv.clone();
        let bias_ref = bias.clone();
        check_input_grad(
            &xq,
            &w,
            |xv| {
                let mut m = mha_ref.clone();
                m.forward(xv, &xkv_ref, &bias_ref, &mut Mode::Eval)
            },
            || dxq.clone(),
        );
        let mha_ref2 = mha.clone();
        let xq_ref = xq.clone();
        check_input_grad(
            &xkv,
            &w,
            |xv| {
                let mut m = mha_ref2.clone();
                m.forward(&xq_ref, xv, &bias, &mut Mode::Eval)
            },
            || dxkv.clone(),
        );
    }

    #[test]
    fn decoder_layer_grads() {
        let mut r = rng();
        let mut layer = DecoderLayer::new(&mut r, 8, 2, 16, 0.0);
        let x = rand_mat(&mut r, 4, 8);
        let mem = rand_mat(&mut r, 4, 8);
        let mut causal = Array2::zeros((4, 4));
        for i in 0..4 {
            for j in 0..4 {
                if j > i {
                    causal[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        let mut diag = Array2::from_elem((4, 4), f64::NEG_INFINITY);
        for i in 0..4 {
            diag[[i, i]] = 0.0;
        }
        let sb = AttnBias::Shared(causal);
        let cb = AttnBias::Shared(diag);
        let w = rand_mat(&mut r, 4, 8);
        let _ = layer.forward(&x, &mem, &sb, &cb, &mut Mode::Eval);
        let (dx, dmem) = layer.backward(&w);

        let l1 = layer.clone();
        let (sb1, cb1) = (sb.clone(), cb.clone());
        let mem1 = mem.clone();
        check_input_grad(
            &x,
            &w,
            |xv| {
                let mut l = l1.clone();
                l.forward(xv, &mem1, &sb1, &cb1, &mut Mode::Eval)
            },
            || dx.clone(),
        );
        let l2 = layer.clone();
        let x2 = x.clone();
        check_input_grad(
            &mem,
            &w,
            |mv| {
                let mut l = l2.clone();
                l.forward(&x2, mv, &sb, &cb, &mut Mode::Eval)
            },
            || dmem.clone(),
        );
    }

    #[test]
    fn dropout_masks_consistent_between_passes() {
        let mut r = rng();
        let mut drop = Dropout::new(0.4);
        let x = rand_mat(&mut r, 10, 10);
        let mut mode_rng = ChaCha8Rng::seed_from_u64(3);
        let y = drop.forward(&x, &mut Mode::Train(&mut mode_rng));
        let dy = Array2::ones((10, 10));
        let dx = drop.backward(&dy);
        // zeros in forward are zeros in backward; survivors scaled equally
        for (yy, dd) in y.iter().zip(dx.iter()) {
            if *yy == 0.0 {
                assert_eq!(*dd, 0.0);
            } else {
                assert!((dd - 1.0 / 0.6).abs() < 1e-12);
            }
        }
        // eval is identity
        let ye = drop.forward(&x, &mut Mode::Eval);
        assert_eq!(ye, x);
    }

    #[test]
    fn adam_moves_params_against_gradient() {
        let mut p = Param::new(Array2::from_elem((2, 2), 1.0));
        p.grad.fill(1.0);
        let mut adam = Adam::new(0.01);
        adam.step(&mut [&mut p], 1.0);
        assert!(p.value.iter().all(|&v| v < 1.0));
        assert!(p.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn encoder_layer_grads() {
        let mut r = rng();
        let mut layer = EncoderLayer::new(&mut r, 8, 2, 16, 0.0);
        let x = rand_mat(&mut r, 5, 8);
        let w = rand_mat(&mut r, 5, 8);
        let _ = layer.forward(&x, &AttnBias::None, &mut Mode::Eval);
        let dx = layer.backward(&w);
        let lr = layer.clone();
        check_input_grad(
            &x,
            &w,
            move |xv| {
                let mut l = lr.clone();
                l.forward(xv, &AttnBias::None, &mut Mode::Eval)
            },
            || dx.clone(),
        );
    }
}
