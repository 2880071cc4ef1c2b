//! Transformer building blocks and the AdamW optimizer, on top of the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = ps.add_normal(format!("{name}.weight"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng);
        let bias = ps.add_zeros(format!("{name}.bias"), 1, fan_out);
        Self { weight, bias }
    }

    /// Output layer initialized with a reduced scale.
    pub fn new_scaled(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let weight = ps.add_normal(format!("{name}.weight"), fan_in, fan_out, gain / (fan_in as f64).sqrt(), rng);
        let bias = ps.add_zeros(format!("{name}.bias"), 1, fan_out);
        Self { weight, bias }
    }

    pub fn forward(&self, t: &Tape, x: Var) -> Var {
        let y = t.matmul(x, t.param(self.weight));
        t.add_row(y, t.param(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Mat::filled(1, width, 1.0));
        let bias = ps.add_zeros(format!("{name}.bias"), 1, width);
        Self { gain, bias }
    }

    pub fn forward(&self, t: &Tape, x: Var) -> Var {
        let n = t.layer_norm_rows(x);
        let n = t.mul_row(n, t.param(self.gain));
        t.add_row(n, t.param(self.bias))
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(width.is_multiple_of(heads), "width must be divisible by heads");
        Self {
            query: Linear::new(ps, &format!("{name}.q"), width, width, rng),
            key: Linear::new(ps, &format!("{name}.k"), width, width, rng),
            value: Linear::new(ps, &format!("{name}.v"), width, width, rng),
            out: Linear::new_scaled(ps, &format!("{name}.o"), width, width, 0.5, rng),
            heads,
            width,
        }
    }

    /// `queries` attend over `memory` (pass the same var for self-attention).
    pub fn forward(&self, t: &Tape, queries: Var, memory: Var) -> Var {
        let q = self.query.forward(t, queries);
        let k = self.key.forward(t, memory);
        let v = self.value.forward(t, memory);
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let qh = t.slice_cols(q, h * dh, dh);
                let kh = t.slice_cols(k, h * dh, dh);
                let vh = t.slice_cols(v, h * dh, dh);
                let scores = t.scale(t.matmul_t(qh, kh), scale);
                t.matmul(t.softmax_rows(scores), vh)
            })
            .collect();
        let merged = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads) };
        self.out.forward(t, merged)
    }
}

/// Pre-norm transformer layer with optional cross-attention.
#[derive(Clone, Copy, Debug)]
pub struct TransformerLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerLayer {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, heads: usize, with_cross: bool, rng: &mut impl Rng) -> Self {
        let norm_self = LayerNorm::new(ps, &format!("{name}.ln1"), width);
        let self_attn = Attention::new(ps, &format!("{name}.attn"), width, heads, rng);
        let cross = with_cross.then(|| {
            (LayerNorm::new(ps, &format!("{name}.ln_x"), width), Attention::new(ps, &format!("{name}.xattn"), width, heads, rng))
        });
        Self {
            norm_self,
            self_attn,
            cross,
            norm_ff: LayerNorm::new(ps, &format!("{name}.ln2"), width),
            ff_in: Linear::new(ps, &format!("{name}.ff1"), width, 2 * width, rng),
            ff_out: Linear::new_scaled(ps, &format!("{name}.ff2"), 2 * width, width, 0.5, rng),
        }
    }

    pub fn forward(&self, t: &Tape, x: Var, memory: Option<Var>) -> Var {
        let h = self.norm_self.forward(t, x);
        let x = t.add(x, self.self_attn.forward(t, h, h));
        let x = match (&self.cross, memory) {
            (Some((norm, attn)), Some(mem)) => {
                let h = norm.forward(t, x);
                t.add(x, attn.forward(t, h, mem))
            }
            (None, None) => x,
            _ => panic!("cross-attention memory must be supplied exactly when the layer has cross-attention"),
        };
        let h = self.norm_ff.forward(t, x);
        let h = t.gelu(self.ff_in.forward(t, h));
        t.add(x, self.ff_out.forward(t, h))
    }
}

/// Stack of transformer layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
}

impl TransformerStack {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, heads: usize, depth: usize, with_cross: bool, rng: &mut impl Rng) -> Self {
        let layers = (0..depth).map(|i| TransformerLayer::new(ps, &format!("{name}.{i}"), width, heads, with_cross, rng)).collect();
        Self { layers, final_norm: LayerNorm::new(ps, &format!("{name}.ln_f"), width) }
    }

    pub fn forward(&self, t: &Tape, mut x: Var, memory: Option<Var>) -> Var {
        for layer in &self.layers {
            x = layer.forward(t, x, memory);
        }
        self.final_norm.forward(t, x)
    }
}

/// Fixed sinusoidal features for integer positions or timesteps.
pub fn sinusoidal(position: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: 1.0 }
    }
}

pub struct AdamW {
    config: AdamWConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        Self { config, first: params.zeros_like(), second: params.zeros_like(), step: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        let c = self.config;
        self.step += 1;
        let norm = grads.iter().map(Mat::sum_squares).sum::<f64>().sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (k, g) in grads[i].data().iter().enumerate() {
                let g = g * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                p[k] -= c.lr * (update + c.weight_decay * p[k]);
            }
        }
    }
}

/// Checks that `loaded` has the tensor names and shapes of `expected`, in order.
pub fn check_compatible(expected: &ParamSet, loaded: &ParamSet) -> Result<()> {
    if expected.len() != loaded.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), loaded.len())));
    }
    for ((en, ev), (ln, lv)) in expected.iter().zip(loaded.iter()) {
        if en != ln || ev.shape() != lv.shape() {
            return Err(Error::Checkpoint(format!("tensor {ln} {:?} does not match {en} {:?}", lv.shape(), ev.shape())));
        }
    }
    Ok(())
}

/// Sums per-shard gradient vectors in shard order.
pub fn sum_grads(shards: Vec<Vec<Mat>>) -> Option<Vec<Mat>> {
    let mut it = shards.into_iter();
    let mut total = it.next()?;
    for shard in it {
        for (t, g) in total.iter_mut().zip(&shard) {
            t.add_assign(g);
        }
    }
    Some(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, value_and_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transformer_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let layer = TransformerLayer::new(&mut ps, "l", 8, 2, true, &mut rng);
        let x = Mat::from_fn(3, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
        let mem = Mat::from_fn(2, 8, |i, j| ((i * 5 + j) as f64 * 0.11).cos());
        let loss = |t: &Tape<'_>| {
            let y = layer.forward(t, t.constant(x.clone()), Some(t.constant(mem.clone())));
            t.sum_squares(y)
        };
        let (_, grads) = value_and_grad(&ps, loss);
        for (name, rel) in gradient_check(&ps, &grads, 16, 1e-5, |p| value_and_grad(p, loss).0) {
            assert!(rel < 1e-5, "{name}: {rel}");
        }
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Mat::row_vector(&[3.0, -2.0]));
        let mut opt = AdamW::new(&ps, AdamWConfig { lr: 0.1, clip_norm: 0.0, ..Default::default() });
        for _ in 0..300 {
            let t = Tape::new(&ps);
            let l = t.sum_squares(t.param(w));
            let g = t.backward(l).into_param_grads();
            opt.step(&mut ps, &g);
        }
        assert!(ps.get(w).norm() < 1e-2);
    }
}
