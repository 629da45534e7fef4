//! Building blocks shared by the encoders: linear maps, layer norm, masked
//! softmax, a pre-norm transformer encoder and a GRU.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;

/// Additive bias for masked logits. Finite so fully masked rows stay finite.
pub const MASKED_LOGIT: f64 = -1e9;

/// Per-forward state: train/eval mode and the seeded dropout stream.
pub struct ForwardCtx {
    train: bool,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            train: true,
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        let p = self.dropout;
        let rng = match (&mut self.rng, self.train && p > 0.0) {
            (Some(rng), true) => rng,
            _ => return Ok(x.clone()),
        };
        let scale = (1.0 / (1.0 - p)) as f32;
        let keep: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let mask = Tensor::from_vec(keep, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// `x W + b` over the last dimension of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.xavier(&format!("{name}.weight"), fan_in, fan_out)?;
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, self.weight.as_tensor())?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}

/// Multiplies the last dimension of an N-d tensor by a 2-d matrix.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().expect("matmul on a scalar");
    let rows = x.elem_count() / inner.max(1);
    let y = x.reshape((rows, inner))?.matmul(w)?;
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(1)?;
    Ok(y.reshape(out)?)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(&format!("{name}.gain"), &[dim])?,
            bias: store.zeros(&format!("{name}.bias"), &[dim])?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.gain.as_tensor(), self.bias.as_tensor(), self.eps)
    }
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gain)?.broadcast_add(bias)?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Logistic function, written through `tanh` so both tails stay finite in
/// value and gradient.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// `ln σ(x)`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?)
}

/// `[B, n]` 0/1 mask to a `[B, 1, 1, n]` additive key bias.
fn key_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, n) = mask.dims2()?;
    Ok(((mask - 1.0)? * -MASKED_LOGIT)?.reshape((b, 1, 1, n))?)
}

fn causal_bias(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = (0..n * n)
        .map(|k| if k % n > k / n { MASKED_LOGIT } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(values, (1, 1, n, n), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, true)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, true)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, true)?,
            heads,
        })
    }

    /// `bias` is broadcastable to `[B, heads, n, n]`.
    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let probs = softmax_last(&scores.broadcast_add(bias)?)?;
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.output.forward(&ctx)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl TransformerLayer {
    fn forward(&self, x: &Tensor, bias: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let a = self.attention.forward(&self.attn_norm.forward(x)?, bias)?;
        let x = (x + ctx.dropout(&a)?)?;
        let f = self
            .ffn_out
            .forward(&self.ffn_in.forward(&self.ffn_norm.forward(&x)?)?.relu()?)?;
        Ok((&x + ctx.dropout(&f)?)?)
    }
}

/// Pre-norm transformer encoder. With zero layers it is the identity; with at
/// least one layer a final layer norm is applied.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Option<LayerNorm>,
    causal: bool,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        layers: usize,
        causal: bool,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(crate::Error::Config(format!(
                "embedding size {d} is not divisible by {heads} heads"
            )));
        }
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(TransformerLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d)?,
                    attention: MultiHeadAttention::new(store, &format!("{p}.attn"), d, heads)?,
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d)?,
                    ffn_in: Linear::new(store, &format!("{p}.ffn_in"), d, 4 * d, true)?,
                    ffn_out: Linear::new(store, &format!("{p}.ffn_out"), 4 * d, d, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if layers.is_empty() {
            None
        } else {
            Some(LayerNorm::new(store, &format!("{name}.final_norm"), d)?)
        };
        Ok(Self {
            layers,
            final_norm,
            causal,
        })
    }

    /// `x`: `[B, n, d]`; `mask`: `[B, n]` with 1 for real positions.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        if self.layers.is_empty() {
            return Ok(x.clone());
        }
        let n = x.dim(1)?;
        let mut bias = key_bias(mask)?;
        if self.causal {
            bias = bias.broadcast_add(&causal_bias(n, x.dtype(), x.device())?)?;
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, &bias, ctx)?;
        }
        match &self.final_norm {
            Some(norm) => norm.forward(&h),
            None => Ok(h),
        }
    }
}

/// Hidden state at the final slot. Sequences are left-padded, so this is the
/// most recent real item of every row.
pub fn last_slot(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(1)?;
    Ok(x.narrow(1, n - 1, 1)?.squeeze(1)?)
}

/// Single-layer GRU.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    d: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &format!("{name}.input"), d, 3 * d, true)?,
            hidden: Linear::new(store, &format!("{name}.hidden"), d, 3 * d, true)?,
            d,
        })
    }

    /// One cell update given the precomputed input projection `[B, 3d]`.
    pub fn cell(&self, x_proj: &Tensor, h: &Tensor) -> Result<Tensor> {
        let d = self.d;
        let h_proj = self.hidden.forward(h)?;
        let r = sigmoid(&(x_proj.narrow(1, 0, d)? + h_proj.narrow(1, 0, d)?)?)?;
        let z = sigmoid(&(x_proj.narrow(1, d, d)? + h_proj.narrow(1, d, d)?)?)?;
        let cand = (x_proj.narrow(1, 2 * d, d)? + r.mul(&h_proj.narrow(1, 2 * d, d)?)?)?.tanh()?;
        Ok((h + (&cand - h)?.mul(&(1.0 - z)?)?)?)
    }

    /// Runs over `[B, n, d]`, skipping masked slots; returns the final state.
    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let x_proj = self.input.forward(x)?;
        let mut h = Tensor::zeros((b, d), x.dtype(), x.device())?;
        for t in 0..n {
            let m = mask.narrow(1, t, 1)?;
            let next = self.cell(&x_proj.narrow(1, t, 1)?.squeeze(1)?, &h)?;
            h = (&h + (next - &h)?.broadcast_mul(&m)?)?;
        }
        Ok(h)
    }
}
