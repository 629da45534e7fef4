//! Soft and hard sequence denoising.
//!
//! A per-item correlation signal `α = (relevance, irrelevance)` is computed
//! against the fused user interest. The soft path turns relevance into a
//! softmax weighting of the history and hands the weighted sequence to a
//! backbone encoder. The hard path samples a straight-through Gumbel-softmax
//! keep/drop decision per item, compacts the kept items and encodes them with
//! a separate transformer.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    last_slot, log_sigmoid, matmul_last, sigmoid, softmax_last, ForwardCtx, Gru,
    TransformerEncoder, MASKED_LOGIT,
};
use crate::params::ParamStore;

/// Per-item `(relevance, irrelevance)` pair, kept as pre-sigmoid logits
/// `[B, n, 2]` so `ln α` stays finite.
#[derive(Clone, Debug)]
pub struct CorrelationWeights {
    pub logits: Tensor,
}

impl CorrelationWeights {
    /// Wraps probabilities in `(0, 1)`.
    pub fn from_probs(alpha: &Tensor) -> Result<Self> {
        let logits = (alpha.log()? - (1.0 - alpha)?.log()?)?;
        Ok(Self { logits })
    }

    pub fn alpha(&self) -> Result<Tensor> {
        sigmoid(&self.logits)
    }

    pub fn log_alpha(&self) -> Result<Tensor> {
        log_sigmoid(&self.logits)
    }

    /// Relevance column `[B, n]`.
    pub fn relevance(&self) -> Result<Tensor> {
        Ok(self.alpha()?.narrow(2, 0, 1)?.squeeze(2)?)
    }

    /// Irrelevance column `[B, n]`.
    pub fn irrelevance(&self) -> Result<Tensor> {
        Ok(self.alpha()?.narrow(2, 1, 1)?.squeeze(2)?)
    }
}

#[derive(Clone, Debug)]
pub struct Correlator {
    pub w3: Var,
    pub w4: Var,
}

impl Correlator {
    pub fn new(store: &mut ParamStore, d: usize) -> Result<Self> {
        Ok(Self {
            w3: store.xavier("denoise.w3", d, d)?,
            w4: store.xavier("denoise.w4", 4 * d, 2)?,
        })
    }

    pub fn forward(&self, h: &Tensor, e_fused: &Tensor) -> Result<CorrelationWeights> {
        correlate(h, e_fused, self.w3.as_tensor(), self.w4.as_tensor())
    }
}

/// `α_i = σ([h'_i ‖ e ‖ h'_i − e ‖ h'_i ⊙ e] W4)` with `h'_i = h_i W3`.
/// The two columns are independent sigmoids, not a softmax.
pub fn correlate(
    h: &Tensor,
    e_fused: &Tensor,
    w3: &Tensor,
    w4: &Tensor,
) -> Result<CorrelationWeights> {
    let hp = matmul_last(h, w3)?;
    let e = e_fused.unsqueeze(1)?.broadcast_as(hp.dims())?;
    let features = Tensor::cat(&[&hp, &e, &(&hp - &e)?, &(&hp * &e)?], 2)?;
    Ok(CorrelationWeights {
        logits: matmul_last(&features, w4)?,
    })
}

/// Softmax of `values` over the positions where `mask` is 1; masked
/// positions get weight exactly zero.
pub fn masked_softmax(values: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let biased = (values + ((mask - 1.0)? * -MASKED_LOGIT)?)?;
    Ok(softmax_last(&biased)?.mul(mask)?)
}

/// Output of the soft path before the backbone.
#[derive(Clone, Debug)]
pub struct SoftDenoised {
    /// `[B, n, d]`, zero at padding.
    pub h_hat: Tensor,
    /// `[B, n]`, a distribution over each row's real positions.
    pub weights: Tensor,
}

/// How the soft weights scale `ĥ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftScale {
    /// The weights as they are, summing to 1 per row.
    #[default]
    Unit,
    /// The weights times the row's real length, so uniform relevance leaves
    /// `h W5` unscaled.
    Length,
}

/// `ĥ_i = softmax(α⁰)_i · h_i W5`, the softmax restricted to real positions.
pub fn soft_denoise(
    h: &Tensor,
    weights: &CorrelationWeights,
    mask: &Tensor,
    w5: &Tensor,
    scale: SoftScale,
) -> Result<SoftDenoised> {
    let w = masked_softmax(&weights.relevance()?, mask)?;
    let factor = match scale {
        SoftScale::Unit => w.clone(),
        SoftScale::Length => w.broadcast_mul(&mask.sum_keepdim(1)?)?,
    };
    let h_hat = matmul_last(h, w5)?.broadcast_mul(&factor.unsqueeze(2)?)?;
    Ok(SoftDenoised { h_hat, weights: w })
}

/// Reference backbone encoders for the soft path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "sasrec-lite")]
    SasrecLite,
    #[serde(rename = "bert4rec-lite")]
    Bert4recLite,
    #[serde(rename = "gru4rec-lite")]
    Gru4recLite,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sasrec-lite" => Ok(Self::SasrecLite),
            "bert4rec-lite" => Ok(Self::Bert4recLite),
            "gru4rec-lite" => Ok(Self::Gru4recLite),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SasrecLite => "sasrec-lite",
            Self::Bert4recLite => "bert4rec-lite",
            Self::Gru4recLite => "gru4rec-lite",
        })
    }
}

/// A sequence encoder `[B, n, d] (+ mask) -> [B, d]`.
pub trait SequenceEncoder {
    fn kind(&self) -> BackboneKind;
    fn encode(&self, x: &Tensor, mask: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor>;
}

/// Causal (SASRec-style) or bidirectional (BERT4Rec-style) transformer with
/// its own position table and last-slot readout.
pub struct TransformerBackbone {
    kind: BackboneKind,
    pub positions: Var,
    pub encoder: TransformerEncoder,
}

impl SequenceEncoder for TransformerBackbone {
    fn kind(&self) -> BackboneKind {
        self.kind
    }

    fn encode(&self, x: &Tensor, mask: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let x = x
            .broadcast_add(self.positions.as_tensor())?
            .broadcast_mul(&mask.unsqueeze(2)?)?;
        let x = ctx.dropout(&x)?;
        last_slot(&self.encoder.forward(&x, mask, ctx)?)
    }
}

/// GRU over the real slots; the final hidden state is the representation.
pub struct GruBackbone {
    pub gru: Gru,
}

impl SequenceEncoder for GruBackbone {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Gru4recLite
    }

    fn encode(&self, x: &Tensor, mask: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let x = ctx.dropout(x)?;
        self.gru.forward(&x, mask)
    }
}

pub fn build_backbone(
    store: &mut ParamStore,
    kind: BackboneKind,
    d: usize,
    n: usize,
    heads: usize,
    layers: usize,
) -> Result<Box<dyn SequenceEncoder>> {
    Ok(match kind {
        BackboneKind::SasrecLite | BackboneKind::Bert4recLite => {
            let causal = kind == BackboneKind::SasrecLite;
            Box::new(TransformerBackbone {
                kind,
                positions: store.normal(
                    "backbone.positions",
                    &[n, d],
                    crate::embedding::INIT_STD,
                )?,
                encoder: TransformerEncoder::new(store, "backbone", d, heads, layers, causal)?,
            })
        }
        BackboneKind::Gru4recLite => Box::new(GruBackbone {
            gru: Gru::new(store, "backbone.gru", d)?,
        }),
    })
}

/// Gumbel(0, 1) draws `-ln(-ln u)` with `u` clamped to `[1e-20, 1 - 1e-7]`.
pub fn sample_gumbel(
    rng: &mut impl Rng,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let u = rng.random::<f64>().clamp(1e-20, 1.0 - 1e-7);
            -(-u.ln()).ln()
        })
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Gumbel-softmax output for every item.
#[derive(Clone, Debug)]
pub struct HardMask {
    /// `[B, n, 2]`. In hard mode the forward value is the one-hot argmax and
    /// the gradient is that of the relaxed sample.
    pub alpha_tilde: Tensor,
    /// The relaxed sample `softmax((ln α + g) / τ)`.
    pub relaxed: Tensor,
    /// Row-major `B x n`; 1 = dropped (irrelevant). Padding is always 1.
    pub keep_drop: Vec<u8>,
    pub max_len: usize,
}

impl HardMask {
    pub fn dropped(&self, b: usize, j: usize) -> bool {
        self.keep_drop[b * self.max_len + j] == 1
    }

    /// `1 − α̃¹` as `[B, n]`.
    pub fn keep_weight(&self) -> Result<Tensor> {
        Ok((1.0 - self.alpha_tilde.narrow(2, 1, 1)?.squeeze(2)?)?)
    }
}

/// `α̃ = softmax((ln α + g) / τ)` per item; `noise = None` disables `g`.
/// `real` is the row-major validity mask used for bookkeeping.
pub fn gumbel_mask(
    weights: &CorrelationWeights,
    tau: f64,
    noise: Option<&Tensor>,
    hard: bool,
    real: &[bool],
) -> Result<HardMask> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut logits = weights.log_alpha()?;
    if let Some(g) = noise {
        logits = (logits + g)?;
    }
    let relaxed = softmax_last(&(logits / tau)?)?;
    let (b, n, _) = relaxed.dims3()?;
    let values: Vec<f64> = relaxed.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let keep_drop: Vec<u8> = (0..b * n)
        .map(|k| {
            let drop = values[2 * k + 1] > values[2 * k];
            u8::from(drop || !real.get(k).copied().unwrap_or(true))
        })
        .collect();
    let alpha_tilde = if hard {
        let one_hot: Vec<f64> = (0..b * n)
            .flat_map(|k| {
                if values[2 * k + 1] > values[2 * k] {
                    [0.0, 1.0]
                } else {
                    [1.0, 0.0]
                }
            })
            .collect();
        let one_hot =
            Tensor::from_vec(one_hot, (b, n, 2), relaxed.device())?.to_dtype(relaxed.dtype())?;
        ((one_hot - relaxed.detach())? + &relaxed)?
    } else {
        relaxed.clone()
    };
    Ok(HardMask {
        alpha_tilde,
        relaxed,
        keep_drop,
        max_len: n,
    })
}

/// The kept items of each row, compacted and left-padded back to `n` slots.
#[derive(Clone, Debug)]
pub struct Reorganized {
    /// `[B, n, d]`; row `b` holds its `t_b` kept vectors in the last slots.
    pub packed: Tensor,
    /// `[B, n]` validity of `packed`.
    pub mask: Tensor,
    /// Original slot indices kept per row, strictly increasing.
    pub kept: Vec<Vec<usize>>,
    /// Rows where everything was dropped and the most relevant item was kept.
    pub fallback_rows: Vec<usize>,
}

impl Reorganized {
    pub fn lengths(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }

    /// Contrastive positives `[B, n]`: 1 at every kept slot, fallback
    /// included. With `through_gate` the kept slots carry the gate's
    /// straight-through gradient; otherwise they are constant labels.
    pub fn positives(&self, gate: &HardMask, through_gate: bool) -> Result<Tensor> {
        let keep = gate.keep_weight()?;
        let (b, n) = keep.dims2()?;
        let mut labels = vec![0.0f64; b * n];
        for (row, kept) in self.kept.iter().enumerate() {
            kept.iter().for_each(|&j| labels[row * n + j] = 1.0);
        }
        let labels = Tensor::from_vec(labels, (b, n), keep.device())?.to_dtype(keep.dtype())?;
        if !through_gate {
            return Ok(labels);
        }
        // Gate value plus a constant lift to 1 on kept slots; only the
        // fallback slot of an all-dropped row is actually lifted.
        Ok((&keep + labels.mul(&(1.0 - keep.detach())?)?)?)
    }
}

/// Keeps the items with `keep_drop = 0` in their original order, scaled by
/// `1 − α̃¹` so the straight-through gradient reaches the gate. A row with
/// nothing kept falls back to its single highest-relevance real item.
pub fn reorganize(
    h: &Tensor,
    mask: &HardMask,
    weights: &CorrelationWeights,
    real: &[bool],
) -> Result<Reorganized> {
    let (b, n, d) = h.dims3()?;
    let scaled = h.broadcast_mul(&mask.keep_weight()?.unsqueeze(2)?)?;
    let zero = Tensor::zeros((1, d), h.dtype(), h.device())?;
    let source = Tensor::cat(
        &[&scaled.reshape((b * n, d))?, &h.reshape((b * n, d))?, &zero],
        0,
    )?;
    let zero_row = (2 * b * n) as u32;

    let relevance: Vec<f64> = weights
        .relevance()?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let mut index = vec![zero_row; b * n];
    let mut valid = vec![0.0f64; b * n];
    let mut kept = Vec::with_capacity(b);
    let mut fallback_rows = Vec::new();
    for row in 0..b {
        let mut keep: Vec<usize> = (0..n)
            .filter(|&j| real[row * n + j] && !mask.dropped(row, j))
            .collect();
        let mut from_raw = false;
        if keep.is_empty() {
            let best = (0..n)
                .filter(|&j| real[row * n + j])
                .max_by(|&a, &c| relevance[row * n + a].total_cmp(&relevance[row * n + c]));
            if let Some(j) = best {
                keep.push(j);
                from_raw = true;
                fallback_rows.push(row);
            }
        }
        let t = keep.len();
        for (i, &j) in keep.iter().enumerate() {
            let slot = row * n + n - t + i;
            let offset = if from_raw { b * n } else { 0 };
            index[slot] = (offset + row * n + j) as u32;
            valid[slot] = 1.0;
        }
        kept.push(keep);
    }
    let index = Tensor::from_vec(index, b * n, h.device())?;
    let packed = source.index_select(&index, 0)?.reshape((b, n, d))?;
    let mask = Tensor::from_vec(valid, (b, n), h.device())?.to_dtype(h.dtype())?;
    Ok(Reorganized {
        packed,
        mask,
        kept,
        fallback_rows,
    })
}

/// Transformer over the compacted sequence plus slot positions; final slot.
pub fn hard_encode(
    reorganized: &Reorganized,
    positions: &Tensor,
    encoder: &TransformerEncoder,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let x = reorganized
        .packed
        .broadcast_add(positions)?
        .broadcast_mul(&reorganized.mask.unsqueeze(2)?)?;
    let x = ctx.dropout(&x)?;
    last_slot(&encoder.forward(&x, &reorganized.mask, ctx)?)
}
