//! Training objectives: cross-signal contrastive loss, BPR on the hard-path
//! representation, the catalog cross-entropy, and their weighted total.
//!
//! Every per-sample loss is returned as a `[B]` tensor so the curriculum can
//! rank and mask rows before the batch mean.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{log_softmax_last, softplus, MASKED_LOGIT};

/// Cosine similarity of `e [B, d]` with every `h [B, n, d]` → `[B, n]`.
/// Masked rows of `h` are treated as unit-norm zeros so their gradient stays finite.
pub fn cosine_to_sequence(e: &Tensor, h: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let dot = h.matmul(&e.unsqueeze(2)?)?.squeeze(2)?;
    let h_norm = (h.sqr()?.sum(D::Minus1)? + (1.0 - mask)?)?.sqrt()?;
    let e_norm = (e.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(dot.div(&h_norm)?.broadcast_div(&e_norm)?)
}

/// Cross-signal contrastive loss per row.
///
/// `positive` is `[B, n]` with 1 at items kept by the hard gate. The loss is
/// the positive-weighted mean of the per-item terms. If `positive` carries a
/// gradient to the gate, that mean is smallest when only the items most
/// similar to `ê` are kept, so callers normally pass constant labels. The
/// inclusive form divides by the sum over all real items; the exclusive form
/// pairs each positive only with the non-positives. Rows without positives
/// contribute 0.
pub fn scl_loss(
    e_hat: &Tensor,
    h: &Tensor,
    positive: &Tensor,
    mask: &Tensor,
    tau: f64,
    exclusive: bool,
) -> Result<Tensor> {
    let sim = (cosine_to_sequence(e_hat, h, mask)? / tau)?;
    let pos = positive.mul(mask)?;
    let count = pos.sum(D::Minus1)?.maximum(1.0)?;
    let log_prob = if exclusive {
        let shift = (&sim + ((mask - 1.0)? * -MASKED_LOGIT)?)?
            .max_keepdim(D::Minus1)?
            .detach();
        let scaled = sim.broadcast_sub(&shift)?;
        let ex = scaled.exp()?;
        let negatives = ex.mul(&(1.0 - &pos)?.mul(mask)?)?.sum_keepdim(D::Minus1)?;
        (&scaled - ex.broadcast_add(&negatives)?.log()?)?
    } else {
        log_softmax_last(&(&sim + ((mask - 1.0)? * -MASKED_LOGIT)?)?)?
    };
    Ok(log_prob.mul(&pos)?.sum(D::Minus1)?.div(&count)?.neg()?)
}

/// `−ln σ(ē·h_target − ē·h_negative)` per row.
pub fn bpr_loss(e_bar: &Tensor, target: &Tensor, negative: &Tensor) -> Result<Tensor> {
    let diff = e_bar.mul(&(target - negative)?)?.sum(D::Minus1)?;
    softplus(&diff.neg()?)
}

/// Inner products of `e [B, d]` with the real catalog rows `[|V|-1, d]`.
/// Column `c` scores item `c + 1`; the padding item is not a candidate.
pub fn score_catalog(e: &Tensor, catalog: &Tensor) -> Result<Tensor> {
    Ok(e.matmul(&catalog.t()?)?)
}

/// Clamp applied to `ŷ` inside `ln(1 − ŷ)`.
pub const PROB_CLAMP: f64 = 1e-12;

/// Binary cross-entropy of the catalog softmax against the one-hot target,
/// summed over the catalog: `−Σ_i [y_i ln ŷ_i + (1 − y_i) ln(1 − ŷ_i)]`.
/// `target_cols` holds score columns (item index − 1).
pub fn rec_loss(scores: &Tensor, target_cols: &Tensor) -> Result<Tensor> {
    let log_p = log_softmax_last(scores)?;
    let p = log_p.exp()?.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_not = (1.0 - p)?.log()?;
    let idx = target_cols.unsqueeze(1)?;
    let target_term = log_p.gather(&idx, 1)?.squeeze(1)?;
    let target_not = log_not.gather(&idx, 1)?.squeeze(1)?;
    let others = (log_not.sum(D::Minus1)? - target_not)?;
    Ok((target_term + others)?.neg()?)
}

/// Scalar summary of one batch's losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_scl: f64,
    pub l_bpr: f64,
    pub l_reg: f64,
    pub total: f64,
    /// Unmasked recommendation loss per row, for the curriculum.
    pub per_sample_rec: Vec<f64>,
}

impl LossBreakdown {
    pub fn recombine(&self, lambda: f64, beta: f64) -> f64 {
        self.l_rec + lambda * (self.l_scl + self.l_bpr) + beta * self.l_reg
    }
}

/// Per-row loss tensors of one forward pass.
pub struct LossParts<'a> {
    pub rec: &'a Tensor,
    pub scl: Option<&'a Tensor>,
    pub bpr: Option<&'a Tensor>,
}

/// `mean_{included} [L_rec + λ(L_SCL + L_BPR)] + β‖Θ‖²`.
///
/// `l2` is the squared parameter norm (padding row excluded); `None` means
/// no penalty term.
pub fn total_loss(
    parts: &LossParts<'_>,
    include: &[bool],
    lambda: f64,
    beta: f64,
    l2: Option<&Tensor>,
) -> Result<(Tensor, LossBreakdown)> {
    let rec = parts.rec;
    let (dtype, device) = (rec.dtype(), rec.device());
    let inc: Vec<f64> = include.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let count = inc.iter().sum::<f64>().max(1.0);
    let weight = Tensor::from_vec(inc, rec.dims(), device)?.to_dtype(dtype)?;
    let masked_mean = |t: &Tensor| -> Result<Tensor> { Ok((t.mul(&weight)?.sum_all()? / count)?) };
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };

    let l_rec = masked_mean(rec)?;
    let zero = Tensor::zeros((), dtype, device)?;
    let l_scl = match parts.scl {
        Some(t) => masked_mean(t)?,
        None => zero.clone(),
    };
    let l_bpr = match parts.bpr {
        Some(t) => masked_mean(t)?,
        None => zero.clone(),
    };
    let l_reg = l2.cloned().unwrap_or(zero);
    let total = ((&l_rec + ((&l_scl + &l_bpr)? * lambda)?)? + (&l_reg * beta)?)?;

    let breakdown = LossBreakdown {
        l_rec: scalar(&l_rec)?,
        l_scl: scalar(&l_scl)?,
        l_bpr: scalar(&l_bpr)?,
        l_reg: scalar(&l_reg)?,
        total: scalar(&total)?,
        per_sample_rec: rec.to_dtype(DType::F64)?.to_vec1()?,
    };
    Ok((total, breakdown))
}
