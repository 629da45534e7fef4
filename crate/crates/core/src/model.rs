//! The full denoising recommender and the plain-backbone baseline.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumSchedule;
use crate::dataset::SequenceBatch;
use crate::denoise::{
    build_backbone, gumbel_mask, hard_encode, reorganize, soft_denoise, BackboneKind,
    CorrelationWeights, Correlator, HardMask, SequenceEncoder, SoftScale,
};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::interest::{InterestConfig, InterestExtractor};
use crate::nn::{ForwardCtx, TransformerEncoder, MASKED_LOGIT};
use crate::objective::{
    bpr_loss, rec_loss, scl_loss, score_catalog, total_loss, LossBreakdown, LossParts,
};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Interest extraction, both denoising paths and all losses.
    #[default]
    Msdccl,
    /// The backbone alone on the raw sequence, trained with the recommendation loss.
    Plain,
}

/// Switches that remove one component each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop the hard path together with the contrastive and BPR losses.
    pub no_dl: bool,
    /// No target row in the short-term window during training.
    pub no_ts: bool,
    pub no_bpr: bool,
    /// Curriculum off: every row of every batch is trained on.
    pub no_cl: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneKind,
    pub d: usize,
    pub max_len: usize,
    pub m: usize,
    pub z: usize,
    pub z_vertical: usize,
    pub heads: usize,
    /// Layers of the long-term interest transformer.
    pub layers: usize,
    /// Layers of the hard-path transformer.
    pub hard_layers: usize,
    /// Layers of transformer backbones.
    pub backbone_layers: usize,
    pub dropout: f64,
    pub shared_w1: bool,
    /// Straight-through one-hot gate; otherwise the relaxed sample is used.
    pub gumbel_hard: bool,
    /// Leave positives out of the contrastive denominator.
    pub scl_exclusive: bool,
    /// Mask items already in the input sequence out of the catalog scores.
    pub exclude_seen: bool,
    pub soft_scale: SoftScale,
    /// Let the contrastive loss reach the gate through the straight-through
    /// positives instead of treating them as fixed labels.
    pub scl_through_gate: bool,
    /// Detach the target embedding fed to the short-term interest.
    pub target_stop_grad: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Msdccl,
            backbone: BackboneKind::Gru4recLite,
            d: 100,
            max_len: 50,
            m: 2,
            z: 4,
            z_vertical: 4,
            heads: 2,
            layers: 2,
            hard_layers: 2,
            backbone_layers: 2,
            dropout: 0.2,
            shared_w1: true,
            gumbel_hard: true,
            scl_exclusive: false,
            exclude_seen: false,
            soft_scale: SoftScale::Unit,
            scl_through_gate: false,
            target_stop_grad: false,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("max_len", self.max_len),
            ("m", self.m),
            ("z", self.z),
            ("z_vertical", self.z_vertical),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.d = {} is not divisible by model.heads = {}",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    fn full(&self) -> bool {
        self.variant == Variant::Msdccl
    }
}

/// A [`SequenceBatch`] as tensors.
pub struct BatchTensors {
    pub items: Tensor,
    pub mask: Tensor,
    /// Row-major validity, as used by the gate bookkeeping.
    pub real: Vec<bool>,
    pub targets: Tensor,
    /// Score columns of the targets (item − 1).
    pub target_cols: Tensor,
    pub negatives: Option<Tensor>,
    /// Additive `[B, |V|-1]` bias hiding previously seen items, when enabled.
    pub seen_bias: Option<Tensor>,
}

impl BatchTensors {
    pub fn new(
        batch: &SequenceBatch,
        dtype: DType,
        device: &Device,
        catalog_size: usize,
        exclude_seen: bool,
    ) -> Result<Self> {
        let (b, n) = (batch.rows(), batch.max_len);
        if batch
            .targets
            .iter()
            .any(|&t| t == 0 || t as usize >= catalog_size)
        {
            return Err(Error::Contract("batch target outside the catalog".into()));
        }
        let mask: Vec<f64> = batch
            .mask
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        let seen_bias = if exclude_seen {
            let mut bias = vec![0.0f64; b * (catalog_size - 1)];
            for row in 0..b {
                for (&item, &real) in batch.row(row).iter().zip(batch.mask_row(row)) {
                    if real && item != batch.targets[row] {
                        bias[row * (catalog_size - 1) + item as usize - 1] = MASKED_LOGIT;
                    }
                }
            }
            Some(Tensor::from_vec(bias, (b, catalog_size - 1), device)?.to_dtype(dtype)?)
        } else {
            None
        };
        Ok(Self {
            items: Tensor::from_vec(batch.item_matrix.clone(), (b, n), device)?,
            mask: Tensor::from_vec(mask, (b, n), device)?.to_dtype(dtype)?,
            real: batch.mask.clone(),
            targets: Tensor::from_vec(batch.targets.clone(), b, device)?,
            target_cols: Tensor::from_vec(
                batch.targets.iter().map(|&t| t - 1).collect::<Vec<u32>>(),
                b,
                device,
            )?,
            negatives: if batch.negatives.is_empty() {
                None
            } else {
                Some(Tensor::from_vec(batch.negatives.clone(), b, device)?)
            },
            seen_bias,
        })
    }

    pub fn rows(&self) -> usize {
        self.real.len() / self.items.dims()[1]
    }
}

/// Stochastic inputs of one training forward pass.
pub struct TrainInputs<'a> {
    pub tau: f64,
    pub tau_c: f64,
    /// Gumbel noise `[B, n, 2]`; `None` disables it.
    pub gumbel: Option<&'a Tensor>,
}

/// Everything a training step produces before the curriculum.
pub struct TrainOutput {
    pub rec: Tensor,
    pub scl: Option<Tensor>,
    pub bpr: Option<Tensor>,
    pub weights: Option<CorrelationWeights>,
    pub gate: Option<HardMask>,
    pub fallback_rows: usize,
}

pub struct Msdccl {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub interest: Option<InterestExtractor>,
    pub correlator: Option<Correlator>,
    pub w5: Option<Var>,
    pub backbone: Box<dyn SequenceEncoder>,
    pub hard_encoder: Option<TransformerEncoder>,
}

impl Msdccl {
    pub fn new(config: ModelConfig, catalog_size: usize, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let c = &config;
        let embedding = EmbeddingTable::init(&mut store, catalog_size, c.d, c.max_len)?;
        let (interest, correlator, w5) = if c.full() {
            let icfg = InterestConfig {
                d: c.d,
                m: c.m,
                z: c.z,
                z_vertical: c.z_vertical,
                heads: c.heads,
                layers: c.layers,
                shared_w1: c.shared_w1,
            };
            (
                Some(InterestExtractor::new(&mut store, &icfg)?),
                Some(Correlator::new(&mut store, c.d)?),
                Some(store.xavier("denoise.w5", c.d, c.d)?),
            )
        } else {
            (None, None, None)
        };
        let backbone = build_backbone(
            &mut store,
            c.backbone,
            c.d,
            c.max_len,
            c.heads,
            c.backbone_layers,
        )?;
        let hard_encoder = if c.full() && !c.ablation.no_dl {
            Some(TransformerEncoder::new(
                &mut store,
                "hard",
                c.d,
                c.heads,
                c.hard_layers,
                false,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            embedding,
            interest,
            correlator,
            w5,
            backbone,
            hard_encoder,
        })
    }

    pub fn catalog_size(&self) -> usize {
        self.embedding.catalog_size()
    }

    pub fn tensors(&self, batch: &SequenceBatch) -> Result<BatchTensors> {
        BatchTensors::new(
            batch,
            self.store.dtype(),
            self.store.device(),
            self.catalog_size(),
            self.config.exclude_seen,
        )
    }

    /// Correlation weights and the soft-path representation `ê`.
    fn soft_path(
        &self,
        h: &Tensor,
        mask: &Tensor,
        target: Option<&Tensor>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, Option<CorrelationWeights>)> {
        let (Some(interest), Some(correlator), Some(w5)) =
            (&self.interest, &self.correlator, &self.w5)
        else {
            return Ok((self.backbone.encode(h, mask, ctx)?, None));
        };
        let positions = self.embedding.positions.as_tensor();
        let user = interest.forward(h, positions, mask, target, ctx)?;
        let weights = correlator.forward(h, &user.e_fused)?;
        let soft = soft_denoise(h, &weights, mask, w5.as_tensor(), self.config.soft_scale)?;
        Ok((self.backbone.encode(&soft.h_hat, mask, ctx)?, Some(weights)))
    }

    fn scores(&self, e_hat: &Tensor, bt: &BatchTensors) -> Result<Tensor> {
        let scores = score_catalog(e_hat, &self.embedding.catalog()?)?;
        Ok(match &bt.seen_bias {
            Some(bias) => (scores + bias)?,
            None => scores,
        })
    }

    /// Training forward pass up to the per-row losses.
    pub fn forward_train(
        &self,
        bt: &BatchTensors,
        inputs: &TrainInputs<'_>,
        ctx: &mut ForwardCtx,
    ) -> Result<TrainOutput> {
        let cfg = &self.config;
        let h = self.embedding.lookup(&bt.items, &bt.mask)?;
        let target_vec = self.embedding.vectors(&bt.targets)?;
        let detached = cfg.target_stop_grad.then(|| target_vec.detach());
        let short_target = (!cfg.ablation.no_ts).then(|| detached.as_ref().unwrap_or(&target_vec));
        let (e_hat, weights) = self.soft_path(&h, &bt.mask, short_target, ctx)?;
        let rec = rec_loss(&self.scores(&e_hat, bt)?, &bt.target_cols)?;

        let mut out = TrainOutput {
            rec,
            scl: None,
            bpr: None,
            weights: weights.clone(),
            gate: None,
            fallback_rows: 0,
        };
        let (Some(weights), Some(hard)) = (weights, &self.hard_encoder) else {
            return Ok(out);
        };
        let gate = gumbel_mask(
            &weights,
            inputs.tau,
            inputs.gumbel,
            cfg.gumbel_hard,
            &bt.real,
        )?;
        let reorganized = reorganize(&h, &gate, &weights, &bt.real)?;
        out.fallback_rows = reorganized.fallback_rows.len();
        let positives = reorganized.positives(&gate, cfg.scl_through_gate)?;
        out.scl = Some(scl_loss(
            &e_hat,
            &h,
            &positives,
            &bt.mask,
            inputs.tau_c,
            cfg.scl_exclusive,
        )?);
        if !cfg.ablation.no_bpr {
            let negatives = bt
                .negatives
                .as_ref()
                .ok_or_else(|| Error::Contract("training batch without negatives".into()))?;
            let e_bar = hard_encode(
                &reorganized,
                self.embedding.positions.as_tensor(),
                hard,
                ctx,
            )?;
            out.bpr = Some(bpr_loss(
                &e_bar,
                &target_vec,
                &self.embedding.vectors(negatives)?,
            )?);
        }
        out.gate = Some(gate);
        Ok(out)
    }

    /// Curriculum-masked objective for one batch.
    pub fn loss(
        &self,
        bt: &BatchTensors,
        inputs: &TrainInputs<'_>,
        ctx: &mut ForwardCtx,
        curriculum: &CurriculumSchedule,
        clock: f64,
        lambda: f64,
        beta: f64,
    ) -> Result<(Tensor, LossBreakdown, TrainOutput)> {
        let out = self.forward_train(bt, inputs, ctx)?;
        let per_row: Vec<f64> = out.rec.to_dtype(DType::F64)?.to_vec1()?;
        let include = if self.config.ablation.no_cl {
            vec![true; per_row.len()]
        } else {
            curriculum.select(&per_row, clock)?
        };
        let l2 = if beta > 0.0 {
            Some(self.store.l2()?)
        } else {
            None
        };
        let parts = LossParts {
            rec: &out.rec,
            scl: out.scl.as_ref(),
            bpr: out.bpr.as_ref(),
        };
        let (total, breakdown) = total_loss(&parts, &include, lambda, beta, l2.as_ref())?;
        Ok((total, breakdown, out))
    }

    /// Catalog scores `[B, |V|-1]` for ranking: no target, no gate, no dropout.
    pub fn predict(&self, bt: &BatchTensors) -> Result<Tensor> {
        let mut ctx = ForwardCtx::eval();
        let h = self.embedding.lookup(&bt.items, &bt.mask)?;
        let (e_hat, _) = self.soft_path(&h, &bt.mask, None, &mut ctx)?;
        self.scores(&e_hat, bt)
    }

    /// Eval-mode user representation `ê`.
    pub fn represent(&self, bt: &BatchTensors) -> Result<Tensor> {
        let mut ctx = ForwardCtx::eval();
        let h = self.embedding.lookup(&bt.items, &bt.mask)?;
        Ok(self.soft_path(&h, &bt.mask, None, &mut ctx)?.0)
    }

    /// Eval-mode irrelevance `α¹` per slot `[B, n]`; `None` for the plain variant.
    pub fn irrelevance(&self, bt: &BatchTensors) -> Result<Option<Tensor>> {
        let mut ctx = ForwardCtx::eval();
        let h = self.embedding.lookup(&bt.items, &bt.mask)?;
        let (_, weights) = self.soft_path(&h, &bt.mask, None, &mut ctx)?;
        weights.map(|w| w.irrelevance()).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_batches, Example};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            max_len: 6,
            heads: 2,
            layers: 1,
            hard_layers: 1,
            backbone_layers: 1,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn batch() -> SequenceBatch {
        let examples = vec![
            Example {
                user: 0,
                prefix: vec![1, 2, 3, 4],
                target: 5,
            },
            Example {
                user: 1,
                prefix: vec![7, 8],
                target: 9,
            },
            Example {
                user: 2,
                prefix: vec![3, 9, 11, 12, 13, 14, 15],
                target: 2,
            },
        ];
        let histories = vec![
            vec![1, 2, 3, 4, 5],
            vec![7, 8, 9],
            vec![2, 3, 9, 11, 12, 13, 14, 15],
        ];
        make_batches(&examples, &histories, 20, 6, 8, 1)
            .unwrap()
            .remove(0)
    }

    fn inputs() -> TrainInputs<'static> {
        TrainInputs {
            tau: 0.5,
            tau_c: 0.5,
            gumbel: None,
        }
    }

    #[test]
    fn plain_variant_has_only_rec_loss() {
        let cfg = ModelConfig {
            variant: Variant::Plain,
            ..tiny_config()
        };
        let model = Msdccl::new(cfg, 20, DType::F64, 0).unwrap();
        assert!(model.interest.is_none() && model.hard_encoder.is_none());
        let bt = model.tensors(&batch()).unwrap();
        let out = model
            .forward_train(&bt, &inputs(), &mut ForwardCtx::eval())
            .unwrap();
        assert!(out.scl.is_none() && out.bpr.is_none());
        assert_eq!(out.rec.dims(), &[3]);
    }

    #[test]
    fn full_model_produces_all_losses() {
        let model = Msdccl::new(tiny_config(), 20, DType::F64, 0).unwrap();
        let bt = model.tensors(&batch()).unwrap();
        let out = model
            .forward_train(&bt, &inputs(), &mut ForwardCtx::eval())
            .unwrap();
        for t in [
            &out.rec,
            out.scl.as_ref().unwrap(),
            out.bpr.as_ref().unwrap(),
        ] {
            let v: Vec<f64> = t.to_vec1().unwrap();
            assert_eq!(v.len(), 3);
            assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
        assert_eq!(model.predict(&bt).unwrap().dims(), &[3, 19]);
    }

    #[test]
    fn no_dl_drops_hard_path_parameters() {
        let cfg = ModelConfig {
            ablation: Ablation {
                no_dl: true,
                ..Default::default()
            },
            ..tiny_config()
        };
        let model = Msdccl::new(cfg, 20, DType::F64, 0).unwrap();
        assert!(model.hard_encoder.is_none());
        assert!(model
            .store
            .params()
            .iter()
            .all(|p| !p.name.starts_with("hard")));
    }

    #[test]
    fn seen_items_are_masked_when_requested() {
        let cfg = ModelConfig {
            exclude_seen: true,
            ..tiny_config()
        };
        let model = Msdccl::new(cfg, 20, DType::F64, 0).unwrap();
        let batch = batch();
        let row = batch.users.iter().position(|&u| u == 0).unwrap();
        let bt = model.tensors(&batch).unwrap();
        let s: Vec<Vec<f64>> = model.predict(&bt).unwrap().to_vec2().unwrap();
        assert!(s[row][0] < -1e8 && s[row][3] < -1e8);
        assert!(s[row][4] > -1e8);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            d: 9,
            ..tiny_config()
        };
        assert!(matches!(
            Msdccl::new(bad, 20, DType::F64, 0),
            Err(Error::Config(_))
        ));
        let bad = ModelConfig {
            dropout: 1.0,
            ..tiny_config()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn target_stop_grad_changes_gradient_not_value() {
        let run = |stop: bool| {
            let cfg = ModelConfig {
                target_stop_grad: stop,
                ..tiny_config()
            };
            let model = Msdccl::new(cfg, 20, DType::F64, 0).unwrap();
            let bt = model.tensors(&batch()).unwrap();
            let out = model
                .forward_train(&bt, &inputs(), &mut ForwardCtx::eval())
                .unwrap();
            let loss = out.rec.sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let items = model.store.get("embedding.items").unwrap();
            let g: Vec<f64> = grads
                .get(items)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            (loss.to_scalar::<f64>().unwrap(), g)
        };
        let (a, ga) = run(false);
        let (b, gb) = run(true);
        assert_eq!(a, b);
        assert_ne!(ga, gb);
    }
}
