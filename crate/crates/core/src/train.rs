//! Training loop, early stopping, checkpoints and evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{
    leave_one_out_split, make_batches, make_eval_batches, Dataset, Example, SequenceBatch, Split,
};
use crate::denoise::sample_gumbel;
use crate::error::{Error, Result};
use crate::metrics::{rank_of_target, MetricsAccumulator, MetricsReport};
use crate::model::{Msdccl, TrainInputs};
use crate::nn::ForwardCtx;
use crate::optim::{Adam, AdamConfig};

/// Independent seeded streams, one per purpose and position in the run.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init,
    Shuffle { epoch: usize },
    Gumbel { epoch: usize, batch: usize },
    Dropout { epoch: usize, batch: usize },
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    let (tag, a, b) = match stream {
        Stream::Init => (1u64, 0, 0),
        Stream::Shuffle { epoch } => (2, epoch, 0),
        Stream::Gumbel { epoch, batch } => (3, epoch, batch),
        Stream::Dropout { epoch, batch } => (4, epoch, batch),
    };
    splitmix(splitmix(splitmix(splitmix(seed) ^ tag) ^ a as u64) ^ b as u64)
}

/// A split dataset ready for training.
pub struct PreparedData {
    pub split: Split,
    pub catalog_size: usize,
    pub train_examples: Vec<Example>,
    pub users: usize,
    pub interactions: usize,
}

impl PreparedData {
    pub fn from_dataset(dataset: &Dataset, config: &RunConfig) -> Result<Self> {
        let split = leave_one_out_split(&dataset.sequences);
        let train_examples = split.training_examples(
            config.data.training_mode,
            (config.data.targets_per_user > 0).then_some(config.data.targets_per_user),
        );
        if train_examples.is_empty() {
            return Err(Error::EmptyDataset(
                "no training examples after the split".into(),
            ));
        }
        Ok(Self {
            catalog_size: dataset.catalog_size(),
            train_examples,
            users: dataset.sequences.len(),
            interactions: dataset.interaction_count(),
            split,
        })
    }

    /// Loads and filters the configured interaction file.
    pub fn load(config: &RunConfig) -> Result<(Dataset, Self)> {
        let dataset = Dataset::load(&config.data.path, config.data.format)?
            .core_filter(config.data.min_count)?;
        let prepared = Self::from_dataset(&dataset, config)?;
        Ok((dataset, prepared))
    }
}

/// One line of `epochs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_scl: f64,
    pub l_bpr: f64,
    pub l_reg: f64,
    pub loss: f64,
    #[serde(rename = "hr@20_valid")]
    pub hr20_valid: f64,
    pub tau: f64,
    pub tau_c: f64,
    pub mu: f64,
    /// Fraction of rows admitted by the curriculum.
    pub included: f64,
    pub fallback_rows: usize,
    /// Fraction of real items the hard gate kept.
    #[serde(default)]
    pub kept: f64,
}

/// Everything besides parameters and moments needed to resume a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub tau: f64,
    pub tau_c: f64,
    pub best_hr20: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub history: Vec<EpochLog>,
    pub stopped: bool,
}

impl TrainState {
    /// Books one finished epoch's validation HR@20; true when it is a new best.
    pub fn record(&mut self, hr20: f64) -> bool {
        self.epoch += 1;
        if hr20 > self.best_hr20 || self.epoch == 1 {
            self.best_hr20 = hr20;
            self.best_epoch = self.epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    catalog_size: usize,
    state: TrainState,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Msdccl,
    pub adam: Adam,
    pub state: TrainState,
    pub data: PreparedData,
    pub run_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: RunConfig, data: PreparedData, run_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let dtype = if config.train.double {
            DType::F64
        } else {
            DType::F32
        };
        let model = Msdccl::new(
            config.model.clone(),
            data.catalog_size,
            dtype,
            stream_seed(config.seed, Stream::Init),
        )?;
        let adam = Adam::new(
            &model.store,
            AdamConfig {
                lr: config.train.lr,
                ..Default::default()
            },
        )?;
        let state = TrainState {
            tau: config.train.tau,
            tau_c: config.train.tau_c,
            ..Default::default()
        };
        if let Some(dir) = &run_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), config.to_toml()?)?;
        }
        Ok(Self {
            config,
            model,
            adam,
            state,
            data,
            run_dir,
        })
    }

    /// Continues from `checkpoint`, which must come from the same data.
    pub fn resume(path: &Path, data: PreparedData, run_dir: Option<PathBuf>) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let meta: CheckpointMeta = loaded.meta_as()?;
        if meta.catalog_size != data.catalog_size {
            return Err(Error::Checkpoint(format!(
                "checkpoint catalog has {} rows, dataset has {}",
                meta.catalog_size, data.catalog_size
            )));
        }
        let mut trainer = Self::new(meta.config, data, None)?;
        trainer
            .model
            .store
            .load_from(&loaded.with_prefix("param."))?;
        trainer.adam.load_state(
            &trainer.model.store,
            meta.state.step,
            &loaded.with_prefix("opt."),
        )?;
        trainer.state = meta.state;
        trainer.run_dir = run_dir;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<_> = self
            .model
            .store
            .params()
            .iter()
            .map(|p| (format!("param.{}", p.name), p.var.as_tensor().clone()))
            .collect();
        tensors.extend(
            self.adam
                .state(&self.model.store)
                .into_iter()
                .map(|(n, t)| (format!("opt.{n}"), t)),
        );
        let meta = CheckpointMeta {
            config: self.config.clone(),
            catalog_size: self.data.catalog_size,
            state: self.state.clone(),
        };
        checkpoint::save(path, &meta, &tensors)
    }

    fn dump_batch(&self, batch: &SequenceBatch, epoch: usize, index: usize) {
        let Some(dir) = &self.run_dir else { return };
        let dump = serde_json::json!({
            "epoch": epoch,
            "batch": index,
            "users": batch.users,
            "items": batch.item_matrix,
            "targets": batch.targets,
            "negatives": batch.negatives,
        });
        if let Err(e) = fs::write(dir.join("nonfinite_batch.json"), dump.to_string()) {
            log::error!("could not write the diagnostic batch dump: {e}");
        }
    }

    /// One pass over the training examples followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let cfg = &self.config;
        let t = &cfg.train;
        let batches = make_batches(
            &self.data.train_examples,
            &self.data.split.histories,
            self.data.catalog_size,
            cfg.model.max_len,
            t.batch_size,
            stream_seed(cfg.seed, Stream::Shuffle { epoch }),
        )?;
        let dtype = self.model.store.dtype();
        let device = self.model.store.device().clone();
        let (mut sums, mut included, mut fallback_rows) = ([0.0f64; 5], 0usize, 0usize);
        let (mut kept, mut real) = (0usize, 0usize);
        for (index, batch) in batches.iter().enumerate() {
            let bt = self.model.tensors(batch)?;
            let noise = if cfg.model.variant == crate::model::Variant::Msdccl
                && !cfg.model.ablation.no_dl
            {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                    cfg.seed,
                    Stream::Gumbel {
                        epoch,
                        batch: index,
                    },
                ));
                Some(sample_gumbel(
                    &mut rng,
                    &[batch.rows(), batch.max_len, 2],
                    dtype,
                    &device,
                )?)
            } else {
                None
            };
            let inputs = TrainInputs {
                tau: self.state.tau,
                tau_c: self.state.tau_c,
                gumbel: noise.as_ref(),
            };
            let mut ctx = ForwardCtx::train(
                cfg.model.dropout,
                stream_seed(
                    cfg.seed,
                    Stream::Dropout {
                        epoch,
                        batch: index,
                    },
                ),
            );
            let clock = cfg.curriculum.time(epoch, index, batches.len());
            let (total, parts, out) = self.model.loss(
                &bt,
                &inputs,
                &mut ctx,
                &cfg.curriculum,
                clock,
                t.lambda,
                t.beta,
            )?;
            if !parts.total.is_finite() || parts.per_sample_rec.iter().any(|v| !v.is_finite()) {
                self.dump_batch(batch, epoch, index);
                return Err(Error::NonFinite {
                    epoch,
                    batch: index,
                    detail: format!(
                        "l_rec {} l_scl {} l_bpr {} l_reg {}",
                        parts.l_rec, parts.l_scl, parts.l_bpr, parts.l_reg
                    ),
                });
            }
            log::debug!("epoch {epoch} batch {index}: loss {:.5}", parts.total);
            let grads = total.backward()?;
            self.adam.step(&self.model.store, &grads)?;
            self.state.step += 1;
            if self.state.step % t.anneal_period as u64 == 0 {
                self.state.tau = (self.state.tau * t.anneal_factor).max(t.tau_floor);
                self.state.tau_c = (self.state.tau_c * t.anneal_factor).max(t.tau_floor);
            }
            for (s, v) in sums.iter_mut().zip([
                parts.l_rec,
                parts.l_scl,
                parts.l_bpr,
                parts.l_reg,
                parts.total,
            ]) {
                *s += v;
            }
            included += if cfg.model.ablation.no_cl {
                batch.rows()
            } else {
                cfg.curriculum
                    .select(&parts.per_sample_rec, clock)?
                    .iter()
                    .filter(|&&b| b)
                    .count()
            };
            fallback_rows += out.fallback_rows;
            if let Some(gate) = &out.gate {
                real += bt.real.iter().filter(|&&r| r).count();
                kept += gate.keep_drop.iter().filter(|&&k| k == 0).count();
            }
        }
        let nb = batches.len().max(1) as f64;
        let valid = evaluate(
            &self.model,
            &self.data.split.valid,
            t.eval_batch_size,
            &t.ks,
        )?;
        let hr20 = valid.hr_at(20).unwrap_or(0.0);
        let log = EpochLog {
            epoch: epoch + 1,
            l_rec: sums[0] / nb,
            l_scl: sums[1] / nb,
            l_bpr: sums[2] / nb,
            l_reg: sums[3] / nb,
            loss: sums[4] / nb,
            hr20_valid: hr20,
            tau: self.state.tau,
            tau_c: self.state.tau_c,
            mu: if cfg.model.ablation.no_cl {
                1.0
            } else {
                cfg.curriculum.mu(epoch as f64)?
            },
            included: included as f64 / self.data.train_examples.len() as f64,
            fallback_rows,
            kept: if real > 0 {
                kept as f64 / real as f64
            } else {
                0.0
            },
        };
        self.state.history.push(log.clone());
        if self.state.record(hr20) {
            if let Some(dir) = &self.run_dir {
                self.save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = &self.run_dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("epochs.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&log)?)?;
            self.save(&dir.join("last.ckpt"))?;
        }
        Ok(log)
    }

    pub fn should_stop(&self) -> bool {
        self.state.stopped
            || self.state.since_improvement >= self.config.train.patience
            || self.state.epoch >= self.config.train.max_epochs
    }

    /// Trains until early stopping or the epoch cap.
    pub fn fit(&mut self) -> Result<()> {
        while !self.should_stop() {
            let log = self.run_epoch()?;
            log::info!(
                "epoch {:>3}  loss {:.4}  rec {:.4}  scl {:.4}  bpr {:.4}  hr@20 {:.4}  tau {:.3}  mu {:.3}",
                log.epoch, log.loss, log.l_rec, log.l_scl, log.l_bpr, log.hr20_valid, log.tau, log.mu
            );
        }
        self.state.stopped = true;
        Ok(())
    }
}

/// Full-catalog metrics of `model` over `examples`.
pub fn evaluate(
    model: &Msdccl,
    examples: &[Example],
    batch_size: usize,
    ks: &[usize],
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let mut acc = MetricsAccumulator::new(ks);
    for batch in make_eval_batches(examples, model.config.max_len, batch_size) {
        let bt = model.tensors(&batch)?;
        let scores: Vec<Vec<f64>> = model.predict(&bt)?.to_dtype(DType::F64)?.to_vec2()?;
        for (row, &target) in scores.iter().zip(&batch.targets) {
            acc.push(rank_of_target(row, target as usize - 1));
        }
    }
    Ok(acc.finish())
}

/// Model and configuration stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(RunConfig, Msdccl, TrainState)> {
    let loaded = checkpoint::load(path)?;
    let meta: CheckpointMeta = loaded.meta_as()?;
    let dtype = if meta.config.train.double {
        DType::F64
    } else {
        DType::F32
    };
    let model = Msdccl::new(meta.config.model.clone(), meta.catalog_size, dtype, 0)?;
    model.store.load_from(&loaded.with_prefix("param."))?;
    Ok((meta.config, model, meta.state))
}

/// Final report of a finished run: best validation epoch and its test metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: String,
    pub backbone: String,
    pub ablation: crate::model::Ablation,
    pub lambda: f64,
    pub m: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub valid: serde_json::Value,
    pub test: serde_json::Value,
}

/// Trains per `config`, writing everything under `run_dir`, and evaluates the
/// best checkpoint on the test split.
pub fn train_and_test(config: RunConfig, data: PreparedData, run_dir: &Path) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config, data, Some(run_dir.to_path_buf()))?;
    trainer.fit()?;
    let (_, best, _) = load_model(&run_dir.join("best.ckpt"))?;
    let t = &trainer.config.train;
    let valid = evaluate(&best, &trainer.data.split.valid, t.eval_batch_size, &t.ks)?;
    let test = evaluate(&best, &trainer.data.split.test, t.eval_batch_size, &t.ks)?;
    let c = &trainer.config;
    let summary = RunSummary {
        seed: c.seed,
        variant: serde_json::to_value(c.model.variant)?
            .as_str()
            .unwrap_or_default()
            .to_string(),
        backbone: c.model.backbone.to_string(),
        ablation: c.model.ablation,
        lambda: c.train.lambda,
        m: c.model.m,
        epochs: trainer.state.epoch,
        best_epoch: trainer.state.best_epoch,
        valid: valid.to_json(),
        test: test.to_json(),
    };
    serde_json::to_writer_pretty(File::create(run_dir.join("summary.json"))?, &summary)?;
    Ok(summary)
}
