//! Planted-noise experiment: clustered sequences with injected off-cluster
//! items, used to check that the learned irrelevance score flags them.

use std::path::Path;

use candle_core::DType;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SynthConfig};
use crate::dataset::{pad_left, Dataset, Example, InteractionSequence, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::Msdccl;
use crate::train::{PreparedData, Trainer};

/// Positions at the end of every sequence that are never noise, so the
/// training, validation and test targets all come from the user's cluster.
pub const CLEAN_TAIL: usize = 3;

pub struct SynthData {
    pub sequences: Vec<InteractionSequence>,
    /// Per sequence and position: true where the item was planted noise.
    pub planted: Vec<Vec<bool>>,
    /// Cluster of every item index (entry 0 is unused).
    pub item_cluster: Vec<usize>,
    pub user_cluster: Vec<usize>,
    pub num_items: usize,
}

/// Items are dealt to clusters after a seeded shuffle. Each user draws one
/// cluster and a length in `[min_len, max_len]`; every position outside the
/// clean tail is, with probability `noise`, a uniform item from another
/// cluster, otherwise a uniform item from the user's own. Items do not repeat
/// within a sequence.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<u32> = (1..=cfg.items as u32).collect();
    order.shuffle(&mut rng);
    let mut item_cluster = vec![0usize; cfg.items + 1];
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); cfg.clusters];
    for (k, &item) in order.iter().enumerate() {
        let c = k * cfg.clusters / cfg.items;
        item_cluster[item as usize] = c;
        members[c].push(item);
    }
    let smallest = members.iter().map(Vec::len).min().unwrap_or(0);
    if smallest < cfg.max_len {
        return Err(Error::Config(format!(
            "synth clusters hold {smallest} items, fewer than max_len {}",
            cfg.max_len
        )));
    }

    let mut data = SynthData {
        sequences: Vec::with_capacity(cfg.users),
        planted: Vec::with_capacity(cfg.users),
        item_cluster,
        user_cluster: Vec::with_capacity(cfg.users),
        num_items: cfg.items,
    };
    for u in 0..cfg.users {
        let cluster = rng.random_range(0..cfg.clusters);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut items = Vec::with_capacity(len);
        let mut planted = Vec::with_capacity(len);
        while items.len() < len {
            let noisy = items.len() + CLEAN_TAIL < len && rng.random::<f64>() < cfg.noise;
            let pool = if noisy {
                let mut other = rng.random_range(0..cfg.clusters - 1);
                if other >= cluster {
                    other += 1;
                }
                &members[other]
            } else {
                &members[cluster]
            };
            let item = loop {
                let candidate = *pool.choose(&mut rng).expect("clusters are non-empty");
                if !items.contains(&candidate) {
                    break candidate;
                }
            };
            items.push(item);
            planted.push(noisy);
        }
        data.sequences.push(InteractionSequence {
            user_id: u.to_string(),
            timestamps: (0..len as i64).collect(),
            items,
        });
        data.planted.push(planted);
        data.user_cluster.push(cluster);
    }
    Ok(data)
}

/// Area under the ROC curve of `scores` for the positive `labels`, with tied
/// scores sharing their average rank. `None` without both classes.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[order[k]]).count() as f64 * avg;
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// Noise-detection quality on a set of sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// ROC-AUC of `α¹` against the planted labels; `None` without planted items.
    pub auc: Option<f64>,
    /// Precision and recall of the noise-free gate's drop decisions.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub items: usize,
    pub planted: usize,
}

fn detection(scores: &[f64], dropped: &[bool], labels: &[bool]) -> Detection {
    let planted = labels.iter().filter(|&&l| l).count();
    let flagged = dropped.iter().filter(|&&d| d).count();
    let hits = dropped
        .iter()
        .zip(labels)
        .filter(|&(&d, &l)| d && l)
        .count();
    Detection {
        auc: roc_auc(scores, labels),
        precision: (flagged > 0).then(|| hits as f64 / flagged as f64),
        recall: (planted > 0).then(|| hits as f64 / planted as f64),
        items: labels.len(),
        planted,
    }
}

/// Scores every item of `sequences` (their last `max_len` items) with the
/// eval-mode irrelevance `α¹`; an item is dropped when `α¹ > α⁰`.
pub fn detect(
    model: &Msdccl,
    sequences: &[InteractionSequence],
    planted: &[Vec<bool>],
) -> Result<Detection> {
    let n = model.config.max_len;
    let (mut scores, mut dropped, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (chunk, flags) in sequences.chunks(256).zip(planted.chunks(256)) {
        let examples: Vec<Example> = chunk
            .iter()
            .map(|s| Example {
                user: 0,
                prefix: s.items.clone(),
                target: s.items[0],
            })
            .collect();
        let mut batch = SequenceBatch {
            max_len: n,
            item_matrix: Vec::new(),
            mask: Vec::new(),
            lengths: Vec::new(),
            targets: Vec::new(),
            negatives: Vec::new(),
            users: Vec::new(),
        };
        for ex in &examples {
            let (items, mask) = pad_left(&ex.prefix, n);
            batch.lengths.push(mask.iter().filter(|&&m| m).count());
            batch.item_matrix.extend(items);
            batch.mask.extend(mask);
            batch.targets.push(ex.target);
            batch.users.push(0);
        }
        let bt = model.tensors(&batch)?;
        let mut ctx = crate::nn::ForwardCtx::eval();
        let h = model.embedding.lookup(&bt.items, &bt.mask)?;
        let (Some(interest), Some(correlator)) = (&model.interest, &model.correlator) else {
            return Err(Error::Config(
                "noise detection needs the full model variant".into(),
            ));
        };
        let user = interest.forward(
            &h,
            model.embedding.positions.as_tensor(),
            &bt.mask,
            None,
            &mut ctx,
        )?;
        let alpha: Vec<Vec<Vec<f64>>> = correlator
            .forward(&h, &user.e_fused)?
            .alpha()?
            .to_dtype(DType::F64)?
            .to_vec3()?;
        for (row, (seq_flags, a)) in flags.iter().zip(&alpha).enumerate() {
            let len = batch.lengths[row];
            let offset = seq_flags.len() - len;
            for j in 0..len {
                let slot = &a[n - len + j];
                scores.push(slot[1]);
                dropped.push(slot[1] > slot[0]);
                labels.push(seq_flags[offset + j]);
            }
        }
    }
    Ok(detection(&scores, &dropped, &labels))
}

/// Flags items outside the most frequent cluster of their sequence: the
/// best a detector can do from cluster membership alone.
pub fn cluster_oracle(data: &SynthData, users: &[usize]) -> Detection {
    let (mut scores, mut dropped, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for &u in users {
        let s = &data.sequences[u];
        let mut counts = vec![0usize; data.user_cluster.iter().max().map_or(1, |m| m + 1)];
        for &i in &s.items {
            counts[data.item_cluster[i as usize]] += 1;
        }
        let majority = (0..counts.len())
            .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
            .unwrap_or(0);
        for (&i, &p) in s.items.iter().zip(&data.planted[u]) {
            let off = data.item_cluster[i as usize] != majority;
            scores.push(if off { 1.0 } else { 0.0 });
            dropped.push(off);
            labels.push(p);
        }
    }
    detection(&scores, &dropped, &labels)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthReport {
    pub noise: f64,
    pub epochs: usize,
    pub train_users: usize,
    pub heldout_users: usize,
    pub untrained: Detection,
    pub trained: Detection,
    pub oracle: Detection,
    /// AUC after each epoch.
    pub auc_history: Vec<Option<f64>>,
    pub seconds: f64,
}

/// Generates data, trains on the non-held-out users for `synth.epochs`
/// epochs, and scores detection on the held-out users.
pub fn synth_noise_experiment(config: &RunConfig, out_dir: Option<&Path>) -> Result<SynthReport> {
    let start = std::time::Instant::now();
    let s = &config.synth;
    let data = generate(s, config.seed)?;
    let mut users: Vec<usize> = (0..s.users).collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed));
    let heldout_count = ((s.users as f64 * s.holdout).round() as usize).clamp(1, s.users - 1);
    let (heldout, train_users) = users.split_at(heldout_count);

    let pick = |ids: &[usize]| -> (Vec<InteractionSequence>, Vec<Vec<bool>>) {
        ids.iter()
            .map(|&u| (data.sequences[u].clone(), data.planted[u].clone()))
            .unzip()
    };
    let (train_seqs, _) = pick(train_users);
    let (held_seqs, held_flags) = pick(heldout);
    let dataset = Dataset::from_sequences(train_seqs, data.num_items);
    let prepared = PreparedData::from_dataset(&dataset, config)?;

    let mut run = config.clone();
    run.train.max_epochs = s.epochs;
    run.train.patience = s.epochs + 1;
    let mut trainer = Trainer::new(run, prepared, out_dir.map(Path::to_path_buf))?;
    let untrained = detect(&trainer.model, &held_seqs, &held_flags)?;
    let mut auc_history = Vec::with_capacity(s.epochs);
    while !trainer.should_stop() {
        let log = trainer.run_epoch()?;
        let d = detect(&trainer.model, &held_seqs, &held_flags)?;
        log::info!(
            "synth epoch {:>3}  loss {:.4}  hr@20 {:.4}  kept {:.3}  auc {:?}",
            log.epoch,
            log.loss,
            log.hr20_valid,
            log.kept,
            d.auc
        );
        auc_history.push(d.auc);
    }
    let trained = detect(&trainer.model, &held_seqs, &held_flags)?;
    let report = SynthReport {
        noise: s.noise,
        epochs: trainer.state.epoch,
        train_users: train_users.len(),
        heldout_users: heldout.len(),
        untrained,
        trained,
        oracle: cluster_oracle(&data, heldout),
        auc_history,
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(
            std::fs::File::create(dir.join("synth_report.json"))?,
            &report,
        )?;
    }
    Ok(report)
}
