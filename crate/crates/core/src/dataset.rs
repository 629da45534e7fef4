//! Interaction log ingestion and preprocessing.
//!
//! Raw logs are grouped per user and ordered by timestamp, then reduced to
//! their 5-core, split leave-one-out, and turned into left-padded batches.
//! Item index 0 is reserved for padding everywhere in the crate.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Item index reserved for padding slots.
pub const PADDING: u32 = 0;

/// One user's interactions in chronological order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp`
    MovielensTab,
    /// Headed CSV with `user`, `item`, `timestamp` columns (`rating` optional).
    Csv,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-tab" => Ok(Self::MovielensTab),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown input format `{other}`"))),
        }
    }
}

/// Dense remapping between external identifiers and internal indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    first_index: u32,
    external: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    /// A map whose first assigned index is `first_index`.
    pub fn starting_at(first_index: u32) -> Self {
        Self {
            first_index,
            ..Self::default()
        }
    }

    pub fn get_or_insert(&mut self, external: &str) -> u32 {
        if let Some(&idx) = self.index.get(external) {
            return idx;
        }
        let idx = self.first_index + self.external.len() as u32;
        self.external.push(external.to_string());
        self.index.insert(external.to_string(), idx);
        idx
    }

    pub fn internal(&self, external: &str) -> Option<u32> {
        self.index.get(external).copied()
    }

    pub fn external(&self, internal: u32) -> Option<&str> {
        internal
            .checked_sub(self.first_index)
            .and_then(|i| self.external.get(i as usize))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    /// Writes `external_id internal_index` lines.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        for (offset, ext) in self.external.iter().enumerate() {
            writeln!(out, "{} {}", ext, self.first_index as usize + offset)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut rows = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: message.to_string(),
            };
            let mut parts = line.split_whitespace();
            let ext = parts
                .next()
                .ok_or_else(|| parse_err("missing external id"))?;
            let idx: u32 = parts
                .next()
                .ok_or_else(|| parse_err("missing internal index"))?
                .parse()
                .map_err(|_| parse_err("internal index is not an integer"))?;
            rows.push((ext.to_string(), idx));
        }
        rows.sort_by_key(|r| r.1);
        let first_index = rows.first().map_or(0, |r| r.1);
        let mut map = Self::starting_at(first_index);
        for (ext, idx) in rows {
            if map.get_or_insert(&ext) != idx {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: "remap indices are not dense".into(),
                });
            }
        }
        Ok(map)
    }
}

/// Sequences plus the id tables that produced them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub users: IdMap,
    pub items: IdMap,
}

impl Dataset {
    pub fn load(path: &Path, format: InputFormat) -> Result<Self> {
        load_interactions(path, format)
    }

    /// Wraps already-indexed sequences; item ids become their own decimal names.
    pub fn from_sequences(sequences: Vec<InteractionSequence>, num_items: usize) -> Self {
        let mut users = IdMap::starting_at(0);
        for s in &sequences {
            users.get_or_insert(&s.user_id);
        }
        let mut items = IdMap::starting_at(1);
        for i in 1..=num_items {
            items.get_or_insert(&i.to_string());
        }
        Self {
            sequences,
            users,
            items,
        }
    }

    /// 5-core style filtering followed by dense renumbering of the surviving items.
    pub fn core_filter(self, min_count: usize) -> Result<Self> {
        let filtered = apply_core_filter(&self.sequences, min_count)?;
        let (sequences, items) = compact_items(&filtered, &self.items);
        let mut users = IdMap::starting_at(0);
        for s in &sequences {
            users.get_or_insert(&s.user_id);
        }
        Ok(Self {
            sequences,
            users,
            items,
        })
    }

    /// Number of rows in the item table, padding included.
    pub fn catalog_size(&self) -> usize {
        self.items.len() + 1
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(InteractionSequence::len).sum()
    }

    /// Persists `users.remap` and `items.remap` into `dir`.
    pub fn write_remaps(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.users.write_to(&dir.join("users.remap"))?;
        self.items.write_to(&dir.join("items.remap"))
    }
}

struct RawRow {
    user: String,
    item: String,
    timestamp: i64,
}

/// Reads an interaction log into one time-ordered sequence per user.
///
/// Users are indexed in order of first appearance; items are indexed from 1 in
/// order of first appearance. Equal timestamps keep file order.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<Dataset> {
    let rows = match format {
        InputFormat::MovielensTab => read_tab_rows(path)?,
        InputFormat::Csv => read_csv_rows(path)?,
    };
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no interactions",
            path.display()
        )));
    }

    let mut users = IdMap::starting_at(0);
    let mut items = IdMap::starting_at(1);
    let mut per_user: Vec<Vec<(i64, u32)>> = Vec::new();
    for row in rows {
        let u = users.get_or_insert(&row.user) as usize;
        let i = items.get_or_insert(&row.item);
        if u == per_user.len() {
            per_user.push(Vec::new());
        }
        per_user[u].push((row.timestamp, i));
    }

    let sequences = per_user
        .into_iter()
        .enumerate()
        .map(|(u, mut events)| {
            events.sort_by_key(|e| e.0);
            InteractionSequence {
                user_id: users.external(u as u32).unwrap_or_default().to_string(),
                items: events.iter().map(|e| e.1).collect(),
                timestamps: events.iter().map(|e| e.0).collect(),
            }
        })
        .collect();
    Ok(Dataset {
        sequences,
        users,
        items,
    })
}

fn read_tab_rows(path: &Path) -> Result<Vec<RawRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let (user, item, ts) = match fields.as_slice() {
            [u, i, _rating, t] => (*u, *i, *t),
            [u, i, t] => (*u, *i, *t),
            _ => {
                return Err(parse_err(format!(
                    "expected 3 or 4 tab-separated fields, found {}",
                    fields.len()
                )))
            }
        };
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item field".into()));
        }
        let timestamp = ts
            .trim()
            .parse::<i64>()
            .map_err(|_| parse_err(format!("timestamp `{ts}` is not an integer")))?;
        rows.push(RawRow {
            user: user.trim().to_string(),
            item: item.trim().to_string(),
            timestamp,
        });
    }
    Ok(rows)
}

fn read_csv_rows(path: &Path) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 1, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing `{name}` column"),
            })
    };
    let (uc, ic, tc) = (column("user")?, column("item")?, column("timestamp")?);

    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let line = n + 2;
        let record = record.map_err(|e| csv_error(path, line, e))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if field(uc).is_empty() || field(ic).is_empty() {
            return Err(parse_err("empty user or item field".into()));
        }
        let timestamp = field(tc)
            .parse::<i64>()
            .map_err(|_| parse_err(format!("timestamp `{}` is not an integer", field(tc))))?;
        rows.push(RawRow {
            user: field(uc).to_string(),
            item: field(ic).to_string(),
            timestamp,
        });
    }
    Ok(rows)
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(line);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Drops users with fewer than `min_count` items and items with fewer than
/// `min_count` interactions, alternating until neither rule removes anything.
pub fn apply_core_filter(
    sequences: &[InteractionSequence],
    min_count: usize,
) -> Result<Vec<InteractionSequence>> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut current: Vec<InteractionSequence> = sequences.to_vec();
    loop {
        let before: usize = current.iter().map(InteractionSequence::len).sum();
        let users_before = current.len();

        current.retain(|s| s.len() >= min_count);

        let mut counts: HashMap<u32, usize> = HashMap::new();
        for s in &current {
            for &i in &s.items {
                *counts.entry(i).or_default() += 1;
            }
        }
        for s in &mut current {
            let keep: Vec<bool> = s.items.iter().map(|i| counts[i] >= min_count).collect();
            let mut k = keep.iter();
            s.items.retain(|_| *k.next().unwrap());
            let mut k = keep.iter();
            s.timestamps.retain(|_| *k.next().unwrap());
        }
        current.retain(|s| s.len() >= min_count);

        let after: usize = current.iter().map(InteractionSequence::len).sum();
        if after == before && current.len() == users_before {
            break;
        }
    }
    if current.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no users survive a {min_count}-core filter"
        )));
    }
    Ok(current)
}

/// Renumbers the items present in `sequences` to `1..=k`, preserving their
/// relative order, and returns the matching id table.
pub fn compact_items(
    sequences: &[InteractionSequence],
    items: &IdMap,
) -> (Vec<InteractionSequence>, IdMap) {
    let mut present: Vec<u32> = sequences
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .collect();
    present.sort_unstable();
    present.dedup();
    let mut map = IdMap::starting_at(1);
    let mut renumber = HashMap::with_capacity(present.len());
    for old in present {
        let name = items
            .external(old)
            .map(str::to_string)
            .unwrap_or_else(|| old.to_string());
        renumber.insert(old, map.get_or_insert(&name));
    }
    let out = sequences
        .iter()
        .map(|s| InteractionSequence {
            user_id: s.user_id.clone(),
            items: s.items.iter().map(|i| renumber[i]).collect(),
            timestamps: s.timestamps.clone(),
        })
        .collect();
    (out, map)
}

/// A prefix with its next-item supervision target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Position of the user in the split's sequence list.
    pub user: usize,
    pub prefix: Vec<u32>,
    pub target: u32,
}

/// A user's training prefix (everything before the validation item).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainSequence {
    pub user: usize,
    pub items: Vec<u32>,
}

/// Which training examples a train sequence yields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// One example per user: the last train item given everything before it.
    #[default]
    LastTarget,
    /// One example per train position after the first.
    AllPrefix,
}

/// Leave-one-out split.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<TrainSequence>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Sorted, deduplicated full interaction set per user (negative sampling).
    pub histories: Vec<Vec<u32>>,
    /// Sequences shorter than three items, left out of every part.
    pub excluded: usize,
}

impl Split {
    /// `per_user` keeps only each user's most recent examples when set.
    pub fn training_examples(&self, mode: TrainingMode, per_user: Option<usize>) -> Vec<Example> {
        let mut out = Vec::new();
        for t in &self.train {
            if t.items.len() < 2 {
                continue;
            }
            match mode {
                TrainingMode::LastTarget => {
                    let n = t.items.len();
                    out.push(Example {
                        user: t.user,
                        prefix: t.items[..n - 1].to_vec(),
                        target: t.items[n - 1],
                    });
                }
                TrainingMode::AllPrefix => {
                    let first = match per_user {
                        Some(k) => t.items.len().saturating_sub(k).max(1),
                        None => 1,
                    };
                    for end in first..t.items.len() {
                        out.push(Example {
                            user: t.user,
                            prefix: t.items[..end].to_vec(),
                            target: t.items[end],
                        });
                    }
                }
            }
        }
        out
    }
}

/// Splits each sequence `[.., y, z]` into a test pair (`..y` -> `z`), a
/// validation pair (`..` -> `y`) and the training prefix `..`.
pub fn leave_one_out_split(sequences: &[InteractionSequence]) -> Split {
    let mut split = Split {
        histories: sequences
            .iter()
            .map(|s| {
                let mut h = s.items.clone();
                h.sort_unstable();
                h.dedup();
                h
            })
            .collect(),
        ..Split::default()
    };
    for (user, s) in sequences.iter().enumerate() {
        let n = s.len();
        if n < 3 {
            split.excluded += 1;
            continue;
        }
        split.train.push(TrainSequence {
            user,
            items: s.items[..n - 2].to_vec(),
        });
        split.valid.push(Example {
            user,
            prefix: s.items[..n - 2].to_vec(),
            target: s.items[n - 2],
        });
        split.test.push(Example {
            user,
            prefix: s.items[..n - 1].to_vec(),
            target: s.items[n - 1],
        });
    }
    if split.excluded > 0 {
        log::warn!(
            "{} sequences shorter than 3 items excluded from the split",
            split.excluded
        );
    }
    split
}

/// Fixed-length, left-padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub max_len: usize,
    /// Row-major `rows x max_len`.
    pub item_matrix: Vec<u32>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub targets: Vec<u32>,
    /// One sampled negative per row; empty for evaluation batches.
    pub negatives: Vec<u32>,
    pub users: Vec<usize>,
}

impl SequenceBatch {
    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.item_matrix[b * self.max_len..(b + 1) * self.max_len]
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.mask[b * self.max_len..(b + 1) * self.max_len]
    }

    fn from_examples(examples: &[&Example], max_len: usize) -> Self {
        let mut batch = SequenceBatch {
            max_len,
            item_matrix: Vec::with_capacity(examples.len() * max_len),
            mask: Vec::with_capacity(examples.len() * max_len),
            lengths: Vec::with_capacity(examples.len()),
            targets: Vec::with_capacity(examples.len()),
            negatives: Vec::new(),
            users: Vec::with_capacity(examples.len()),
        };
        for ex in examples {
            let (items, mask) = pad_left(&ex.prefix, max_len);
            batch.lengths.push(mask.iter().filter(|&&m| m).count());
            batch.item_matrix.extend(items);
            batch.mask.extend(mask);
            batch.targets.push(ex.target);
            batch.users.push(ex.user);
        }
        batch
    }
}

/// Keeps the most recent `max_len` items and left-pads with [`PADDING`].
pub fn pad_left(prefix: &[u32], max_len: usize) -> (Vec<u32>, Vec<bool>) {
    let recent = &prefix[prefix.len().saturating_sub(max_len)..];
    let pad = max_len - recent.len();
    let mut items = vec![PADDING; pad];
    items.extend_from_slice(recent);
    let mut mask = vec![false; pad];
    mask.extend(std::iter::repeat_n(true, recent.len()));
    (items, mask)
}

/// Shuffled training batches with one uniformly sampled negative per row.
///
/// The stream is a pure function of the inputs and `rng_seed`.
pub fn make_batches(
    examples: &[Example],
    histories: &[Vec<u32>],
    catalog_size: usize,
    max_len: usize,
    batch_size: usize,
    rng_seed: u64,
) -> Result<Vec<SequenceBatch>> {
    if max_len == 0 || batch_size == 0 {
        return Err(Error::Config(
            "max_len and batch_size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);

    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let rows: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let mut batch = SequenceBatch::from_examples(&rows, max_len);
        for ex in &rows {
            batch.negatives.push(sample_negative(
                &histories[ex.user],
                catalog_size,
                &mut rng,
            )?);
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Evaluation batches in input order, without negatives.
pub fn make_eval_batches(
    examples: &[Example],
    max_len: usize,
    batch_size: usize,
) -> Vec<SequenceBatch> {
    examples
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let rows: Vec<&Example> = chunk.iter().collect();
            SequenceBatch::from_examples(&rows, max_len)
        })
        .collect()
}

/// Uniform draw from `1..catalog_size` minus the sorted `history`.
pub fn sample_negative(history: &[u32], catalog_size: usize, rng: &mut impl Rng) -> Result<u32> {
    let upper = catalog_size as u32;
    if upper < 2 {
        return Err(Error::Contract("catalog has no real items".into()));
    }
    for _ in 0..64 {
        let candidate = rng.random_range(1..upper);
        if history.binary_search(&candidate).is_err() {
            return Ok(candidate);
        }
    }
    let complement: Vec<u32> = (1..upper)
        .filter(|c| history.binary_search(c).is_err())
        .collect();
    if complement.is_empty() {
        return Err(Error::Contract(
            "user has interacted with every item; no negative exists".into(),
        ));
    }
    Ok(complement[rng.random_range(0..complement.len())])
}
