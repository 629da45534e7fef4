//! Checks shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use msdccl::config::RunConfig;
use msdccl::curriculum::{CurriculumSchedule, ScheduleMode};
use msdccl::dataset::{make_batches, Dataset, Example};
use msdccl::denoise::{gumbel_mask, sample_gumbel, CorrelationWeights};
use msdccl::metrics::{accumulate, rank_of_target, DEFAULT_KS, MRR_K};
use msdccl::model::{BatchTensors, ModelConfig, Msdccl, TrainInputs};
use msdccl::nn::ForwardCtx;
use msdccl::objective::{bpr_loss, rec_loss, scl_loss};
use msdccl::synth::{generate, synth_noise_experiment, SynthReport};
use msdccl::train::{evaluate, load_model, PreparedData, RunSummary, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one acceptance criterion.
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn t(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
}

fn vals(x: &Tensor) -> Vec<f64> {
    x.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1()
        .unwrap()
}

// ---------------------------------------------------------------- gradients

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_MAX_REL_ERR: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely: central differences
/// of an O(1) loss carry about 1e-10 of rounding error.
pub const GRAD_FLOOR: f64 = 1e-5;
pub const GRAD_MAX_SECONDS: f64 = 60.0;

pub struct GradProblem {
    pub model: Msdccl,
    pub bt: BatchTensors,
    pub noise: Tensor,
}

/// B=2, n=6, d=8, |V|=20, m=2 in double precision with frozen Gumbel noise.
/// The gate uses the relaxed sample: the straight-through forward value is
/// piecewise constant in the gate logits, so only the relaxed form has a
/// finite-difference derivative.
pub fn grad_problem(config: ModelConfig) -> GradProblem {
    let model = Msdccl::new(config, 20, DType::F64, 3).unwrap();
    let examples = vec![
        Example {
            user: 0,
            prefix: vec![1, 2, 3, 4, 5],
            target: 6,
        },
        Example {
            user: 1,
            prefix: vec![7, 8, 9, 10, 11, 12, 13],
            target: 14,
        },
    ];
    let histories = vec![(1..=6).collect(), (7..=14).collect()];
    let batch = make_batches(&examples, &histories, 20, 6, 2, 5)
        .unwrap()
        .remove(0);
    let bt = model.tensors(&batch).unwrap();
    let noise = sample_gumbel(
        &mut ChaCha8Rng::seed_from_u64(11),
        &[2, 6, 2],
        DType::F64,
        &Device::Cpu,
    )
    .unwrap();
    GradProblem { model, bt, noise }
}

pub fn grad_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        max_len: 6,
        m: 2,
        heads: 2,
        dropout: 0.0,
        gumbel_hard: false,
        ..Default::default()
    }
}

pub fn grad_loss(p: &GradProblem) -> (Tensor, Vec<u8>) {
    let inputs = TrainInputs {
        tau: 0.5,
        tau_c: 0.5,
        gumbel: Some(&p.noise),
    };
    let mut ctx = ForwardCtx::train(0.0, 0);
    let (total, _, out) = p
        .model
        .loss(
            &p.bt,
            &inputs,
            &mut ctx,
            &CurriculumSchedule::default(),
            0.0,
            0.2,
            1e-4,
        )
        .unwrap();
    (total, out.gate.map(|g| g.keep_drop).unwrap_or_default())
}

/// Worst relative error per parameter tensor, in creation order.
pub fn gradient_errors(p: &GradProblem) -> Vec<(String, f64)> {
    let (total, gate) = grad_loss(p);
    let grads = total.backward().unwrap();
    let eval = || {
        let (t, g) = grad_loss(p);
        assert_eq!(g, gate, "a perturbation flipped a gate decision");
        t.to_scalar::<f64>().unwrap()
    };
    let mut out = Vec::new();
    for param in p.model.store.params() {
        let shape = param.var.dims().to_vec();
        let base: Vec<f64> = param.var.flatten_all().unwrap().to_vec1().unwrap();
        let analytic = match grads.get(&param.var) {
            Some(g) => vals(g),
            None => vec![0.0; base.len()],
        };
        let mut worst = 0.0f64;
        for k in 0..base.len() {
            // The padding row is pinned at zero and never trained.
            if param.padding_row && k < shape[1] {
                continue;
            }
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[k] += delta;
                param.var.set(&t(&v, &shape)).unwrap();
                eval()
            };
            let numeric = (probe(GRAD_STEP) - probe(-GRAD_STEP)) / (2.0 * GRAD_STEP);
            let a = analytic[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR));
        }
        param.var.set(&t(&base, &shape)).unwrap();
        out.push((param.name.clone(), worst));
    }
    out
}

pub fn criterion_gradients() -> Check {
    let start = Instant::now();
    let errors = gradient_errors(&grad_problem(grad_config()));
    let seconds = start.elapsed().as_secs_f64();
    let (name, worst) = errors
        .iter()
        .cloned()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or_default();
    Check::new(
        worst < GRAD_MAX_REL_ERR && seconds < GRAD_MAX_SECONDS,
        format!(
            "{} tensors, max rel err {worst:.2e} ({name}) < {GRAD_MAX_REL_ERR:e}, {seconds:.1}s < {GRAD_MAX_SECONDS}s",
            errors.len()
        ),
    )
}

// ------------------------------------------------------------------- gumbel

pub const GUMBEL_DRAWS: usize = 1000;
/// The τ=0.01 one-hot bound needs `|ln α⁰ − ln α¹| > 0.01 · ln 1e6 ≈ 0.138`;
/// pairs closer than this are redrawn.
pub const GUMBEL_MIN_LOG_GAP: f64 = 0.15;

pub fn gumbel_alphas(seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(GUMBEL_DRAWS);
    while out.len() < GUMBEL_DRAWS {
        let a: [f64; 2] = [
            rng.random_range(1e-6..1.0 - 1e-6),
            rng.random_range(1e-6..1.0 - 1e-6),
        ];
        if (a[0].ln() - a[1].ln()).abs() > GUMBEL_MIN_LOG_GAP {
            out.push(a);
        }
    }
    out
}

/// Largest deviations `(τ=1 from α/Σα, τ=0.01 from one-hot, τ=1e6 from 0.5)`.
pub fn gumbel_limit_errors(alphas: &[[f64; 2]]) -> [f64; 3] {
    let flat: Vec<f64> = alphas.iter().flatten().copied().collect();
    let n = alphas.len();
    let weights = CorrelationWeights::from_probs(&t(&flat, &[1, n, 2])).unwrap();
    let real = vec![true; n];
    let at = |tau: f64| {
        vals(
            &gumbel_mask(&weights, tau, None, false, &real)
                .unwrap()
                .alpha_tilde,
        )
    };
    let (one, cold, hot) = (at(1.0), at(0.01), at(1e6));
    let mut worst = [0.0f64; 3];
    for (i, a) in alphas.iter().enumerate() {
        let sum = a[0] + a[1];
        for j in 0..2 {
            worst[0] = worst[0].max((one[2 * i + j] - a[j] / sum).abs());
            worst[2] = worst[2].max((hot[2 * i + j] - 0.5).abs());
        }
        worst[1] = worst[1].max(1.0 - cold[2 * i].max(cold[2 * i + 1]));
    }
    worst
}

pub fn criterion_gumbel() -> Check {
    let [one, cold, hot] = gumbel_limit_errors(&gumbel_alphas(2));
    Check::new(
        one < 1e-9 && cold < 1e-6 && hot < 1e-4,
        format!(
            "{GUMBEL_DRAWS} draws: τ=1 err {one:.1e} < 1e-9, τ=0.01 one-hot gap {cold:.1e} < 1e-6, τ=1e6 err {hot:.1e} < 1e-4"
        ),
    )
}

// ------------------------------------------------------------------ metrics

pub const METRIC_INSTANCES: usize = 10_000;

/// Rank by sorting the whole row, best first, with the target placed after
/// every item it ties with.
pub fn oracle_rank(row: &[f32], target: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .total_cmp(&row[a])
            .then((a == target).cmp(&(b == target)))
    });
    order.iter().position(|&j| j == target).unwrap() + 1
}

/// Number of instances whose rank or metrics differ from the oracle.
pub fn metric_mismatches(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..METRIC_INSTANCES {
        let b = rng.random_range(1..=32);
        let v = rng.random_range(2..=100);
        // Coarse scores force ties in about half of the instances.
        let levels = if rng.random_bool(0.5) { 5 } else { 1 << 20 };
        let mut ranks = Vec::with_capacity(b);
        let mut oracle = Vec::with_capacity(b);
        for _ in 0..b {
            let row: Vec<f32> = (0..v).map(|_| rng.random_range(0..levels) as f32).collect();
            let target = rng.random_range(0..v);
            ranks.push(rank_of_target(&row, target));
            oracle.push(oracle_rank(&row, target));
        }
        let report = accumulate(&ranks, &DEFAULT_KS);
        let n = b as f64;
        let mut ok = ranks == oracle;
        for &k in &DEFAULT_KS {
            let hr = oracle.iter().filter(|&&r| r <= k).count() as f64 / n;
            let ndcg = oracle
                .iter()
                .filter(|&&r| r <= k)
                .map(|&r| 1.0 / ((r + 1) as f64).log2())
                .sum::<f64>()
                / n;
            ok &= report.hr_at(k) == Some(hr) && report.ndcg_at(k) == Some(ndcg);
        }
        let mrr = oracle
            .iter()
            .filter(|&&r| r <= MRR_K)
            .map(|&r| 1.0 / r as f64)
            .sum::<f64>()
            / n;
        ok &= report.mrr == mrr;
        bad += usize::from(!ok);
    }
    bad
}

pub fn criterion_metrics() -> Check {
    let bad = metric_mismatches(3);
    Check::new(
        bad == 0,
        format!("{bad} of {METRIC_INSTANCES} random instances differ from the full-sort oracle"),
    )
}

// --------------------------------------------------------------- curriculum

pub const CURRICULUM_GRID: usize = 1000;
pub const CURRICULUM_TOL: f64 = 1e-12;

pub fn curriculum_failures() -> Vec<String> {
    let s = CurriculumSchedule::default();
    let lin = CurriculumSchedule {
        mode: ScheduleMode::Linear,
        ..s.clone()
    };
    let m = s.limit;
    let mu = |t: f64| s.mu(t).unwrap();
    let mut fails = Vec::new();
    for (t, want) in [(0.0, 0.0), (m, 1.0), (m / 2.0, 0.5)] {
        if (mu(t) - want).abs() > CURRICULUM_TOL {
            fails.push(format!("μ({t}) = {}", mu(t)));
        }
    }
    let grid: Vec<f64> = (0..=CURRICULUM_GRID)
        .map(|i| m * i as f64 / CURRICULUM_GRID as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&t| mu(t)).collect();
    if values.windows(2).any(|w| w[1] < w[0]) {
        fails.push("not monotone".into());
    }
    let second: Vec<f64> = values
        .windows(3)
        .map(|w| w[2] - 2.0 * w[1] + w[0])
        .collect();
    let signs: Vec<bool> = second
        .iter()
        .filter(|d| d.abs() > 1e-15)
        .map(|&d| d > 0.0)
        .collect();
    let flips = signs.windows(2).filter(|w| w[0] != w[1]).count();
    if flips != 1 {
        fails.push(format!("{flips} curvature sign changes"));
    }
    for &t in &grid {
        let (a, b) = (mu(t), lin.mu(t).unwrap());
        if (t < m / 2.0 && a > b) || (t > m / 2.0 && a < b) {
            fails.push(format!("against linear at t={t}"));
            break;
        }
    }
    fails
}

pub fn criterion_curriculum() -> Check {
    let fails = curriculum_failures();
    Check::new(
        fails.is_empty(),
        if fails.is_empty() {
            format!("endpoints, midpoint, monotone and single inflection on {CURRICULUM_GRID} points; below/above linear")
        } else {
            fails.join("; ")
        },
    )
}

// ---------------------------------------------------------------- closed forms

/// `(BPR at equal scores − ln 2, rec at z=(0,0) − 2 ln 2, SCL at uniform sims − ln n)`.
pub fn closed_form_errors() -> [f64; 3] {
    let e = t(&[0.3, -0.7, 1.1], &[1, 3]);
    let same = t(&[0.2, 0.5, -0.4], &[1, 3]);
    let bpr = vals(&bpr_loss(&e, &same, &same).unwrap())[0];
    let cols = Tensor::new(&[1u32], &Device::Cpu).unwrap();
    let rec = vals(&rec_loss(&t(&[0.0, 0.0], &[1, 2]), &cols).unwrap())[0];
    let n = 7;
    let h: Vec<f64> = (0..n).flat_map(|_| [1.0, 2.0, -1.0]).collect();
    let scl = vals(
        &scl_loss(
            &t(&[0.5, -0.2, 0.9], &[1, 3]),
            &t(&h, &[1, n, 3]),
            &t(&vec![1.0; n], &[1, n]),
            &t(&vec![1.0; n], &[1, n]),
            0.5,
            false,
        )
        .unwrap(),
    )[0];
    let ln2 = 2f64.ln();
    [
        (bpr - ln2).abs(),
        (rec - 2.0 * ln2).abs(),
        (scl - (n as f64).ln()).abs(),
    ]
}

pub fn criterion_closed_forms() -> Check {
    let [bpr, rec, scl] = closed_form_errors();
    Check::new(
        bpr <= 1e-12 && rec <= 1e-12 && scl <= 1e-10,
        format!("BPR err {bpr:.1e} ≤ 1e-12, rec err {rec:.1e} ≤ 1e-12, SCL err {scl:.1e} ≤ 1e-10"),
    )
}

// ------------------------------------------------------------------ synthetic

pub const SYNTH_MIN_AUC: f64 = 0.7;
pub const SYNTH_MAX_SECONDS: f64 = 15.0 * 60.0;
pub const SYNTH_MAX_EPOCHS: usize = 30;
/// Untrained AUC must sit within this many standard errors of 0.5.
pub const UNTRAINED_Z: f64 = 3.0;

pub fn synth_config() -> RunConfig {
    RunConfig::from_file(&workspace_root().join("configs/synth.toml"), &[]).unwrap()
}

/// Standard error of an AUC under the no-skill hypothesis (Hanley and McNeil).
pub fn null_auc_se(positives: usize, negatives: usize) -> f64 {
    let (a, p, n) = (0.5, positives as f64, negatives as f64);
    let q1 = a / (2.0 - a);
    let q2 = 2.0 * a * a / (1.0 + a);
    ((a * (1.0 - a) + (p - 1.0) * (q1 - a * a) + (n - 1.0) * (q2 - a * a)) / (p * n)).sqrt()
}

pub fn criterion_synthetic(report: &SynthReport) -> Check {
    let s = &report.untrained;
    let se = null_auc_se(s.planted, s.items - s.planted);
    let untrained = s.auc.unwrap_or(f64::NAN);
    let trained = report.trained.auc.unwrap_or(f64::NAN);
    let control_ok = (untrained - 0.5).abs() <= UNTRAINED_Z * se;
    let passed = trained > SYNTH_MIN_AUC
        && report.epochs <= SYNTH_MAX_EPOCHS
        && report.seconds < SYNTH_MAX_SECONDS
        && control_ok;
    Check::new(
        passed,
        format!(
            "trained α¹ AUC {trained:.3} (need > {SYNTH_MIN_AUC}) after {} epochs in {:.0}s (limit {SYNTH_MAX_SECONDS}s); \
             untrained {untrained:.3} (|Δ| ≤ {:.3}); cluster oracle {:.3}",
            report.epochs,
            report.seconds,
            UNTRAINED_Z * se,
            report.oracle.auc.unwrap_or(f64::NAN)
        ),
    )
}

pub fn run_synthetic() -> SynthReport {
    synth_noise_experiment(&synth_config(), None).unwrap()
}

// ------------------------------------------------------------------- ML-100k

pub const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Plain,
    Full,
    NoDl,
}

impl Arm {
    pub fn dir_name(self) -> &'static str {
        match self {
            Arm::Plain => "plain",
            Arm::Full => "full",
            Arm::NoDl => "no-dl",
        }
    }

    fn overrides(self) -> Vec<String> {
        match self {
            Arm::Plain => vec!["model.variant=plain".into()],
            Arm::Full => vec![],
            Arm::NoDl => vec!["model.ablation.no_dl=true".into()],
        }
    }
}

pub fn desk_config(arm: Arm, seed: u64) -> RunConfig {
    let mut overrides = arm.overrides();
    overrides.push(format!("seed={seed}"));
    RunConfig::from_file(
        &workspace_root().join("configs/ml100k-desk.toml"),
        &overrides,
    )
    .unwrap()
}

fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let mut a = a.clone();
    a.out_dir = b.out_dir.clone();
    &a == b
}

/// The summary of a desk run: reused from `runs/ml100k-desk` when it was
/// produced by the pinned config, trained from scratch otherwise.
pub fn desk_summary(arm: Arm, seed: u64) -> Result<RunSummary, String> {
    let root = workspace_root();
    let dir = root
        .join("runs/ml100k-desk")
        .join(arm.dir_name())
        .join(format!("seed{seed}"));
    let pinned = desk_config(arm, seed);
    let recorded = RunConfig::from_file(&dir.join("config.toml"), &[]).ok();
    if let (Some(recorded), Ok(text)) =
        (recorded, std::fs::read_to_string(dir.join("summary.json")))
    {
        if same_run(&recorded, &pinned) {
            return serde_json::from_str(&text).map_err(|e| e.to_string());
        }
    }
    let mut config = pinned;
    config.data.path = root.join(&config.data.path);
    if !config.data.path.exists() {
        return Err(format!("{} not found", config.data.path.display()));
    }
    let (_, data) = PreparedData::load(&config).map_err(|e| e.to_string())?;
    std::fs::remove_dir_all(&dir).ok();
    msdccl::train::train_and_test(config, data, &dir).map_err(|e| e.to_string())
}

pub fn metric(summary: &RunSummary, key: &str) -> f64 {
    summary.test[key].as_f64().unwrap_or(f64::NAN)
}

pub fn seed_mean(runs: &[RunSummary], key: &str) -> f64 {
    runs.iter().map(|r| metric(r, key)).sum::<f64>() / runs.len() as f64
}

pub fn desk_runs(arm: Arm) -> Result<Vec<RunSummary>, String> {
    SEEDS.iter().map(|&s| desk_summary(arm, s)).collect()
}

pub fn criterion_direction(full: &[RunSummary], plain: &[RunSummary]) -> Check {
    let (fh, ph) = (seed_mean(full, "hr@20"), seed_mean(plain, "hr@20"));
    let (fn_, pn) = (seed_mean(full, "ndcg@20"), seed_mean(plain, "ndcg@20"));
    let epochs = full
        .iter()
        .chain(plain)
        .map(|r| r.epochs)
        .max()
        .unwrap_or(0);
    Check::new(
        fh > ph && fn_ > pn && epochs <= 100,
        format!(
            "test HR@20 {fh:.4} vs plain {ph:.4}, NDCG@20 {fn_:.4} vs {pn:.4} (seed means over {}, ≤{epochs} epochs)",
            full.len()
        ),
    )
}

pub fn criterion_ablation(full: &[RunSummary], no_dl: &[RunSummary]) -> Check {
    let (fh, nh) = (seed_mean(full, "hr@20"), seed_mean(no_dl, "hr@20"));
    Check::new(
        nh < fh,
        format!("test HR@20 without hard denoising {nh:.4} vs full {fh:.4}"),
    )
}

// -------------------------------------------------------------- determinism

pub fn tiny_run_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.model.d = 16;
    c.model.max_len = 10;
    c.model.layers = 1;
    c.model.hard_layers = 1;
    c.train.batch_size = 64;
    c.train.eval_batch_size = 128;
    c.synth.users = 120;
    c.synth.items = 80;
    c.synth.clusters = 4;
    c.synth.min_len = 6;
    c.synth.max_len = 12;
    c
}

pub fn tiny_data(config: &RunConfig) -> PreparedData {
    let data = generate(&config.synth, config.seed).unwrap();
    let dataset = Dataset::from_sequences(data.sequences, data.num_items);
    PreparedData::from_dataset(&dataset, config).unwrap()
}

fn bits(model: &Msdccl) -> Vec<(String, Vec<u64>)> {
    model
        .store
        .params()
        .iter()
        .map(|p| {
            let v: Vec<f64> = vals(p.var.as_tensor());
            (p.name.clone(), v.iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

pub fn determinism_failures() -> Vec<String> {
    let mut fails = Vec::new();
    let config = tiny_run_config(5);
    let run = || {
        let mut trainer = Trainer::new(config.clone(), tiny_data(&config), None).unwrap();
        (0..2).for_each(|_| {
            trainer.run_epoch().unwrap();
        });
        trainer
    };
    let (a, b) = (run(), run());
    if a.state.history != b.state.history {
        fails.push("epoch logs differ between identical runs".into());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    a.save(&path).unwrap();
    let (_, loaded, state) = load_model(&path).unwrap();
    if bits(&a.model) != bits(&loaded) {
        fails.push("parameters changed across save/load".into());
    }
    if state != a.state {
        fails.push("training state changed across save/load".into());
    }
    let valid = &a.data.split.valid;
    let before = evaluate(&a.model, valid, 128, &DEFAULT_KS).unwrap();
    let after = evaluate(&loaded, valid, 128, &DEFAULT_KS).unwrap();
    if before != after {
        fails.push("evaluation changed across save/load".into());
    }
    fails
}

pub fn criterion_determinism() -> Check {
    let fails = determinism_failures();
    Check::new(
        fails.is_empty(),
        if fails.is_empty() {
            "identical epoch logs for equal config and seed; bit-exact checkpoint round-trip"
                .to_string()
        } else {
            fails.join("; ")
        },
    )
}
