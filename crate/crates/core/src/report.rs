//! Tables and plots over a directory of finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::curriculum::{CurriculumSchedule, ScheduleMode};
use crate::error::{Error, Result};
use crate::train::RunSummary;

const METRICS: [&str; 4] = ["hr@10", "hr@20", "ndcg@20", "mrr@20"];

/// Every `summary.json` directly under `dir` or one level deeper, plus the
/// run directories that have no summary (unfinished or failed).
pub fn collect(dir: &Path) -> Result<(Vec<(PathBuf, RunSummary)>, Vec<PathBuf>)> {
    let mut found = Vec::new();
    let mut absent = Vec::new();
    let mut visit = |d: &Path| -> Result<()> {
        let path = d.join("summary.json");
        if path.exists() {
            let summary: RunSummary = serde_json::from_reader(std::fs::File::open(&path)?)?;
            found.push((d.to_path_buf(), summary));
        } else if d.join("config.toml").exists() {
            absent.push(d.to_path_buf());
        }
        Ok(())
    };
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in &entries {
        visit(e)?;
        let mut nested: Vec<PathBuf> = std::fs::read_dir(e)?
            .filter_map(|x| x.ok().map(|x| x.path()))
            .filter(|p| p.is_dir())
            .collect();
        nested.sort();
        for n in &nested {
            visit(n)?;
        }
    }
    Ok((found, absent))
}

/// Label shared by runs that differ only in their seed.
pub fn group_label(s: &RunSummary) -> String {
    let mut label = format!("{} + {}", s.variant, s.backbone);
    let a = &s.ablation;
    for (on, name) in [
        (a.no_dl, "w/o DL"),
        (a.no_ts, "w/o TS"),
        (a.no_bpr, "w/o BPR"),
        (a.no_cl, "w/o CL"),
    ] {
        if on {
            let _ = write!(label, " {name}");
        }
    }
    if s.variant == "msdccl" {
        let _ = write!(label, " (λ={}, m={})", s.lambda, s.m);
    }
    label
}

fn metric(s: &RunSummary, key: &str) -> Option<f64> {
    s.test.get(key).and_then(|v| v.as_f64())
}

/// Seed-mean test metrics per group.
pub fn seed_means(
    runs: &[(PathBuf, RunSummary)],
) -> BTreeMap<String, (usize, BTreeMap<String, f64>)> {
    let mut groups: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for (_, s) in runs {
        groups.entry(group_label(s)).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(label, members)| {
            let means = METRICS
                .iter()
                .filter_map(|&k| {
                    let vals: Vec<f64> = members.iter().filter_map(|s| metric(s, k)).collect();
                    (!vals.is_empty())
                        .then(|| (k.to_string(), vals.iter().sum::<f64>() / vals.len() as f64))
                })
                .collect();
            (label, (members.len(), means))
        })
        .collect()
}

pub fn markdown_table(runs: &[(PathBuf, RunSummary)], absent: &[PathBuf]) -> String {
    let mut out = String::from("| model | seeds |");
    for k in METRICS {
        let _ = write!(out, " {k} |");
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(METRICS.len()));
    out.push('\n');
    for (label, (n, means)) in seed_means(runs) {
        let _ = write!(out, "| {label} | {n} |");
        for k in METRICS {
            match means.get(k) {
                Some(v) => {
                    let _ = write!(out, " {v:.4} |");
                }
                None => out.push_str(" – |"),
            }
        }
        out.push('\n');
    }
    if !absent.is_empty() {
        out.push_str("\nRuns without results:\n");
        for p in absent {
            let _ = writeln!(out, "- {}", p.display());
        }
    }
    out
}

/// One SVG line chart.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let plot_err =
        |e: &dyn std::fmt::Display| Error::Config(format!("plotting {}: {e}", path.display()));
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::Config(format!(
            "nothing to plot for {}",
            path.display()
        )));
    }
    let (x0, x1) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1.max(x0 + 1e-9), (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// `μ(t)` on a 200-point grid for both schedule shapes.
pub fn mu_series(limit: f64) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let mut series = Vec::new();
    for (mode, name) in [
        (ScheduleMode::SShape, "s-shape"),
        (ScheduleMode::Linear, "linear"),
    ] {
        let s = CurriculumSchedule {
            mode,
            limit,
            ..Default::default()
        };
        let pts = (0..=200)
            .map(|i| {
                let t = limit * i as f64 / 200.0;
                s.mu(t).map(|m| (t, m))
            })
            .collect::<Result<Vec<_>>>()?;
        series.push((name.to_string(), pts));
    }
    Ok(series)
}

/// Seed-mean test metric against a swept hyperparameter, per backbone.
fn sweep_series(
    runs: &[(PathBuf, RunSummary)],
    key: impl Fn(&RunSummary) -> f64,
    metric_key: &str,
) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut by_backbone: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for (_, s) in runs {
        let a = &s.ablation;
        if s.variant != "msdccl" || a.no_dl || a.no_ts || a.no_bpr || a.no_cl {
            continue;
        }
        if let Some(v) = metric(s, metric_key) {
            by_backbone
                .entry(s.backbone.clone())
                .or_default()
                .entry(key(s).to_bits())
                .or_default()
                .push(v);
        }
    }
    by_backbone
        .into_iter()
        .map(|(b, points)| {
            let mut pts: Vec<(f64, f64)> = points
                .into_iter()
                .map(|(x, v)| (f64::from_bits(x), v.iter().sum::<f64>() / v.len() as f64))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (format!("{b} {metric_key}"), pts)
        })
        .filter(|(_, p)| p.len() >= 2)
        .collect()
}

/// Writes `report.md`, `mu_schedule.svg` and any sweep plots into `dir`.
pub fn write_report(dir: &Path) -> Result<PathBuf> {
    let (runs, absent) = collect(dir)?;
    let mut md = String::from(
        "# Results\n\nTest metrics of the best validation checkpoint, averaged over seeds.\n\n",
    );
    md.push_str(&markdown_table(&runs, &absent));

    line_plot(
        &dir.join("mu_schedule.svg"),
        "curriculum schedule",
        "epoch",
        &mu_series(50.0)?,
    )?;
    md.push_str("\n![schedule](mu_schedule.svg)\n");
    for (name, title, key) in [
        (
            "lambda_sweep.svg",
            "λ sweep",
            Box::new(|s: &RunSummary| s.lambda) as Box<dyn Fn(&RunSummary) -> f64>,
        ),
        (
            "m_sweep.svg",
            "m sweep",
            Box::new(|s: &RunSummary| s.m as f64),
        ),
    ] {
        let series: Vec<_> = ["hr@20", "ndcg@20"]
            .iter()
            .flat_map(|k| sweep_series(&runs, &key, k))
            .collect();
        if !series.is_empty() {
            line_plot(
                &dir.join(name),
                title,
                title.trim_end_matches(" sweep"),
                &series,
            )?;
            let _ = write!(md, "\n![{title}]({name})\n");
        }
    }
    let path = dir.join("report.md");
    std::fs::write(&path, md)?;
    Ok(path)
}
