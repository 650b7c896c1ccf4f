//! Multi-seed runs, aggregation, sweeps and their on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lads_core::augnet::save_augnet;
use lads_core::eval::EvalReport;
use lads_core::probe::save_probe;
use lads_core::store::{load_bundle, load_prompt_bank, EmbeddingBundle, PromptBank};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GridPoint, Method, SweepGrid};
use crate::error::{CliError, Context, Result};
use crate::pipeline::{run_seed, SeedRun};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation (0 for a single seed).
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodAggregate>,
}

impl Aggregate {
    pub fn metric(&self, method: Method, name: &str) -> Option<MeanStd> {
        self.methods.iter().find(|m| m.method == method)?.metrics.get(name).copied()
    }
}

/// Scalar metrics of a report; optional ones only when present.
pub fn report_metrics(r: &EvalReport) -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("id_acc", r.id_acc),
        ("ood_acc", r.ood_acc),
        ("extended_acc", r.extended_acc),
        ("class_balanced_acc", r.class_balanced_acc),
    ];
    for (name, v) in [
        ("val_balanced_acc", r.val_balanced_acc),
        ("da_score", r.da_score),
        ("cc_score", r.cc_score),
    ] {
        if let Some(v) = v {
            out.push((name, v));
        }
    }
    out
}

/// Mean and std per method and metric. A metric missing from any seed's
/// report is left out for that method.
pub fn aggregate(seeds: &[u64], per_method: &[(Method, Vec<EvalReport>)]) -> Aggregate {
    let methods = per_method
        .iter()
        .map(|(method, reports)| {
            let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in reports {
                for (k, v) in report_metrics(r) {
                    values.entry(k.to_string()).or_default().push(v);
                }
            }
            let metrics = values
                .into_iter()
                .filter(|(_, v)| v.len() == reports.len())
                .map(|(k, v)| (k, MeanStd::of(&v)))
                .collect();
            MethodAggregate { method: *method, metrics }
        })
        .collect();
    Aggregate { seeds: seeds.to_vec(), methods }
}

pub fn aggregate_runs(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Aggregate {
    let per_method: Vec<(Method, Vec<EvalReport>)> = cfg
        .methods
        .iter()
        .map(|&m| (m, runs.iter().filter_map(|r| r.report(m).cloned()).collect()))
        .collect();
    aggregate(&cfg.seeds, &per_method)
}

/// All seeds of `cfg` on in-memory data. Seeds run in parallel; results keep
/// config order.
pub fn run_in_memory(cfg: &ExperimentConfig, bundle: &EmbeddingBundle, bank: &PromptBank) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&s| run_seed(cfg, bundle, bank, s)).collect()
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<(EmbeddingBundle, PromptBank)> {
    let bundle = load_bundle(&cfg.bundle).ctx(format!("bundle {}", cfg.bundle.display()))?;
    let bank = load_prompt_bank(&cfg.prompts).ctx(format!("prompts {}", cfg.prompts.display()))?;
    Ok((bundle, bank))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::core("json", e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::core(path.display().to_string(), e.into()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Writes reports, parameter files and training logs for one seed.
pub fn write_seed(out: &Path, run: &SeedRun) -> Result<()> {
    let dir = seed_dir(out, run.seed);
    create_dir(&dir)?;
    for (m, report) in &run.reports {
        write_json(&dir.join(format!("report_{}.json", m.name())), report)?;
    }
    for (m, probe, log) in &run.probes {
        let path = dir.join(format!("probe_{}.bin", m.name()));
        save_probe(probe, &path).ctx(path.display().to_string())?;
        if let Some(log) = log {
            write_json(&dir.join(format!("probe_{}_log.json", m.name())), log)?;
        }
    }
    for (k, aug) in run.augmenters.iter().enumerate() {
        let path = dir.join(format!("augnet_{k}.bin"));
        save_augnet(&aug.params, &aug.meta, &path).ctx(path.display().to_string())?;
        write_json(&dir.join(format!("augnet_{k}_log.json")), &aug.log)?;
    }
    Ok(())
}

/// Reads every per-seed report back, for recomputing the aggregate.
pub fn read_reports(out: &Path, cfg: &ExperimentConfig) -> Result<Vec<(Method, Vec<EvalReport>)>> {
    cfg.methods
        .iter()
        .map(|&m| {
            let reports = cfg
                .seeds
                .iter()
                .map(|&s| read_json(&seed_dir(out, s).join(format!("report_{}.json", m.name()))))
                .collect::<Result<Vec<EvalReport>>>()?;
            Ok((m, reports))
        })
        .collect()
}

/// Loads inputs, runs all seeds and writes `resolved_config.json`, the
/// per-seed directories and `aggregate.json` under `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Aggregate> {
    cfg.validate()?;
    let (bundle, bank) = load_inputs(cfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_json(&out.join("resolved_config.json"), cfg)?;
    let runs = run_in_memory(cfg, &bundle, &bank)?;
    for run in &runs {
        write_seed(out, run)?;
    }
    let agg = aggregate_runs(cfg, &runs);
    write_json(&out.join("aggregate.json"), &agg)?;
    Ok(agg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: GridPoint,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Method whose mean validation class-balanced accuracy picks the best row.
    pub selection_method: Method,
    pub rows: Vec<SweepRow>,
    pub best: usize,
}

/// Index of the highest `val_balanced_acc`; the first row wins ties and rows
/// without the metric never win unless none has it.
pub fn select_best(rows: &[SweepRow]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, r) in rows.iter().enumerate() {
        if let Some(v) = r.metrics.get("val_balanced_acc") {
            if v.mean > best_v {
                best = i;
                best_v = v.mean;
            }
        }
    }
    best
}

pub const SWEEP_COLUMNS: [&str; 6] = ["id_acc", "ood_acc", "extended_acc", "da_score", "cc_score", "val_balanced_acc"];

/// Runs every grid point in memory.
pub fn sweep_in_memory(
    cfg: &ExperimentConfig,
    grid: &SweepGrid,
    bundle: &EmbeddingBundle,
    bank: &PromptBank,
) -> Result<SweepReport> {
    let points = grid.points(cfg);
    let selection_method = if cfg.methods.contains(&Method::Lads) { Method::Lads } else { cfg.methods[0] };
    let mut rows = Vec::with_capacity(points.len());
    for point in points {
        let c = point.apply(cfg);
        let runs = run_in_memory(&c, bundle, bank)?;
        let agg = aggregate_runs(&c, &runs);
        let metrics = agg
            .methods
            .into_iter()
            .find(|m| m.method == selection_method)
            .map(|m| m.metrics)
            .unwrap_or_default();
        rows.push(SweepRow { point, metrics });
    }
    let best = select_best(&rows);
    Ok(SweepReport { selection_method, rows, best })
}

pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["alpha", "aug_lr", "aug_weight_decay", "probe_lr", "probe_weight_decay"];
    for c in SWEEP_COLUMNS {
        header.push(c);
    }
    header.push("best");
    w.write_record(&header)?;
    for (i, row) in report.rows.iter().enumerate() {
        let p = row.point;
        let mut rec: Vec<String> = [p.alpha, p.aug_lr, p.aug_weight_decay, p.probe_lr, p.probe_weight_decay]
            .iter()
            .map(|v| v.to_string())
            .collect();
        for c in SWEEP_COLUMNS {
            rec.push(row.metrics.get(c).map(|m| m.mean.to_string()).unwrap_or_default());
        }
        rec.push((i == report.best).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn sweep(cfg: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepReport> {
    cfg.validate()?;
    let (bundle, bank) = load_inputs(cfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_json(&out.join("resolved_config.json"), cfg)?;
    write_json(&out.join("sweep_grid.json"), grid)?;
    let report = sweep_in_memory(cfg, grid, &bundle, &bank)?;
    write_json(&out.join("sweep.json"), &report)?;
    write_sweep_csv(&out.join("sweep.csv"), &report)?;
    Ok(report)
}
