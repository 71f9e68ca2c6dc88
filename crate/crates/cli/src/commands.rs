use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use mmpda::evalx::{accuracy_f1, domain_gap_matrix, Metrics};
use mmpda::exec;
use mmpda::gradsuite;
use mmpda::losses::AdaptWeights;
use mmpda::model::{Checkpoint, ModelBundle};
use mmpda::synthdata::{generate_domain, write_domain_csv, Role};
use mmpda::trainer::{run_training, AdaptConfig, RunReport};
use mmpda::Tensor;

use crate::config::{load_domains, ExperimentConfig, SweepPreset};
use crate::error::{CliError, CliResult};
use crate::log;

/// A loaded config plus the directory its relative paths resolve against.
pub struct Loaded {
    pub cfg: ExperimentConfig,
    pub base: PathBuf,
}

impl Loaded {
    /// Reads `path` and applies `--seed` / `--out` overrides. A configured
    /// `out_dir` resolves against the config file, `--out` against the
    /// working directory.
    pub fn from_args(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(s) = seed {
            cfg.seeds = vec![s];
        }
        cfg.out_dir = match out {
            Some(o) => o,
            None => base.join(&cfg.out_dir),
        };
        Ok(Loaded { cfg, base })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn report_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("{}-seed{seed}.report.json", cfg.run_id))
}

pub fn checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("{}-seed{seed}.checkpoint.json", cfg.run_id))
}

/// Writes every generator-backed domain of the config as CSV.
pub fn generate(l: &Loaded) -> CliResult<Vec<PathBuf>> {
    l.cfg.prepare_out_dir()?;
    let mut written = Vec::new();
    for &seed in &l.cfg.seeds {
        let entries = l.cfg.sources.iter().map(|e| (e, Role::Source));
        for (entry, role) in entries.chain(std::iter::once((&l.cfg.target, Role::Target))) {
            let Some(spec) = entry.spec(seed).map_err(CliError::config)? else {
                continue;
            };
            let ds = generate_domain(&spec).map_err(CliError::config)?;
            let ds = ds.with_role(role).map_err(CliError::config)?;
            let path = l.cfg.out_dir.join(format!("{}-seed{seed}.csv", spec.id));
            write_domain_csv(&ds, &path).map_err(CliError::runtime)?;
            log::info("generated", json!({"domain": spec.id, "seed": seed, "rows": ds.len(), "path": path}));
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub stdev: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stdev = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, stdev }
    }
}

#[derive(Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub report: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub runs: Vec<SeedSummary>,
    pub accuracy: Option<Stat>,
    pub f1: Option<Stat>,
}

fn train_one(l: &Loaded, adapt: &AdaptConfig) -> CliResult<(ModelBundle, RunReport)> {
    let (sources, target) = load_domains(&l.cfg, &l.base, adapt.seed)?;
    let (model, mut report) = run_training(&sources, &target, adapt).map_err(CliError::runtime)?;
    report.run_id = format!("{}-seed{}", l.cfg.run_id, adapt.seed);
    report.config = serde_json::to_value(&l.cfg).map_err(CliError::runtime)?;
    Ok((model, report))
}

/// One run per seed; each writes its own report and checkpoint, the
/// summary is written once all runs have finished.
pub fn train(l: &Loaded) -> CliResult<TrainSummary> {
    l.cfg.prepare_out_dir()?;
    let outcomes = exec::map(l.cfg.mode, &l.cfg.seeds, |&seed| {
        let result = train_one(l, &l.cfg.config_for(seed)).and_then(|(model, report)| {
            let path = report_path(&l.cfg, seed);
            report.write(&path).map_err(CliError::runtime)?;
            Checkpoint::from_model(&model)
                .save(&checkpoint_path(&l.cfg, seed))
                .map_err(CliError::runtime)?;
            Ok((report, path))
        });
        (seed, result)
    });

    let mut runs = Vec::new();
    let mut first_error = None;
    for (seed, outcome) in outcomes {
        match outcome {
            Ok((report, path)) => {
                let m = report.final_metrics;
                log::info(
                    "run_finished",
                    json!({"seed": seed, "accuracy": m.map(|m| m.accuracy), "f1": m.map(|m| m.f1), "report": path}),
                );
                runs.push(SeedSummary {
                    seed,
                    accuracy: m.map(|m| m.accuracy),
                    f1: m.map(|m| m.f1),
                    report: path,
                });
            }
            Err(e) => {
                log::error("run_failed", json!({"seed": seed, "error": e.to_string()}));
                first_error.get_or_insert(e);
            }
        }
    }
    let collect = |f: fn(&SeedSummary) -> Option<f64>| -> Option<Stat> {
        let v: Option<Vec<f64>> = runs.iter().map(f).collect();
        v.filter(|v| !v.is_empty()).map(|v| Stat::of(&v))
    };
    let summary = TrainSummary {
        run_id: l.cfg.run_id.clone(),
        accuracy: collect(|r| r.accuracy),
        f1: collect(|r| r.f1),
        runs,
    };
    write_json(&l.cfg.out_dir.join(format!("{}.summary.json", l.cfg.run_id)), &summary)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Fused-head metrics of a checkpoint on the config's target domain, whose
/// labels must be known.
pub fn evaluate(l: &Loaded, checkpoint: &Path) -> CliResult<Metrics> {
    let model = Checkpoint::load(checkpoint)
        .and_then(Checkpoint::into_model)
        .map_err(|e| CliError::config(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let seed = l.cfg.seeds[0];
    let (_, target) = load_domains(&l.cfg, &l.base, seed)?;
    let labels = target
        .held_out_labels()
        .ok_or_else(|| CliError::config("target: evaluation needs labelled target rows"))?;
    let preds = model.predict_classes(&target.all()).map_err(CliError::runtime)?;
    let metrics = accuracy_f1(&preds, &labels).map_err(CliError::runtime)?;
    l.cfg.prepare_out_dir()?;
    write_json(&l.cfg.out_dir.join(format!("{}.metrics.json", l.cfg.run_id)), &metrics)?;
    Ok(metrics)
}

/// Pairwise CORAL distances between every configured domain, on raw inputs
/// or, with a checkpoint, on fused features.
pub fn gapmatrix(l: &Loaded, checkpoint: Option<&Path>) -> CliResult<mmpda::evalx::GapMatrix> {
    let model = checkpoint
        .map(|p| {
            Checkpoint::load(p)
                .and_then(Checkpoint::into_model)
                .map_err(|e| CliError::config(format!("checkpoint {}: {e}", p.display())))
        })
        .transpose()?;
    let seed = l.cfg.seeds[0];
    let (sources, target) = load_domains(&l.cfg, &l.base, seed)?;
    let features = sources
        .iter()
        .chain(std::iter::once(&target))
        .map(|d| {
            let x: Tensor = match &model {
                None => d.concatenated(),
                Some(m) => {
                    let feats = d
                        .all()
                        .iter()
                        .enumerate()
                        .map(|(u, x)| m.encode(x, u))
                        .collect::<mmpda::Result<Vec<_>>>()?;
                    m.fuse(&feats)?
                }
            };
            Ok((d.id().to_string(), x))
        })
        .collect::<mmpda::Result<Vec<_>>>()
        .map_err(CliError::runtime)?;
    let gap = domain_gap_matrix(&features, l.cfg.mode).map_err(CliError::runtime)?;
    l.cfg.prepare_out_dir()?;
    write_json(&l.cfg.out_dir.join(format!("{}.gapmatrix.json", l.cfg.run_id)), &gap)?;
    Ok(gap)
}

pub fn gradcheck(seed: u64, out: Option<&Path>) -> CliResult<gradsuite::SuiteReport> {
    let report = gradsuite::run_suite(seed).map_err(CliError::runtime)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::config(format!("out: {e}")))?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    let worst = report.worst().map(|w| (w.name.clone(), w.max_rel_error));
    log::info(
        "gradcheck",
        json!({"checks": report.checks.len(), "worst": worst, "passed": report.passed()}),
    );
    if report.passed() {
        Ok(report)
    } else {
        Err(CliError::runtime(format!("gradient check failed: {worst:?}")))
    }
}

/// One sweep cell: adaptation weights plus the reversal switch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub weights: AdaptWeights,
    pub grl: bool,
}

fn sensitivity_cells(grl: bool) -> Vec<Cell> {
    let w = |lambda, alpha, beta, gamma, eta| Cell {
        weights: AdaptWeights {
            alpha,
            beta,
            gamma,
            eta,
            lambda,
        },
        grl,
    };
    let mut cells = vec![w(0.0, 0.0, 0.0, 0.0, 0.0)];
    let rows = [
        [1.0, 1.0, 1.0, 1.0],
        [0.1, 1.0, 1.0, 1.0],
        [10.0, 1.0, 1.0, 1.0],
        [1.0, 0.1, 1.0, 1.0],
        [1.0, 10.0, 1.0, 1.0],
        [1.0, 1.0, 0.1, 1.0],
        [1.0, 1.0, 10.0, 1.0],
        [1.0, 1.0, 1.0, 0.1],
        [1.0, 1.0, 1.0, 10.0],
        [10.0, 0.1, 10.0, 0.1],
    ];
    cells.extend(rows.iter().map(|r| w(1.0, r[0], r[1], r[2], r[3])));
    cells.push(w(10.0, 10.0, 0.1, 10.0, 0.1));
    cells
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> CliResult<Vec<Cell>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::config("sweep: missing [sweep] table"))?;
    if sweep.preset == Some(SweepPreset::Sensitivity) {
        return Ok(sensitivity_cells(cfg.adapt.grl));
    }
    let base = cfg.adapt.weights;
    let axis = |v: &Option<Vec<f64>>, d: f64| v.clone().unwrap_or_else(|| vec![d]);
    let mut cells = Vec::new();
    for &lambda in &axis(&sweep.lambda, base.lambda) {
        for &alpha in &axis(&sweep.alpha, base.alpha) {
            for &beta in &axis(&sweep.beta, base.beta) {
                for &gamma in &axis(&sweep.gamma, base.gamma) {
                    for &eta in &axis(&sweep.eta, base.eta) {
                        for &grl in sweep.grl.as_deref().unwrap_or(&[cfg.adapt.grl]) {
                            let weights = AdaptWeights {
                                alpha,
                                beta,
                                gamma,
                                eta,
                                lambda,
                            };
                            weights
                                .validate()
                                .map_err(|e| CliError::config(format!("sweep: {e}")))?;
                            cells.push(Cell { weights, grl });
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    row: usize,
    lambda: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    eta: f64,
    grl: bool,
    seed: String,
    accuracy: f64,
    f1: f64,
}

/// Runs every (cell, seed) pair and writes `<run_id>.sweep.csv`: one row
/// per pair, then one `seed = mean` row per cell. Returns the CSV path.
pub fn sweep(l: &Loaded) -> CliResult<PathBuf> {
    let cells = sweep_cells(&l.cfg)?;
    l.cfg.prepare_out_dir()?;
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| l.cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    log::info("sweep_started", json!({"cells": cells.len(), "runs": jobs.len()}));
    let results = exec::try_map(l.cfg.mode, &jobs, |&(c, seed)| {
        let adapt = AdaptConfig {
            weights: cells[c].weights,
            grl: cells[c].grl,
            ..l.cfg.config_for(seed)
        };
        let (_, report) = train_one(l, &adapt)?;
        report
            .final_metrics
            .ok_or_else(|| CliError::config("target: sweeps need labelled target rows"))
    })?;

    let path = l.cfg.out_dir.join(format!("{}.sweep.csv", l.cfg.run_id));
    let mut w = csv::Writer::from_path(&path).map_err(CliError::runtime)?;
    let row = |c: usize, seed: String, accuracy, f1| {
        let Cell { weights: wt, grl } = cells[c];
        SweepRow {
            row: c,
            lambda: wt.lambda,
            alpha: wt.alpha,
            beta: wt.beta,
            gamma: wt.gamma,
            eta: wt.eta,
            grl,
            seed,
            accuracy,
            f1,
        }
    };
    for (&(c, seed), m) in jobs.iter().zip(&results) {
        w.serialize(row(c, seed.to_string(), m.accuracy, m.f1)).map_err(CliError::runtime)?;
    }
    for c in 0..cells.len() {
        let of_cell: Vec<_> = jobs.iter().zip(&results).filter(|((jc, _), _)| *jc == c).map(|(_, m)| m).collect();
        let acc = Stat::of(&of_cell.iter().map(|m| m.accuracy).collect::<Vec<_>>()).mean;
        let f1 = Stat::of(&of_cell.iter().map(|m| m.f1).collect::<Vec<_>>()).mean;
        w.serialize(row(c, "mean".into(), acc, f1)).map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)?;
    log::info("sweep_finished", json!({"path": path}));
    Ok(path)
}
