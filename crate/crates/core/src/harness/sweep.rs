//! Hyperparameter grids, parallel execution and seed aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AlgorithmKind, ExperimentConfig, OptimizerKind};
use super::run::{run_online, BinMetrics, Resources, RunMetrics};
use crate::gnt::UtilityKind;
use crate::{Error, Result};

/// Values to sweep over; every `Some` axis multiplies the grid. Axes expand
/// in field order, with the last axis varying fastest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub kind: Option<Vec<AlgorithmKind>>,
    pub optimizer: Option<Vec<OptimizerKind>>,
    pub activation: Option<Vec<String>>,
    pub hidden: Option<Vec<Vec<usize>>>,
    pub step_size: Option<Vec<f64>>,
    pub weight_decay: Option<Vec<f64>>,
    pub replacement_rate: Option<Vec<f64>>,
    pub decay_rate: Option<Vec<f64>>,
    pub maturity_threshold: Option<Vec<u64>>,
    pub utility: Option<Vec<UtilityKind>>,
}

type Setter = Box<dyn Fn(&mut ExperimentConfig)>;

fn axis<T: Clone + 'static>(
    out: &mut Vec<(String, Vec<(String, Setter)>)>,
    name: &str,
    values: &Option<Vec<T>>,
    show: impl Fn(&T) -> String,
    set: impl Fn(&mut ExperimentConfig, T) + Clone + 'static,
) {
    if let Some(vals) = values {
        let entries = vals
            .iter()
            .map(|v| {
                let v2 = v.clone();
                let set = set.clone();
                (
                    show(v),
                    Box::new(move |c: &mut ExperimentConfig| set(c, v2.clone())) as Setter,
                )
            })
            .collect();
        out.push((name.to_string(), entries));
    }
}

/// One point of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config_id: String,
    /// Swept parameter name → value, as text.
    pub params: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl GridCell {
    pub fn label(&self) -> String {
        if self.params.is_empty() {
            return self.config_id.clone();
        }
        self.params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl SweepSpec {
    pub fn is_empty(&self) -> bool {
        *self == SweepSpec::default()
    }

    /// Expands the grid around `base`. Each cell is validated.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<GridCell>> {
        let mut axes: Vec<(String, Vec<(String, Setter)>)> = Vec::new();
        axis(
            &mut axes,
            "kind",
            &self.kind,
            |k| k.name().into(),
            |c, v| c.algorithm.kind = v,
        );
        axis(
            &mut axes,
            "optimizer",
            &self.optimizer,
            |o| format!("{o:?}").to_lowercase(),
            |c, v| c.algorithm.optimizer = v,
        );
        axis(
            &mut axes,
            "activation",
            &self.activation,
            |a| a.clone(),
            |c, v| c.learner.activation = v,
        );
        axis(
            &mut axes,
            "hidden",
            &self.hidden,
            |h| h.iter().map(usize::to_string).collect::<Vec<_>>().join("x"),
            |c, v| c.learner.hidden = v,
        );
        axis(
            &mut axes,
            "step_size",
            &self.step_size,
            f64::to_string,
            |c, v| c.algorithm.step_size = v,
        );
        axis(
            &mut axes,
            "weight_decay",
            &self.weight_decay,
            f64::to_string,
            |c, v| c.algorithm.weight_decay = v,
        );
        axis(
            &mut axes,
            "replacement_rate",
            &self.replacement_rate,
            f64::to_string,
            |c, v| c.algorithm.replacement_rate = v,
        );
        axis(
            &mut axes,
            "decay_rate",
            &self.decay_rate,
            f64::to_string,
            |c, v| c.algorithm.decay_rate = v,
        );
        axis(
            &mut axes,
            "maturity_threshold",
            &self.maturity_threshold,
            u64::to_string,
            |c, v| c.algorithm.maturity_threshold = v,
        );
        axis(
            &mut axes,
            "utility",
            &self.utility,
            |u| u.name().into(),
            |c, v| c.algorithm.utility = v,
        );
        if let Some((name, _)) = axes.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::InvalidConfig(format!("sweep axis {name} is empty")));
        }

        let total: usize = axes.iter().map(|(_, v)| v.len()).product();
        let mut cells = Vec::with_capacity(total);
        for n in 0..total {
            let mut config = base.clone();
            let mut params = BTreeMap::new();
            let mut rem = n;
            for (name, vals) in axes.iter().rev() {
                let (show, set) = &vals[rem % vals.len()];
                rem /= vals.len();
                set(&mut config);
                params.insert(name.clone(), show.clone());
            }
            let config = config.resolved();
            config.validate().map_err(|e| match e {
                Error::InvalidConfig(m) => Error::InvalidConfig(format!("grid cell {n}: {m}")),
                other => other,
            })?;
            cells.push(GridCell {
                config_id: format!("c{n:03}"),
                params,
                config,
            });
        }
        Ok(cells)
    }
}

/// A cell with one outcome per seed, in seed order. Failed runs carry their
/// error message.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: GridCell,
    pub runs: Vec<(u64, std::result::Result<RunMetrics, String>)>,
}

impl CellResult {
    pub fn ok_runs(&self) -> Vec<&RunMetrics> {
        self.runs
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok())
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|(_, r)| r.is_err()).count()
    }

    /// Mean total loss over successful seeds; infinite if none succeeded or
    /// any diverged.
    pub fn mean_total_loss(&self) -> f64 {
        let ok = self.ok_runs();
        if ok.is_empty() {
            return f64::INFINITY;
        }
        ok.iter().map(|r| r.total_loss).sum::<f64>() / ok.len() as f64
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Runs every `(config, seed)` pair on `jobs` threads (0 = one per core).
/// Results come back in input order regardless of scheduling.
pub fn run_many(
    jobs: usize,
    tasks: &[(ExperimentConfig, u64)],
    res: &Resources,
) -> Result<Vec<Result<RunMetrics>>> {
    Ok(pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|(cfg, seed)| run_online(cfg, *seed, res))
            .collect()
    }))
}

/// Runs every cell for every one of its seeds. A failing run is recorded in
/// its cell and does not stop the rest of the sweep.
pub fn run_sweep(cells: &[GridCell], res: &Resources, jobs: usize) -> Result<Vec<CellResult>> {
    let tasks: Vec<(ExperimentConfig, u64)> = cells
        .iter()
        .flat_map(|c| c.config.seeds.iter().map(|&s| (c.config.clone(), s)))
        .collect();
    let mut outcomes = run_many(jobs, &tasks, res)?.into_iter();
    Ok(cells
        .iter()
        .map(|c| CellResult {
            cell: c.clone(),
            runs: c
                .config
                .seeds
                .iter()
                .map(|&s| (s, outcomes.next().unwrap().map_err(|e| e.to_string())))
                .collect(),
        })
        .collect())
}

/// The cell with the lowest mean total loss, ties going to the earlier cell.
pub fn best_cell(results: &[CellResult]) -> Option<&CellResult> {
    results
        .iter()
        .filter(|c| c.mean_total_loss().is_finite())
        .fold(None, |best: Option<&CellResult>, c| match best {
            Some(b) if b.mean_total_loss() <= c.mean_total_loss() => Some(b),
            _ => Some(c),
        })
}

/// Per-bin mean and standard error across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Runs contributing to each bin.
    pub count: Vec<usize>,
}

/// Mean and standard error (sample standard deviation with `n − 1` over
/// `√n`) of `values`. A single value has standard error 0.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Aggregates `metric` bin-by-bin across runs. Runs that stopped early
/// contribute only to the bins they completed.
pub fn aggregate_by(runs: &[&RunMetrics], metric: impl Fn(&BinMetrics) -> Option<f64>) -> Curve {
    let len = runs.iter().map(|r| r.bins.len()).max().unwrap_or(0);
    let mut curve = Curve {
        mean: Vec::with_capacity(len),
        stderr: Vec::with_capacity(len),
        count: Vec::with_capacity(len),
    };
    for b in 0..len {
        let vals: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.bins.get(b).and_then(&metric))
            .collect();
        let (m, s) = mean_stderr(&vals);
        curve.mean.push(m);
        curve.stderr.push(s);
        curve.count.push(vals.len());
    }
    curve
}

/// The mean loss curve with standard errors.
pub fn aggregate(runs: &[&RunMetrics]) -> Curve {
    aggregate_by(runs, |b| Some(b.loss))
}

/// One row of a total-loss table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalLossRow {
    pub config_id: String,
    pub seed: u64,
    pub total_loss: f64,
    pub params: BTreeMap<String, String>,
}

/// One row per `(cell, seed)` that completed.
pub fn total_loss_table(results: &[CellResult]) -> Vec<TotalLossRow> {
    results
        .iter()
        .flat_map(|c| {
            c.ok_runs().into_iter().map(move |r| TotalLossRow {
                config_id: c.cell.config_id.clone(),
                seed: r.seed,
                total_loss: r.total_loss,
                params: c.cell.params.clone(),
            })
        })
        .collect()
}
