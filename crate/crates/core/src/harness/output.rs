//! On-disk results: a per-bin metrics CSV, a JSON manifest describing every
//! configuration, and summary reports built from the two.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{BinMetrics, RunMetrics};
use super::sweep::{mean_stderr, CellResult};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves_long.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub seed: u64,
    /// Absent when the run diverged or failed.
    pub total_loss: Option<f64>,
    pub diverged_at: Option<u64>,
    pub data_checksum: Option<u64>,
    pub replacements: Option<u64>,
    pub bins: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub params: BTreeMap<String, String>,
    /// Fully resolved configuration.
    pub config: ExperimentConfig,
    pub runs: Vec<ManifestRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub configs: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn from_results(results: &[CellResult]) -> Self {
        let configs = results
            .iter()
            .map(|c| {
                let runs = c
                    .runs
                    .iter()
                    .map(|(seed, r)| match r {
                        Ok(m) => ManifestRun {
                            seed: *seed,
                            total_loss: m.total_loss.is_finite().then_some(m.total_loss),
                            diverged_at: m.diverged_at,
                            data_checksum: Some(m.data_checksum),
                            replacements: Some(m.replacements),
                            bins: m.bins.len(),
                            error: None,
                        },
                        Err(e) => ManifestRun {
                            seed: *seed,
                            total_loss: None,
                            diverged_at: None,
                            data_checksum: None,
                            replacements: None,
                            bins: 0,
                            error: Some(e.clone()),
                        },
                    })
                    .collect();
                (
                    c.cell.config_id.clone(),
                    ManifestEntry {
                        params: c.cell.params.clone(),
                        config: c.cell.config.clone(),
                        runs,
                    },
                )
            })
            .collect();
        Self {
            version: 1,
            configs,
        }
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory, so
/// readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The metrics CSV for `results` as bytes. Saturation gets one column per
/// hidden layer of the deepest configuration; shallower ones leave blanks.
pub fn metrics_csv(results: &[CellResult]) -> Result<Vec<u8>> {
    let layers = results
        .iter()
        .map(|c| c.cell.config.learner.hidden.len())
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["config_id", "seed", "bin", "loss", "accuracy", "weight_mag"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=layers).map(|l| format!("saturation_l{l}")));
    header.push("input_grad_mag".into());
    w.write_record(&header)?;
    for c in results {
        for r in c.ok_runs() {
            for b in &r.bins {
                let mut rec = vec![
                    c.cell.config_id.clone(),
                    r.seed.to_string(),
                    b.bin.to_string(),
                    b.loss.to_string(),
                    opt(b.accuracy),
                    opt(b.weight_mag),
                ];
                rec.extend((0..layers).map(|l| opt(b.saturation.get(l).copied())));
                rec.push(opt(b.input_grad_mag));
                w.write_record(&rec)?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Io {
        path: PathBuf::from(METRICS_FILE),
        source: e.into_error(),
    })
}

/// Writes `metrics.csv` and `manifest.json` into `dir`, creating it.
pub fn write_results(dir: &Path, results: &[CellResult]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(METRICS_FILE), &metrics_csv(results)?)?;
    let manifest = serde_json::to_vec_pretty(&Manifest::from_results(results))?;
    write_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

/// Results read back from disk, grouped by config and seed.
#[derive(Debug, Clone)]
pub struct StoredResults {
    pub manifest: Manifest,
    /// `config_id → runs`, each run holding its bins in order.
    pub runs: BTreeMap<String, Vec<RunMetrics>>,
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// Reads a results directory written by [`write_results`].
pub fn read_results(dir: &Path) -> Result<StoredResults> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    if !manifest_path.exists() || !metrics_path.exists() {
        return Err(Error::InvalidConfig(format!(
            "no runs found in {}",
            dir.display()
        )));
    }
    let bytes = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;

    let mut rdr = csv::Reader::from_path(&metrics_path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing =
        |name: &str| Error::Shape(format!("{} has no column {name}", metrics_path.display()));
    let (ci, si, bi, li) = (
        col("config_id").ok_or_else(|| missing("config_id"))?,
        col("seed").ok_or_else(|| missing("seed"))?,
        col("bin").ok_or_else(|| missing("bin"))?,
        col("loss").ok_or_else(|| missing("loss"))?,
    );
    let (ai, wi, gi) = (col("accuracy"), col("weight_mag"), col("input_grad_mag"));
    let sat: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("saturation_l"))
        .map(|(i, _)| i)
        .collect();

    // Every completed run comes from the manifest, so a run that diverged
    // before its first bin is still reported.
    let mut runs: BTreeMap<String, Vec<RunMetrics>> = BTreeMap::new();
    for (id, entry) in &manifest.configs {
        let list: Vec<RunMetrics> = entry
            .runs
            .iter()
            .filter(|m| m.error.is_none())
            .map(|m| RunMetrics {
                seed: m.seed,
                bin_size: entry.config.bin_size(),
                bins: Vec::with_capacity(m.bins),
                total_loss: m.total_loss.unwrap_or(f64::INFINITY),
                diverged_at: m.diverged_at,
                data_checksum: m.data_checksum.unwrap_or(0),
                replacements: m.replacements.unwrap_or(0),
            })
            .collect();
        if !list.is_empty() {
            runs.insert(id.clone(), list);
        }
    }
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| {
            Error::Shape(format!(
                "{} row {}: bad {what}",
                metrics_path.display(),
                line + 2
            ))
        };
        let get = |i: Option<usize>| i.and_then(|i| rec.get(i)).unwrap_or("");
        let config_id = rec[ci].to_string();
        let seed: u64 = rec[si].parse().map_err(|_| bad("seed"))?;
        let bin = BinMetrics {
            bin: rec[bi].parse().map_err(|_| bad("bin"))?,
            loss: rec[li].parse().map_err(|_| bad("loss"))?,
            accuracy: parse_opt(get(ai)).map_err(|_| bad("accuracy"))?,
            weight_mag: parse_opt(get(wi)).map_err(|_| bad("weight_mag"))?,
            saturation: sat
                .iter()
                .filter_map(|&i| parse_opt(&rec[i]).transpose())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("saturation"))?,
            input_grad_mag: parse_opt(get(gi)).map_err(|_| bad("input_grad_mag"))?,
        };
        let run = runs
            .get_mut(&config_id)
            .and_then(|list| list.iter_mut().find(|r| r.seed == seed))
            .ok_or_else(|| {
                Error::InvalidId(format!("{config_id} seed {seed} is not in the manifest"))
            })?;
        run.bins.push(bin);
    }
    if runs.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no runs found in {}",
            dir.display()
        )));
    }
    Ok(StoredResults { manifest, runs })
}

/// Summary of one configuration across its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config_id: String,
    pub params: String,
    pub seeds: usize,
    pub diverged: usize,
    pub failed: usize,
    pub mean_total_loss: f64,
    pub stderr_total_loss: f64,
    pub first_loss: f64,
    pub min_loss: f64,
    pub final_loss: f64,
    /// Final-bin mean loss over the minimum bin mean loss.
    pub degradation_ratio: f64,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
}

/// One `(config, bin, metric)` point of the seed-averaged curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub config_id: String,
    pub bin: usize,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Sorted by mean total loss, best first: the sensitivity table.
    pub summaries: Vec<ConfigSummary>,
    pub curves: Vec<CurvePoint>,
}

fn summarize(
    id: &str,
    entry: &ManifestEntry,
    runs: &[RunMetrics],
    curves: &mut Vec<CurvePoint>,
) -> ConfigSummary {
    let refs: Vec<&RunMetrics> = runs.iter().collect();
    let mut push = |metric: &str, f: &dyn Fn(&BinMetrics) -> Option<f64>| {
        let c = super::sweep::aggregate_by(&refs, f);
        for (b, ((&mean, &stderr), &n)) in c.mean.iter().zip(&c.stderr).zip(&c.count).enumerate() {
            if n > 0 {
                curves.push(CurvePoint {
                    config_id: id.to_string(),
                    bin: b,
                    metric: metric.into(),
                    mean,
                    stderr,
                    n,
                });
            }
        }
        c
    };
    let loss = push("loss", &|b| Some(b.loss));
    let acc = push("accuracy", &|b| b.accuracy);
    push("weight_mag", &|b| b.weight_mag);
    push("input_grad_mag", &|b| b.input_grad_mag);
    let layers = runs
        .iter()
        .map(|r| r.bins.first().map_or(0, |b| b.saturation.len()))
        .max()
        .unwrap_or(0);
    for l in 0..layers {
        push(&format!("saturation_l{}", l + 1), &move |b| {
            b.saturation.get(l).copied()
        });
    }

    let finite: Vec<f64> = runs
        .iter()
        .map(|r| r.total_loss)
        .filter(|t| t.is_finite())
        .collect();
    let (mean_total, se_total) = mean_stderr(&finite);
    let min_loss = loss.mean.iter().copied().fold(f64::INFINITY, f64::min);
    let final_loss = loss.mean.last().copied().unwrap_or(f64::NAN);
    let acc_vals: Vec<f64> = acc.mean.iter().copied().filter(|v| v.is_finite()).collect();
    let label = entry
        .params
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",");
    ConfigSummary {
        config_id: id.to_string(),
        params: label,
        seeds: entry.runs.len(),
        diverged: entry
            .runs
            .iter()
            .filter(|r| r.diverged_at.is_some())
            .count(),
        failed: entry.runs.iter().filter(|r| r.error.is_some()).count(),
        mean_total_loss: if finite.len() == runs.len() {
            mean_total
        } else {
            f64::INFINITY
        },
        stderr_total_loss: se_total,
        first_loss: loss.mean.first().copied().unwrap_or(f64::NAN),
        min_loss,
        final_loss,
        degradation_ratio: final_loss / min_loss,
        final_accuracy: acc_vals.last().copied(),
        best_accuracy: acc_vals.iter().copied().reduce(f64::max),
    }
}

/// Builds the summary and long-format curves for a results directory.
pub fn build_report(stored: &StoredResults) -> Report {
    let mut curves = Vec::new();
    let mut summaries: Vec<ConfigSummary> = stored
        .runs
        .iter()
        .map(|(id, runs)| summarize(id, &stored.manifest.configs[id], runs, &mut curves))
        .collect();
    summaries.sort_by(|a, b| a.mean_total_loss.total_cmp(&b.mean_total_loss));
    Report { summaries, curves }
}

/// Reads `dir`, writes `summary.csv` and `curves_long.csv` next to the
/// inputs, and returns the report.
pub fn report_dir(dir: &Path) -> Result<Report> {
    let report = build_report(&read_results(dir)?);
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &report.summaries {
        w.serialize(s)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(dir.join(SUMMARY_FILE), e.into_error()))?;
    write_atomic(&dir.join(SUMMARY_FILE), &bytes)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &report.curves {
        w.serialize(p)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(dir.join(CURVES_FILE), e.into_error()))?;
    write_atomic(&dir.join(CURVES_FILE), &bytes)?;
    Ok(report)
}
