//! Parameter sweeps: a base scenario replicated over parameter values,
//! station counts and seeds, run in parallel and merged by key.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, Population, ScenarioConfig};
use crate::monitor::TrafficClass;
use crate::sim::bundle::{read_manifest, recompute_summary, write_bundle, SCENARIO};
use crate::sim::metrics::RunSummary;
use crate::sim::{run, RunOptions, SimError};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Rate of every inelastic flow (bit/s).
    OfferedLoad,
    TL,
    TR,
    TA,
    PWake,
    WallLossDb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Base scenario, relative to the sweep file.
    pub base: PathBuf,
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Stations per house; empty keeps the base population.
    #[serde(default)]
    pub stations_per_gateway: Vec<u32>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub duration: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> SweepError {
    let context = context.into();
    move |source| SweepError::Io { context, source }
}

/// One replication of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub value_index: usize,
    pub value: f64,
    pub stations_per_gateway: Option<u32>,
    pub seed: u64,
    pub config: ScenarioConfig,
}

impl Job {
    pub fn dir_name(&self) -> String {
        let spg = self.stations_per_gateway.map_or("base".to_string(), |n| n.to_string());
        format!("v{:03}_ws{}_s{}", self.value_index, spg, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub stations_per_gateway: String,
    pub seed: u64,
    pub steady_state: Option<f64>,
    pub off_fraction: f64,
    pub mean_ws_per_on: f64,
    pub gateways_on: usize,
    pub orphans: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub value: f64,
    pub stations_per_gateway: String,
    pub runs: usize,
    pub steady_runs: usize,
    pub off_fraction: f64,
    pub mean_ws_per_on: f64,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<(Self, ScenarioConfig), ConfigError> {
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let spec: SweepSpec =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        if spec.values.is_empty() {
            return Err(ConfigError::Invalid("sweep values must not be empty".into()));
        }
        if spec.seeds.is_empty() {
            return Err(ConfigError::Invalid("sweep seeds must not be empty".into()));
        }
        let base_path = path.parent().unwrap_or(Path::new(".")).join(&spec.base);
        let base = ScenarioConfig::load(&base_path)?;
        for job in spec.jobs(&base) {
            job.config.validate()?;
        }
        Ok((spec, base))
    }

    /// The sweep grid in key order.
    pub fn jobs(&self, base: &ScenarioConfig) -> Vec<Job> {
        let variants: Vec<Option<u32>> = if self.stations_per_gateway.is_empty() {
            vec![None]
        } else {
            self.stations_per_gateway.iter().map(|&n| Some(n)).collect()
        };
        let mut jobs = Vec::new();
        for (vi, &value) in self.values.iter().enumerate() {
            for &spg in &variants {
                for &seed in &self.seeds {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    if let Some(d) = self.duration {
                        cfg.duration = d;
                    }
                    if let Some(n) = spg {
                        let margin = cfg.population.as_ref().map_or(1.0, |p| p.margin);
                        cfg.population = Some(Population { per_house: n, margin });
                    }
                    apply(&mut cfg, self.parameter, value);
                    jobs.push(Job { value_index: vi, value, stations_per_gateway: spg, seed, config: cfg });
                }
            }
        }
        jobs
    }
}

fn apply(cfg: &mut ScenarioConfig, p: SweepParameter, v: f64) {
    match p {
        SweepParameter::OfferedLoad => {
            for t in cfg.traffic.iter_mut().filter(|t| t.class == TrafficClass::Inelastic) {
                t.rate = Some(v);
            }
        }
        SweepParameter::TL => cfg.thresholds.t_l = v,
        SweepParameter::TR => cfg.thresholds.t_r = v,
        SweepParameter::TA => cfg.thresholds.t_a = v,
        SweepParameter::PWake => cfg.protocol.p_wake = v,
        SweepParameter::WallLossDb => cfg.channel.wall_loss_db = v,
    }
}

fn row(job: &Job, s: &RunSummary, violations: usize) -> SweepRow {
    let on = s.gateways_on;
    let associated: usize = s.stations_per_gateway.iter().sum();
    SweepRow {
        value: job.value,
        stations_per_gateway: job.stations_per_gateway.map_or("base".into(), |n| n.to_string()),
        seed: job.seed,
        steady_state: s.steady_state,
        off_fraction: s.off_fraction,
        mean_ws_per_on: if on > 0 { associated as f64 / on as f64 } else { 0.0 },
        gateways_on: on,
        orphans: s.orphans,
        violations,
    }
}

/// Seed averages per `(value, variant)`, in sweep order.
pub fn aggregate(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((u64, String), Vec<&SweepRow>)> = Vec::new();
    let mut index: BTreeMap<(u64, String), usize> = BTreeMap::new();
    for r in rows {
        let key = (r.value.to_bits(), r.stations_per_gateway.clone());
        let i = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push(r);
    }
    groups
        .into_iter()
        .map(|((_, spg), rs)| {
            let n = rs.len() as f64;
            SummaryRow {
                value: rs[0].value,
                stations_per_gateway: spg,
                runs: rs.len(),
                steady_runs: rs.iter().filter(|r| r.steady_state.is_some()).count(),
                off_fraction: rs.iter().map(|r| r.off_fraction).sum::<f64>() / n,
                mean_ws_per_on: rs.iter().map(|r| r.mean_ws_per_on).sum::<f64>() / n,
            }
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SweepError> {
    let ctx = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| SweepError::Io { context: ctx.clone(), source: e.into() })?;
    for r in rows {
        w.serialize(r).map_err(|e| SweepError::Io { context: ctx.clone(), source: e.into() })?;
    }
    w.flush().map_err(io_err(ctx))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, SweepError> {
    let ctx = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| SweepError::Io { context: ctx.clone(), source: e.into() })?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| SweepError::Io { context: ctx, source: e.into() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every job of the grid, writing one bundle per job under `out/runs`
/// and the merged tables in `out`.
pub fn run_sweep(
    spec: &SweepSpec,
    base: &ScenarioConfig,
    out: &Path,
    opts: &RunOptions,
) -> Result<SweepOutput, SweepError> {
    let runs = out.join(RUNS_DIR);
    fs::create_dir_all(&runs).map_err(io_err(runs.display().to_string()))?;
    let jobs = spec.jobs(base);
    let mut rows: Vec<(usize, SweepRow)> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, job)| {
            let result = run(&job.config, opts)?;
            let dir = runs.join(job.dir_name());
            write_bundle(&dir, &job.config, &result, opts.check_invariants)
                .map_err(io_err(dir.display().to_string()))?;
            Ok((i, row(job, &result.summary, result.violations.len())))
        })
        .collect::<Result<_, SweepError>>()?;
    rows.sort_by_key(|r| r.0);
    let rows: Vec<SweepRow> = rows.into_iter().map(|r| r.1).collect();
    let summary = aggregate(&rows);
    write_rows(&out.join(SWEEP_CSV), &rows)?;
    write_rows(&out.join(SUMMARY_CSV), &summary)?;
    Ok(SweepOutput { rows, summary })
}

/// Recomputes the merged tables of a sweep directory from the per-run CSVs
/// and returns the mismatches found.
pub fn verify_sweep(out: &Path) -> Result<Vec<String>, SweepError> {
    let rows: Vec<SweepRow> = read_rows(&out.join(SWEEP_CSV))?;
    let summary: Vec<SummaryRow> = read_rows(&out.join(SUMMARY_CSV))?;
    let runs = out.join(RUNS_DIR);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(io_err(runs.display().to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut problems = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for r in &rows {
        if !values.iter().any(|v| v.to_bits() == r.value.to_bits()) {
            values.push(r.value);
        }
    }
    let mut by_key: BTreeMap<(u64, String, u64), SweepRow> = BTreeMap::new();
    for dir in &dirs {
        let (cfg, recomputed, violations) = verify_run(dir, &mut problems)?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let Some((vi, spg)) = parse_dir_name(&name) else {
            problems.push(format!("{name}: unexpected run directory name"));
            continue;
        };
        let Some(&value) = values.get(vi) else {
            problems.push(format!("{name}: value index {vi} not in {SWEEP_CSV}"));
            continue;
        };
        let job = Job { value_index: vi, value, stations_per_gateway: spg.parse().ok(), seed: cfg.seed, config: cfg };
        by_key.insert((value.to_bits(), spg, job.seed), row(&job, &recomputed, violations));
    }
    for r in &rows {
        match by_key.get(&(r.value.to_bits(), r.stations_per_gateway.clone(), r.seed)) {
            Some(again) if again == r => {}
            Some(again) => problems.push(format!("row {r:?} recomputes to {again:?}")),
            None => problems.push(format!("row {r:?} has no run directory")),
        }
    }
    let again = aggregate(&rows);
    if again != summary {
        problems.push(format!("{SUMMARY_CSV} differs from the seed averages of {SWEEP_CSV}"));
    }
    Ok(problems)
}

fn parse_dir_name(name: &str) -> Option<(usize, String)> {
    let mut parts = name.split('_');
    let vi = parts.next()?.strip_prefix('v')?.parse().ok()?;
    let spg = parts.next()?.strip_prefix("ws")?.to_string();
    Some((vi, spg))
}

/// Checks a run bundle: scenario hash and summary against the manifest.
pub fn verify_run(dir: &Path, problems: &mut Vec<String>) -> Result<(ScenarioConfig, RunSummary, usize), SweepError> {
    let name = dir.display().to_string();
    let manifest = read_manifest(dir).map_err(io_err(format!("{name}/manifest.json")))?;
    let cfg = ScenarioConfig::load(dir.join(SCENARIO))?;
    if cfg.hash() != manifest.config_hash {
        problems.push(format!("{name}: scenario hash differs from the manifest"));
    }
    let summary = recompute_summary(dir, &cfg).map_err(io_err(name.clone()))?;
    if summary != manifest.summary {
        let (a, b) = (serde_json::to_value(&summary).ok(), serde_json::to_value(&manifest.summary).ok());
        let fields: Vec<String> = match (a, b) {
            (Some(serde_json::Value::Object(a)), Some(serde_json::Value::Object(b))) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(v))
                .map(|(k, v)| format!("{k} {v} vs {}", b.get(k).unwrap_or(&serde_json::Value::Null)))
                .collect(),
            _ => Vec::new(),
        };
        problems.push(format!("{name}: summary recomputed from CSVs differs from the manifest: {}", fields.join(", ")));
    }
    Ok((cfg, summary, manifest.violations.len()))
}
