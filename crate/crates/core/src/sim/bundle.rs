//! On-disk form of a run: the CSV logs, the scenario and a manifest.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checker::Violation;
use super::engine::RunOutput;
use super::metrics::{RunLog, RunSummary};
use super::traffic::instantiate;
use crate::config::ScenarioConfig;
use crate::monitor::TrafficClass;

pub const MANIFEST: &str = "manifest.json";
pub const SCENARIO: &str = "scenario.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    /// SHA-256 of the canonical scenario serialization.
    pub config_hash: String,
    pub seed: u64,
    pub duration: f64,
    pub check_invariants: bool,
    pub end_time: f64,
    pub summary: RunSummary,
    pub violations: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &ScenarioConfig, out: &RunOutput, check_invariants: bool) -> Self {
        Self {
            scenario: cfg.name.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            duration: cfg.duration,
            check_invariants,
            end_time: out.end_time,
            summary: out.summary.clone(),
            violations: out.violations.iter().map(Violation::to_string).collect(),
        }
    }
}

pub fn write_bundle(dir: &Path, cfg: &ScenarioConfig, out: &RunOutput, check_invariants: bool) -> io::Result<Manifest> {
    fs::create_dir_all(dir)?;
    out.log.write_csvs(dir)?;
    fs::write(dir.join(SCENARIO), cfg.to_toml_string())?;
    let manifest = Manifest::new(cfg, out, check_invariants);
    let json = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
    fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> io::Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    serde_json::from_str(&text).map_err(io::Error::other)
}

/// Offered inelastic load per station once all flows have started.
pub fn offered_inelastic(cfg: &ScenarioConfig) -> Vec<f64> {
    let t = cfg.last_traffic_change();
    let flows = instantiate(cfg);
    (0..cfg.n_stations())
        .map(|s| {
            flows
                .iter()
                .filter(|f| f.station == s && f.class == TrafficClass::Inelastic && f.active_at(t))
                .filter_map(|f| f.rate)
                .sum()
        })
        .collect()
}

/// Rebuilds the log of a bundle from its CSVs and scenario.
pub fn read_log(dir: &Path, cfg: &ScenarioConfig) -> io::Result<RunLog> {
    let mut log = RunLog::read_csvs(dir)?;
    log.n_gateways = cfg.topology.houses.len();
    log.n_stations = cfg.n_stations();
    log.duration = cfg.duration;
    log.initially_on = cfg.topology.houses.iter().map(|h| !h.off).collect();
    log.offered_inelastic = offered_inelastic(cfg);
    Ok(log)
}

/// Recomputes a bundle's summary from its CSVs.
pub fn recompute_summary(dir: &Path, cfg: &ScenarioConfig) -> io::Result<RunSummary> {
    Ok(read_log(dir, cfg)?.summarize(cfg.last_traffic_change()))
}
