//! Scenario files: topology, stations, traffic schedule and model parameters.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assessment::Thresholds;
use crate::channel::ChannelParams;
use crate::mac::MacParams;
use crate::monitor::TrafficClass;
use crate::protocol::ProtocolConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseSpec {
    pub x: f64,
    pub y: f64,
    /// Gateway position relative to the house centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<[f64; 2]>,
    /// Gateway starts switched off.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub off: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    /// Footprint of every house (width along x, depth along y), in metres.
    pub house_size: [f64; 2],
    pub houses: Vec<HouseSpec>,
    /// Walls crossed between a point in house `i` and one in house `j`;
    /// derived from the geometry when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub walls: Option<Vec<Vec<u32>>>,
}

impl Default for Topology {
    fn default() -> Self {
        Self { house_size: [14.0, 12.0], houses: Vec::new(), walls: None }
    }
}

/// Generated stations, placed uniformly inside each house.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    pub per_house: u32,
    /// Clearance from the house walls, in metres.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSpec {
    pub house: usize,
    /// Absolute position; drawn inside the house when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StationSelector {
    List(Vec<usize>),
    /// Only `"all"` is accepted.
    Keyword(String),
}

impl StationSelector {
    pub fn resolve(&self, n_stations: usize) -> Vec<usize> {
        match self {
            StationSelector::List(v) => v.clone(),
            StationSelector::Keyword(_) => (0..n_stations).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Uplink => "uplink",
            Direction::Downlink => "downlink",
        })
    }
}

/// One flow template, instantiated once per selected station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    pub stations: StationSelector,
    pub direction: Direction,
    pub class: TrafficClass,
    /// Offered load of an inelastic flow (bit/s). Elastic flows are greedy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default = "default_payload_bytes")]
    pub payload_bytes: f64,
    #[serde(default)]
    pub start: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<f64>,
    /// Each instance starts at `start + U[0, start_spread)`.
    #[serde(default)]
    pub start_spread: f64,
}

fn default_payload_bytes() -> f64 {
    1500.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Simulated time (s).
    pub duration: f64,
    /// Upper bound of a monitoring cycle (s).
    pub t_max: f64,
    pub ewma_alpha: f64,
    /// Time a released station needs to find and join a new gateway (s).
    pub reassoc_delay: f64,
    /// Fraction of the gap to its fair share an elastic flow closes per cycle.
    pub elastic_damping: f64,
    /// PER bound defining radio visibility and probed rates.
    pub max_per: f64,
    pub thresholds: Thresholds,
    pub mac: MacParams,
    pub channel: ChannelParams,
    pub protocol: ProtocolConfig,
    pub topology: Topology,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population: Option<Population>,
    pub stations: Vec<StationSpec>,
    pub traffic: Vec<TrafficSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            seed: 1,
            duration: 30.0,
            t_max: 0.1,
            ewma_alpha: 0.3,
            reassoc_delay: 0.05,
            elastic_damping: 0.5,
            max_per: 0.1,
            thresholds: Thresholds::default(),
            mac: MacParams::default(),
            channel: ChannelParams::default(),
            protocol: ProtocolConfig::default(),
            topology: Topology::default(),
            population: None,
            stations: Vec::new(),
            traffic: Vec::new(),
        }
    }
}

fn rect_overlap(a: &HouseSpec, b: &HouseSpec, size: [f64; 2]) -> bool {
    (a.x - b.x).abs() < size[0] && (a.y - b.y).abs() < size[1]
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn n_stations(&self) -> usize {
        let generated = self.population.as_ref().map_or(0, |p| p.per_house as usize * self.topology.houses.len());
        generated + self.stations.len()
    }

    /// Time of the last flow start or stop inside the run.
    pub fn last_traffic_change(&self) -> f64 {
        self.traffic
            .iter()
            .flat_map(|t| [Some(t.start + t.start_spread), t.stop])
            .flatten()
            .filter(|&t| t <= self.duration)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return invalid(format!("duration must be finite and >= 0, got {}", self.duration));
        }
        if !(self.t_max > 0.0) {
            return invalid(format!("t_max must be > 0, got {}", self.t_max));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return invalid(format!("ewma_alpha must lie in (0, 1], got {}", self.ewma_alpha));
        }
        if !(self.reassoc_delay > 0.0) {
            return invalid("reassoc_delay must be > 0");
        }
        if !(self.elastic_damping > 0.0 && self.elastic_damping <= 1.0) {
            return invalid("elastic_damping must lie in (0, 1]");
        }
        if !(self.max_per > 0.0 && self.max_per < 1.0) {
            return invalid("max_per must lie in (0, 1)");
        }
        self.thresholds.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mac.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.channel.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.protocol.validate().map_err(ConfigError::Invalid)?;

        let topo = &self.topology;
        let n_houses = topo.houses.len();
        if n_houses == 0 {
            return invalid("topology needs at least one house");
        }
        if n_houses > u16::MAX as usize {
            return invalid("too many houses");
        }
        if !(topo.house_size[0] > 0.0 && topo.house_size[1] > 0.0) {
            return invalid("house_size must be positive");
        }
        for (i, a) in topo.houses.iter().enumerate() {
            if !(a.x.is_finite() && a.y.is_finite()) {
                return invalid(format!("house {i} has a non-finite position"));
            }
            for (j, b) in topo.houses.iter().enumerate().skip(i + 1) {
                if rect_overlap(a, b, topo.house_size) {
                    return invalid(format!("houses {i} and {j} overlap"));
                }
            }
        }
        if let Some(w) = &topo.walls {
            if w.len() != n_houses || w.iter().any(|r| r.len() != n_houses) {
                return invalid(format!("walls must be a {n_houses}x{n_houses} matrix"));
            }
        }
        if let Some(p) = &self.population {
            if !(p.margin >= 0.0 && 2.0 * p.margin < topo.house_size[0].min(topo.house_size[1])) {
                return invalid("population.margin does not fit inside a house");
            }
        }
        for (i, s) in self.stations.iter().enumerate() {
            if s.house >= n_houses {
                return invalid(format!("station {i} refers to missing house {}", s.house));
            }
        }
        let n = self.n_stations();
        if n > 60_000 {
            return invalid("too many stations");
        }
        for (i, t) in self.traffic.iter().enumerate() {
            match &t.stations {
                StationSelector::Keyword(k) if k != "all" => {
                    return invalid(format!("traffic {i}: station selector must be \"all\" or a list, got {k:?}"));
                }
                StationSelector::List(v) => {
                    if let Some(bad) = v.iter().find(|&&s| s >= n) {
                        return invalid(format!("traffic {i}: station {bad} does not exist ({n} stations)"));
                    }
                }
                _ => {}
            }
            match (t.class, t.rate) {
                (TrafficClass::Inelastic, Some(r)) if r > 0.0 && r.is_finite() => {}
                (TrafficClass::Inelastic, _) => return invalid(format!("traffic {i}: inelastic flows need rate > 0")),
                (TrafficClass::Elastic, Some(_)) => {
                    return invalid(format!("traffic {i}: elastic flows are greedy and take no rate"))
                }
                (TrafficClass::Elastic, None) => {}
            }
            if !(t.payload_bytes >= 1.0 && t.payload_bytes <= 7_981.0) {
                return invalid(format!("traffic {i}: payload_bytes must lie in [1, 7981]"));
            }
            if !(t.start >= 0.0 && t.start_spread >= 0.0) {
                return invalid(format!("traffic {i}: start and start_spread must be >= 0"));
            }
            if let Some(stop) = t.stop {
                if !(stop > t.start + t.start_spread) {
                    return invalid(format!("traffic {i}: stop must come after every start"));
                }
            }
        }
        crate::sim::topology::Layout::build(self)?.check_coverage(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        duration = 5.0
        [topology]
        houses = [{ x = 0.0, y = 0.0 }, { x = 30.0, y = 0.0 }]
        [population]
        per_house = 2
        [[traffic]]
        stations = "all"
        direction = "uplink"
        class = "inelastic"
        rate = 1e6
    "#;

    #[test]
    fn defaults_follow_the_published_parameters() {
        let c = ScenarioConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.thresholds, Thresholds { t_l: 0.5, t_r: 0.05, t_a: 0.2, n_l: 10 });
        assert_eq!(c.t_max, 0.1);
        assert_eq!(c.protocol.tau_r, 0.3);
        assert_eq!(c.protocol.tau_p, 0.1);
        assert_eq!(c.protocol.p_wake, 0.5);
        assert_eq!(c.n_stations(), 4);
    }

    #[test]
    fn round_trip_is_identity() {
        let c = ScenarioConfig::from_toml_str(MINIMAL).unwrap();
        let again = ScenarioConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(ScenarioConfig::from_toml_str(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn threshold_order_is_checked() {
        let text = format!("{MINIMAL}\n[thresholds]\nt_r = 0.6\nt_l = 0.5\n");
        let err = ScenarioConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("T_R"), "{err}");
    }

    #[test]
    fn unreachable_station_is_rejected() {
        let text =
            MINIMAL.replace("[population]\n        per_house = 2", "[[stations]]\nhouse = 0\nposition = [5000.0, 0.0]");
        let err = ScenarioConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("no gateway"), "{err}");
    }

    #[test]
    fn overlapping_houses_are_rejected() {
        let text = MINIMAL.replace("x = 30.0", "x = 5.0");
        assert!(ScenarioConfig::from_toml_str(&text).unwrap_err().to_string().contains("overlap"));
    }
}
