//! Flow instances derived from the scenario's traffic templates.

use rand::Rng;

use crate::config::{Direction, ScenarioConfig};
use crate::monitor::TrafficClass;
use crate::rng::substream;

/// TCP acknowledgement frame payload (bits).
pub const TCP_ACK_BITS: f64 = 320.0;
/// Data segments acknowledged by one TCP ACK.
pub const SEGMENTS_PER_ACK: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub station: usize,
    pub direction: Direction,
    pub class: TrafficClass,
    /// Offered load (bit/s) of an inelastic flow; `None` for greedy flows.
    pub rate: Option<f64>,
    pub payload_bits: f64,
    pub start: f64,
    pub stop: f64,
}

impl Flow {
    pub fn active_at(&self, t: f64) -> bool {
        self.start <= t && t < self.stop
    }
}

pub fn instantiate(cfg: &ScenarioConfig) -> Vec<Flow> {
    let n = cfg.n_stations();
    let mut flows = Vec::new();
    for (ti, t) in cfg.traffic.iter().enumerate() {
        for s in t.stations.resolve(n) {
            let start = if t.start_spread > 0.0 {
                let mut rng = substream(cfg.seed, &format!("traffic/{ti}/{s}"));
                t.start + rng.random_range(0.0..t.start_spread)
            } else {
                t.start
            };
            flows.push(Flow {
                station: s,
                direction: t.direction,
                class: t.class,
                rate: t.rate,
                payload_bits: t.payload_bytes * 8.0,
                start,
                stop: t.stop.unwrap_or(f64::INFINITY),
            });
        }
    }
    flows
}

/// Offered traffic of one station at a given instant, by direction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StationDemand {
    pub up_inelastic: f64,
    pub up_inelastic_payload: f64,
    pub up_greedy: bool,
    pub up_elastic_payload: f64,
    pub down_inelastic: f64,
    pub down_inelastic_payload: f64,
    pub down_greedy: bool,
    pub down_elastic_payload: f64,
}

impl StationDemand {
    pub fn is_idle(&self) -> bool {
        self.up_inelastic <= 0.0 && self.down_inelastic <= 0.0 && !self.up_greedy && !self.down_greedy
    }
}

fn mix(acc_rate: &mut f64, acc_payload: &mut f64, rate: f64, payload: f64) {
    let total = *acc_rate + rate;
    *acc_payload = if total > 0.0 { (*acc_payload * *acc_rate + payload * rate) / total } else { payload };
    *acc_rate = total;
}

/// Aggregates the flows active at `t`, per station.
pub fn demands_at(flows: &[Flow], n_stations: usize, t: f64) -> Vec<StationDemand> {
    let mut out = vec![StationDemand::default(); n_stations];
    for f in flows.iter().filter(|f| f.active_at(t)) {
        let d = &mut out[f.station];
        match (f.direction, f.class) {
            (Direction::Uplink, TrafficClass::Inelastic) => {
                mix(&mut d.up_inelastic, &mut d.up_inelastic_payload, f.rate.unwrap_or(0.0), f.payload_bits)
            }
            (Direction::Downlink, TrafficClass::Inelastic) => {
                mix(&mut d.down_inelastic, &mut d.down_inelastic_payload, f.rate.unwrap_or(0.0), f.payload_bits)
            }
            (Direction::Uplink, TrafficClass::Elastic) => {
                d.up_greedy = true;
                d.up_elastic_payload = d.up_elastic_payload.max(f.payload_bits);
            }
            (Direction::Downlink, TrafficClass::Elastic) => {
                d.down_greedy = true;
                d.down_elastic_payload = d.down_elastic_payload.max(f.payload_bits);
            }
        }
    }
    out
}
