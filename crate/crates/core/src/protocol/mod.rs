//! Distributed offload protocol run by every gateway of the federation.
//!
//! Each gateway owns a [`GatewayAgent`], a sans-IO state machine: the
//! simulation engine feeds it cycle reports, bus messages, probe
//! observations and timer expirations, and executes the [`Action`]s it
//! returns.

mod agent;
pub mod messages;
pub mod probe;
pub mod selection;

use serde::{Deserialize, Serialize};

pub use agent::{Action, AgentParams, BssView, Destination, GatewayAgent, Timer};
pub use messages::{Combo, Header, ProcedureId, ProtocolMessage, StationEntry};
pub use probe::{Probe, ProbeObservation};
pub use selection::{heavy_ws_order, select_allocation, Allocation};

/// Timers and policies of the offload protocol. Durations in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub enabled: bool,
    /// Response collection timeout `tau_r`.
    pub tau_r: f64,
    /// Probe listening window `tau_p`.
    pub tau_p: f64,
    /// One-way latency of the backhaul bus.
    pub bus_latency: f64,
    /// Probability that a message on the bus is lost.
    pub bus_loss: f64,
    /// Probability that an off gateway wakes on a flagged request.
    pub p_wake: f64,
    pub dwell_light_cycles: u32,
    pub dwell_light_secs: f64,
    pub dwell_heavy_cycles: u32,
    pub dwell_heavy_secs: f64,
    /// Uniform backoff range after deferring to another procedure.
    pub defer_backoff: (f64, f64),
    /// First retry delay after a failed procedure; doubles per failure.
    pub retry_base: f64,
    pub retry_cap: f64,
    /// Delay between the request reaching responders and the first RTS.
    pub probe_delay: f64,
    /// Largest number of heard stations combined into subsets.
    pub max_subset: usize,
    /// How long an accepted station is awaited before the grant lapses.
    pub authorization_timeout: f64,
    /// A foreign procedure silent for this long is presumed dead.
    pub procedure_timeout: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau_r: 0.3,
            tau_p: 0.1,
            bus_latency: 0.005,
            bus_loss: 0.0,
            p_wake: 0.5,
            dwell_light_cycles: 30,
            dwell_light_secs: 3.0,
            dwell_heavy_cycles: 20,
            dwell_heavy_secs: 2.0,
            defer_backoff: (1.0, 3.0),
            retry_base: 2.0,
            retry_cap: 32.0,
            probe_delay: 0.001,
            max_subset: 12,
            authorization_timeout: 5.0,
            procedure_timeout: 5.0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("tau_r", self.tau_r),
            ("tau_p", self.tau_p),
            ("retry_base", self.retry_base),
            ("authorization_timeout", self.authorization_timeout),
            ("procedure_timeout", self.procedure_timeout),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("protocol.{name} must be > 0, got {v}"));
            }
        }
        if !(self.bus_latency >= 0.0 && self.probe_delay >= 0.0) {
            return Err("protocol latencies must be >= 0".into());
        }
        if self.bus_latency + self.probe_delay >= self.tau_p {
            return Err("probes must start inside the probe window (bus_latency + probe_delay < tau_p)".into());
        }
        if self.tau_p + 2.0 * self.bus_latency >= self.tau_r {
            return Err("responses cannot arrive before tau_r (need tau_p + 2 bus_latency < tau_r)".into());
        }
        for (name, p) in [("p_wake", self.p_wake), ("bus_loss", self.bus_loss)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("protocol.{name} must lie in [0, 1], got {p}"));
            }
        }
        let (lo, hi) = self.defer_backoff;
        if !(0.0 <= lo && lo <= hi) {
            return Err(format!("protocol.defer_backoff must satisfy 0 <= min <= max, got ({lo}, {hi})"));
        }
        if self.retry_cap < self.retry_base {
            return Err("protocol.retry_cap must be >= retry_base".into());
        }
        if self.max_subset == 0 || self.max_subset > 16 {
            return Err("protocol.max_subset must lie in 1..=16".into());
        }
        Ok(())
    }
}
