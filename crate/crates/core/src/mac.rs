//! Analytic 802.11 DCF saturation model.
//!
//! Extends the classic saturation analysis with a channel-error term: a
//! transmission fails either because it collides or because the frame is
//! corrupted with probability `p_e`. The access probability `tau` and the
//! conditional failure probability `p` are obtained jointly by bisection on
//! `p`, after which the expected duration of a generic slot and the
//! aggregate saturation throughput follow in closed form.
//!
//! Collisions are charged with the duration of a maximum-size frame, which
//! makes the resulting throughput a lower bound of the exact-collision model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound of the bracket excluded at the top of `[0, 1)`.
const P_EPSILON: f64 = 1e-12;
/// Iteration cap of the bisection.
const MAX_ITERATIONS: u32 = 200;
/// Largest accepted fixed-point residual.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MacError {
    #[error("invalid MAC parameters: {0}")]
    InvalidParams(String),
    #[error("invalid cycle statistics: {0}")]
    InvalidStats(String),
    #[error("fixed point did not converge for n_active={n_active}, p_e={p_e} (residual {residual:e})")]
    SolverFailure { n_active: u32, p_e: f64, residual: f64 },
}

/// DCF timing and framing parameters, in seconds and bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacParams {
    pub slot_time: f64,
    pub sifs: f64,
    pub difs: f64,
    /// PHY preamble and header, expressed in bits at the basic rate.
    pub phy_header_bits: f64,
    pub mac_header_bits: f64,
    pub ack_bits: f64,
    /// Rate at which PHY headers and ACKs are sent (bit/s).
    pub basic_rate: f64,
    /// Minimum contention window `W`, in slots.
    pub cw_min: u32,
    /// Number of backoff stages `m`.
    pub backoff_stages: u32,
}

impl Default for MacParams {
    /// 802.11g ERP-OFDM short-slot timing with a 20 us preamble.
    fn default() -> Self {
        Self {
            slot_time: 9e-6,
            sifs: 10e-6,
            difs: 28e-6,
            phy_header_bits: 120.0,
            mac_header_bits: 34.0 * 8.0,
            ack_bits: 14.0 * 8.0,
            basic_rate: 6e6,
            cw_min: 15,
            backoff_stages: 6,
        }
    }
}

impl MacParams {
    pub fn validate(&self) -> Result<(), MacError> {
        let positive = [
            ("slot_time", self.slot_time),
            ("sifs", self.sifs),
            ("difs", self.difs),
            ("phy_header_bits", self.phy_header_bits),
            ("mac_header_bits", self.mac_header_bits),
            ("ack_bits", self.ack_bits),
            ("basic_rate", self.basic_rate),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(MacError::InvalidParams(format!("{name} must be > 0, got {value}")));
            }
        }
        if self.cw_min < 1 {
            return Err(MacError::InvalidParams("cw_min must be >= 1".into()));
        }
        if self.backoff_stages > 16 {
            return Err(MacError::InvalidParams("backoff_stages must be <= 16".into()));
        }
        Ok(())
    }

    /// Duration of the PHY header at the basic rate.
    pub fn phy_header_time(&self) -> f64 {
        self.phy_header_bits / self.basic_rate
    }

    /// ACK frame duration (preamble plus ACK fields) at the basic rate.
    pub fn ack_time(&self) -> f64 {
        (self.phy_header_bits + self.ack_bits) / self.basic_rate
    }

    /// Retransmission timeout `T_o`: SIFS plus the ACK duration.
    pub fn ack_timeout(&self) -> f64 {
        self.sifs + self.ack_time()
    }
}

/// Aggregates observed over one monitoring cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    /// Active nodes, gateway included when it transmitted.
    pub n_active: u32,
    /// Cycle duration `C(j)` in seconds.
    pub cycle_duration: f64,
    /// Mean payload `P(j)` in bits.
    pub avg_payload: f64,
    /// Largest payload `P_max(j)` in bits.
    pub max_payload: f64,
    /// Mean data rate `R(j)` in bit/s.
    pub avg_rate: f64,
    /// Filtered packet error rate `p_e(j)`.
    pub filtered_per: f64,
}

impl CycleStats {
    pub fn validate(&self) -> Result<(), MacError> {
        let bad = |msg: String| Err(MacError::InvalidStats(msg));
        if !(self.cycle_duration.is_finite() && self.cycle_duration > 0.0) {
            return bad(format!("cycle duration must be > 0, got {}", self.cycle_duration));
        }
        if !(self.avg_payload > 0.0 && self.avg_payload <= self.max_payload) {
            return bad(format!(
                "payloads must satisfy 0 < P <= P_max, got P={} P_max={}",
                self.avg_payload, self.max_payload
            ));
        }
        if !(self.avg_rate.is_finite() && self.avg_rate > 0.0) {
            return bad(format!("average rate must be > 0, got {}", self.avg_rate));
        }
        check_per(self.filtered_per)
    }
}

fn check_per(p_e: f64) -> Result<(), MacError> {
    if (0.0..1.0).contains(&p_e) {
        Ok(())
    } else {
        Err(MacError::InvalidStats(format!("p_e must lie in [0, 1), got {p_e}")))
    }
}

/// Joint solution of the access and failure probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub tau: f64,
    pub p_cond: f64,
    pub residual: f64,
    pub iterations: u32,
}

/// Per-node access probability as a function of the conditional failure
/// probability `p`, for binary exponential backoff with `m` stages.
///
/// Uses `(1 - (2p)^m) / (1 - 2p) = sum_{i<m} (2p)^i`, which stays finite at
/// `p = 1/2`.
pub fn backoff_tau(p: f64, mac: &MacParams) -> f64 {
    let w = f64::from(mac.cw_min);
    let two_p = 2.0 * p;
    let mut series = 0.0;
    let mut term = 1.0;
    for _ in 0..mac.backoff_stages {
        series += term;
        term *= two_p;
    }
    2.0 / (1.0 + w + p * w * series)
}

/// Failure probability seen by a tagged node when each of the other
/// `n_active - 1` nodes transmits with probability `tau`.
pub fn failure_probability(tau: f64, n_active: u32, p_e: f64) -> f64 {
    1.0 - (1.0 - tau).powi(n_active as i32 - 1) * (1.0 - p_e)
}

/// Solves for `(tau, p)` by bisection on `p` over `[0, 1 - 1e-12]`.
pub fn solve_fixed_point(n_active: u32, p_e: f64, mac: &MacParams) -> Result<FixedPoint, MacError> {
    solve_with_cap(n_active, p_e, mac, MAX_ITERATIONS)
}

pub(crate) fn solve_with_cap(
    n_active: u32,
    p_e: f64,
    mac: &MacParams,
    max_iterations: u32,
) -> Result<FixedPoint, MacError> {
    if n_active == 0 {
        return Err(MacError::InvalidStats("fixed point needs at least one active node".into()));
    }
    check_per(p_e)?;
    let gap = |p: f64| p - failure_probability(backoff_tau(p, mac), n_active, p_e);

    let (mut lo, mut hi) = (0.0_f64, 1.0 - P_EPSILON);
    let mut p = lo;
    let mut iterations = 0;
    if gap(lo) < 0.0 {
        while iterations < max_iterations {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            let g = gap(mid);
            p = mid;
            if g == 0.0 || mid <= lo || mid >= hi {
                break;
            }
            if g > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let tau = backoff_tau(p, mac);
    let residual = (p - failure_probability(tau, n_active, p_e)).abs();
    if !(residual < RESIDUAL_TOLERANCE) {
        return Err(MacError::SolverFailure { n_active, p_e, residual });
    }
    Ok(FixedPoint { tau, p_cond: p, residual, iterations })
}

/// How long a collision is assumed to occupy the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollisionModel {
    /// Every collision involves a frame of size `P_max`.
    #[default]
    WorstCase,
    /// Collisions last as long as an average-size erroneous frame.
    Exact,
}

/// Durations of a success, an erroneous transmission and a collision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDurations {
    pub success: f64,
    pub error: f64,
    pub collision: f64,
}

pub fn frame_durations(stats: &CycleStats, mac: &MacParams) -> FrameDurations {
    frame_durations_with(stats, mac, CollisionModel::WorstCase)
}

pub fn frame_durations_with(stats: &CycleStats, mac: &MacParams, model: CollisionModel) -> FrameDurations {
    let header = mac.phy_header_time();
    let rate = stats.avg_rate;
    let success = 2.0 * header + (mac.mac_header_bits + stats.avg_payload + mac.ack_bits) / rate + mac.sifs + mac.difs;
    let failed = |payload: f64| header + (mac.mac_header_bits + payload) / rate + mac.ack_timeout() + mac.difs;
    let collided = match model {
        CollisionModel::WorstCase => stats.max_payload,
        CollisionModel::Exact => stats.avg_payload,
    };
    FrameDurations { success, error: failed(stats.avg_payload), collision: failed(collided) }
}

/// Probabilities that a generic slot is idle, a success, a collision or a
/// transmission lost to channel errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventWeights {
    pub idle: f64,
    pub success: f64,
    pub collision: f64,
    pub error: f64,
}

impl EventWeights {
    pub fn total(&self) -> f64 {
        self.idle + self.success + self.collision + self.error
    }
}

pub fn event_weights(tau: f64, p_e: f64, n_active: u32) -> EventWeights {
    let n = n_active as i32;
    let idle = (1.0 - tau).powi(n);
    let single = f64::from(n_active) * tau * (1.0 - tau).powi(n - 1);
    EventWeights { idle, success: single * (1.0 - p_e), collision: 1.0 - idle - single, error: single * p_e }
}

/// Mean duration of a generic slot `E[T]`.
pub fn expected_event_time(tau: f64, p_e: f64, n_active: u32, durations: &FrameDurations, mac: &MacParams) -> f64 {
    let w = event_weights(tau, p_e, n_active);
    w.idle * mac.slot_time
        + w.success * durations.success
        + w.collision * durations.collision
        + w.error * durations.error
}

/// Output of the saturation model for one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationResult {
    pub tau: f64,
    pub p_cond: f64,
    pub expected_event_time: f64,
    /// Aggregate saturation throughput `S(j)` in bit/s.
    pub aggregate: f64,
    /// Per-node share `S_n(j) = S(j) / N(j)`.
    pub per_node: f64,
}

pub fn saturation_throughput(stats: &CycleStats, mac: &MacParams) -> Result<SaturationResult, MacError> {
    saturation_throughput_with(stats, mac, CollisionModel::WorstCase)
}

pub fn saturation_throughput_with(
    stats: &CycleStats,
    mac: &MacParams,
    model: CollisionModel,
) -> Result<SaturationResult, MacError> {
    stats.validate()?;
    if stats.n_active == 0 {
        return Err(MacError::InvalidStats("saturation throughput is undefined without active nodes".into()));
    }
    let fp = solve_fixed_point(stats.n_active, stats.filtered_per, mac)?;
    let durations = frame_durations_with(stats, mac, model);
    let e_t = expected_event_time(fp.tau, stats.filtered_per, stats.n_active, &durations, mac);
    let n = f64::from(stats.n_active);
    let aggregate =
        n * fp.tau * (1.0 - fp.tau).powi(stats.n_active as i32 - 1) * stats.avg_payload * (1.0 - stats.filtered_per)
            / e_t;
    Ok(SaturationResult {
        tau: fp.tau,
        p_cond: fp.p_cond,
        expected_event_time: e_t,
        aggregate,
        per_node: aggregate / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g_stats(n: u32) -> CycleStats {
        CycleStats {
            n_active: n,
            cycle_duration: 0.1,
            avg_payload: 12_000.0,
            max_payload: 12_000.0,
            avg_rate: 54e6,
            filtered_per: 0.0,
        }
    }

    #[test]
    fn single_node_without_errors_never_fails() {
        let mac = MacParams::default();
        let fp = solve_fixed_point(1, 0.0, &mac).unwrap();
        assert_eq!(fp.p_cond, 0.0);
        assert!((fp.tau - 2.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn single_node_failure_probability_equals_channel_errors() {
        let fp = solve_fixed_point(1, 0.2, &MacParams::default()).unwrap();
        assert!((fp.p_cond - 0.2).abs() < 1e-10);
    }

    #[test]
    fn stable_tau_matches_textbook_form_away_from_one_half() {
        let mac = MacParams::default();
        let w = f64::from(mac.cw_min);
        let m = mac.backoff_stages as i32;
        for p in [0.0, 0.05, 0.2, 0.37, 0.49, 0.51, 0.8, 0.99] {
            let textbook = 2.0 * (1.0 - 2.0 * p) / ((1.0 - 2.0 * p) * (w + 1.0) + p * w * (1.0 - (2.0 * p).powi(m)));
            assert!((backoff_tau(p, &mac) - textbook).abs() < 1e-12, "p={p}");
        }
        // continuous through the removable singularity
        let near = backoff_tau(0.5 - 1e-9, &mac);
        assert!((backoff_tau(0.5, &mac) - near).abs() < 1e-8);
    }

    #[test]
    fn solver_reports_failure_when_iterations_run_out() {
        let err = solve_with_cap(10, 0.1, &MacParams::default(), 3).unwrap_err();
        assert!(matches!(err, MacError::SolverFailure { n_active: 10, .. }));
    }

    #[test]
    fn solver_rejects_out_of_range_inputs() {
        let mac = MacParams::default();
        assert!(solve_fixed_point(0, 0.0, &mac).is_err());
        assert!(solve_fixed_point(3, 1.0, &mac).is_err());
        assert!(solve_fixed_point(3, -0.1, &mac).is_err());
    }

    #[test]
    fn success_duration_by_hand() {
        // 2*20us + (272 + 12000 + 112) bits / 54 Mbit/s + 10us + 28us
        let d = frame_durations(&g_stats(5), &MacParams::default());
        let expected = 40e-6 + 12_384.0 / 54e6 + 38e-6;
        assert!((d.success - expected).abs() < 1e-9);
        assert_eq!(d.collision, d.error);
    }

    #[test]
    fn doubling_the_rate_shortens_a_success() {
        let mac = MacParams::default();
        let mut s = g_stats(3);
        s.avg_rate = 24e6;
        let slow = frame_durations(&s, &mac).success;
        s.avg_rate = 48e6;
        assert!(frame_durations(&s, &mac).success < slow);
    }

    #[test]
    fn event_time_limits() {
        let mac = MacParams::default();
        let d = frame_durations(&g_stats(4), &mac);
        assert_eq!(expected_event_time(0.0, 0.1, 4, &d, &mac), mac.slot_time);
        assert!((expected_event_time(1.0, 0.1, 4, &d, &mac) - d.collision).abs() < 1e-18);
    }

    #[test]
    fn per_node_share_times_n_is_the_aggregate() {
        let sat = saturation_throughput(&g_stats(7), &MacParams::default()).unwrap();
        assert_eq!(sat.per_node * 7.0, sat.aggregate);
    }

    #[test]
    fn zero_active_nodes_is_rejected() {
        assert!(saturation_throughput(&g_stats(0), &MacParams::default()).is_err());
    }

    #[test]
    fn invalid_stats_are_rejected() {
        let mac = MacParams::default();
        let mut s = g_stats(2);
        s.max_payload = 100.0;
        assert!(saturation_throughput(&s, &mac).is_err());
        let mut s = g_stats(2);
        s.cycle_duration = 0.0;
        assert!(saturation_throughput(&s, &mac).is_err());
    }
}
