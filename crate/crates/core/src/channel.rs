//! Indoor propagation, bit-error to packet-error mapping and AARF rate control.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("unsupported PHY rate {0} Mbit/s")]
    UnsupportedRate(f64),
    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),
}

/// 802.11b/g PHY rates, ordered by bit rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum PhyRate {
    Dsss1,
    Dsss2,
    Cck5_5,
    Ofdm6,
    Ofdm9,
    Cck11,
    Ofdm12,
    Ofdm18,
    Ofdm24,
    Ofdm36,
    Ofdm48,
    Ofdm54,
}

/// Modulation and coding scheme behind a PHY rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modulation {
    Dbpsk,
    Dqpsk,
    Cck,
    Bpsk,
    Qpsk,
    /// Square M-QAM with `M = 2^k`; holds `k`.
    Qam(u32),
}

impl PhyRate {
    pub const ALL: [PhyRate; 12] = [
        PhyRate::Dsss1,
        PhyRate::Dsss2,
        PhyRate::Cck5_5,
        PhyRate::Ofdm6,
        PhyRate::Ofdm9,
        PhyRate::Cck11,
        PhyRate::Ofdm12,
        PhyRate::Ofdm18,
        PhyRate::Ofdm24,
        PhyRate::Ofdm36,
        PhyRate::Ofdm48,
        PhyRate::Ofdm54,
    ];

    pub fn bps(self) -> f64 {
        self.mbps() * 1e6
    }

    pub fn mbps(self) -> f64 {
        match self {
            PhyRate::Dsss1 => 1.0,
            PhyRate::Dsss2 => 2.0,
            PhyRate::Cck5_5 => 5.5,
            PhyRate::Ofdm6 => 6.0,
            PhyRate::Ofdm9 => 9.0,
            PhyRate::Cck11 => 11.0,
            PhyRate::Ofdm12 => 12.0,
            PhyRate::Ofdm18 => 18.0,
            PhyRate::Ofdm24 => 24.0,
            PhyRate::Ofdm36 => 36.0,
            PhyRate::Ofdm48 => 48.0,
            PhyRate::Ofdm54 => 54.0,
        }
    }

    pub fn from_mbps(mbps: f64) -> Result<Self, ChannelError> {
        PhyRate::ALL.into_iter().find(|r| (r.mbps() - mbps).abs() < 1e-9).ok_or(ChannelError::UnsupportedRate(mbps))
    }

    pub fn from_bps(bps: f64) -> Result<Self, ChannelError> {
        Self::from_mbps(bps / 1e6)
    }

    pub fn modulation(self) -> Modulation {
        match self {
            PhyRate::Dsss1 => Modulation::Dbpsk,
            PhyRate::Dsss2 => Modulation::Dqpsk,
            PhyRate::Cck5_5 | PhyRate::Cck11 => Modulation::Cck,
            PhyRate::Ofdm6 | PhyRate::Ofdm9 => Modulation::Bpsk,
            PhyRate::Ofdm12 | PhyRate::Ofdm18 => Modulation::Qpsk,
            PhyRate::Ofdm24 | PhyRate::Ofdm36 => Modulation::Qam(4),
            PhyRate::Ofdm48 | PhyRate::Ofdm54 => Modulation::Qam(6),
        }
    }

    /// Occupied bandwidth in Hz: 22 MHz for DSSS/CCK, 20 MHz for OFDM.
    pub fn bandwidth(self) -> f64 {
        match self.modulation() {
            Modulation::Dbpsk | Modulation::Dqpsk | Modulation::Cck => 22e6,
            _ => 20e6,
        }
    }
}

impl TryFrom<f64> for PhyRate {
    type Error = ChannelError;
    fn try_from(mbps: f64) -> Result<Self, Self::Error> {
        PhyRate::from_mbps(mbps)
    }
}

impl From<PhyRate> for f64 {
    fn from(r: PhyRate) -> f64 {
        r.mbps()
    }
}

impl fmt::Display for PhyRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} Mbit/s", self.mbps())
    }
}

/// Propagation and radio parameters shared by every link of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub carrier_freq_mhz: f64,
    /// Distance power-loss coefficient `N` of the log-distance term.
    pub distance_coef: f64,
    pub wall_loss_db: f64,
    pub tx_power_dbm: f64,
    pub noise_floor_dbm: f64,
    /// Standard deviation of the frozen per-link log-normal shadowing; 0 disables it.
    pub shadowing_std_db: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            carrier_freq_mhz: 2400.0,
            distance_coef: 30.0,
            wall_loss_db: 10.0,
            tx_power_dbm: 20.0,
            noise_floor_dbm: -95.0,
            shadowing_std_db: 0.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: String| Err(ChannelError::InvalidParams(m));
        if !(self.carrier_freq_mhz > 0.0) {
            return bad(format!("carrier frequency must be > 0, got {}", self.carrier_freq_mhz));
        }
        if !(self.distance_coef >= 0.0 && self.wall_loss_db >= 0.0 && self.shadowing_std_db >= 0.0) {
            return bad("attenuation coefficients must be >= 0".into());
        }
        if !(self.noise_floor_dbm < self.tx_power_dbm) {
            return bad("noise floor must lie below the transmit power".into());
        }
        Ok(())
    }
}

/// Site-general indoor path loss in dB. Distances below 1 m are clamped to 1 m.
pub fn path_loss(distance: f64, walls: u32, params: &ChannelParams) -> f64 {
    20.0 * params.carrier_freq_mhz.log10()
        + params.distance_coef * distance.max(1.0).log10()
        + f64::from(walls) * params.wall_loss_db
        - 28.0
}

/// SNR at the receiver for a given path loss and frozen shadowing term.
pub fn snr_db(loss_db: f64, shadowing_db: f64, params: &ChannelParams) -> f64 {
    params.tx_power_dbm - loss_db - shadowing_db - params.noise_floor_dbm
}

/// Gaussian tail function.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Uncoded AWGN bit error rate, with `Eb/N0 = SNR * B / R`.
pub fn bit_error_rate(snr_db: f64, rate: PhyRate) -> f64 {
    let snr = 10f64.powf(snr_db / 10.0);
    let ebn0 = snr * rate.bandwidth() / rate.bps();
    let ber = match rate.modulation() {
        Modulation::Dbpsk => 0.5 * (-ebn0).exp(),
        Modulation::Dqpsk => q_function(ebn0.sqrt()),
        Modulation::Cck | Modulation::Bpsk | Modulation::Qpsk => q_function((2.0 * ebn0).sqrt()),
        Modulation::Qam(k) => {
            let kf = f64::from(k);
            let m = 2f64.powi(k as i32);
            (4.0 / kf) * (1.0 - 1.0 / m.sqrt()) * q_function((3.0 * kf / (m - 1.0) * ebn0).sqrt())
        }
    };
    ber.clamp(0.0, 0.5)
}

/// Probability that a frame of `length_bits` has at least one bit error.
pub fn packet_error_rate(snr_db: f64, rate: PhyRate, length_bits: f64) -> f64 {
    per_from_ber(bit_error_rate(snr_db, rate), length_bits)
}

pub fn per_from_ber(ber: f64, length_bits: f64) -> f64 {
    (-(length_bits * (-ber).ln_1p()).exp_m1()).clamp(0.0, 1.0)
}

/// Highest rate of `rates` whose PER for `length_bits` is at most `max_per`.
pub fn best_rate(snr_db: f64, rates: &[PhyRate], length_bits: f64, max_per: f64) -> Option<PhyRate> {
    rates.iter().copied().filter(|&r| packet_error_rate(snr_db, r, length_bits) <= max_per).max()
}

pub const AARF_BASE_THRESHOLD: u32 = 10;
pub const AARF_MAX_THRESHOLD: u32 = 50;
pub const AARF_FAILURE_LIMIT: u32 = 2;

/// AARF bookkeeping for one link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AarfState {
    pub success_count: u32,
    pub failure_count: u32,
    pub success_threshold: u32,
    pub probe_pending: bool,
}

impl Default for AarfState {
    fn default() -> Self {
        Self { success_count: 0, failure_count: 0, success_threshold: AARF_BASE_THRESHOLD, probe_pending: false }
    }
}

/// Radio link between a station and a gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub distance: f64,
    pub wall_count: u32,
    pub snr: f64,
    pub current_rate: PhyRate,
    pub aarf: AarfState,
}

impl LinkState {
    pub fn new(distance: f64, wall_count: u32, snr: f64, rate: PhyRate) -> Self {
        Self { distance, wall_count, snr, current_rate: rate, aarf: AarfState::default() }
    }
}

/// Advances the AARF state machine of `link` by one transmission outcome.
/// `rates` must be sorted ascending and contain the current rate.
pub fn aarf_on_tx_result(link: &mut LinkState, success: bool, rates: &[PhyRate]) {
    let idx = rates.iter().position(|&r| r == link.current_rate).unwrap_or(0);
    let a = &mut link.aarf;
    if success {
        a.failure_count = 0;
        if a.probe_pending {
            a.probe_pending = false;
            a.success_count = 0;
            a.success_threshold = AARF_BASE_THRESHOLD;
            return;
        }
        a.success_count += 1;
        if a.success_count >= a.success_threshold && idx + 1 < rates.len() {
            link.current_rate = rates[idx + 1];
            a.success_count = 0;
            a.probe_pending = true;
        }
    } else if a.probe_pending {
        a.probe_pending = false;
        a.success_count = 0;
        a.failure_count = 0;
        a.success_threshold = (a.success_threshold * 2).min(AARF_MAX_THRESHOLD);
        link.current_rate = rates[idx.saturating_sub(1)];
    } else {
        a.success_count = 0;
        a.failure_count += 1;
        if a.failure_count >= AARF_FAILURE_LIMIT {
            a.failure_count = 0;
            a.success_threshold = AARF_BASE_THRESHOLD;
            link.current_rate = rates[idx.saturating_sub(1)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link_at(rate: PhyRate) -> LinkState {
        LinkState::new(10.0, 1, 30.0, rate)
    }

    #[test]
    fn unit_distance_loss_is_the_frequency_term() {
        let p = ChannelParams::default();
        assert!((path_loss(1.0, 0, &p) - 39.604_224_834_232).abs() < 1e-9);
    }

    #[test]
    fn doubling_distance_adds_nine_db() {
        let p = ChannelParams::default();
        let delta = path_loss(20.0, 1, &p) - path_loss(10.0, 1, &p);
        assert!((delta - 30.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn two_walls_add_twenty_db() {
        let p = ChannelParams::default();
        assert!((path_loss(7.0, 2, &p) - path_loss(7.0, 0, &p) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn rates_round_trip_through_mbps() {
        for r in PhyRate::ALL {
            assert_eq!(PhyRate::from_mbps(r.mbps()).unwrap(), r);
        }
        assert!(PhyRate::from_mbps(7.0).is_err());
    }

    #[test]
    fn per_vanishes_at_high_snr() {
        for r in PhyRate::ALL {
            assert_eq!(packet_error_rate(200.0, r, 12_000.0), 0.0);
        }
    }

    #[test]
    fn per_composes_over_length() {
        let one = packet_error_rate(8.0, PhyRate::Ofdm12, 4000.0);
        let two = packet_error_rate(8.0, PhyRate::Ofdm12, 8000.0);
        assert!((two - (1.0 - (1.0 - one).powi(2))).abs() < 1e-12);
    }

    #[test]
    fn per_at_ten_db_six_mbps() {
        // Q(sqrt(2 * 10 * 20/6)) evaluated in extended precision, then 1-(1-b)^12000
        let per = packet_error_rate(10.0, PhyRate::Ofdm6, 12_000.0);
        assert!((per / 1.929_157_636_430_418e-12 - 1.0).abs() < 1e-9, "{per:e}");
    }

    #[test]
    fn aarf_probes_after_threshold_successes() {
        let rates = PhyRate::ALL;
        let mut l = link_at(PhyRate::Ofdm24);
        for _ in 0..10 {
            aarf_on_tx_result(&mut l, true, &rates);
        }
        assert_eq!(l.current_rate, PhyRate::Ofdm36);
        assert!(l.aarf.probe_pending);
    }

    #[test]
    fn failed_probe_reverts_and_doubles() {
        let rates = PhyRate::ALL;
        let mut l = link_at(PhyRate::Ofdm24);
        for _ in 0..10 {
            aarf_on_tx_result(&mut l, true, &rates);
        }
        aarf_on_tx_result(&mut l, false, &rates);
        assert_eq!(l.current_rate, PhyRate::Ofdm24);
        assert_eq!(l.aarf.success_threshold, 20);
        for _ in 0..10 {
            aarf_on_tx_result(&mut l, true, &rates);
        }
        assert_eq!(l.current_rate, PhyRate::Ofdm24);
        assert!(!l.aarf.probe_pending);
    }

    #[test]
    fn two_failures_step_down() {
        let rates = PhyRate::ALL;
        let mut l = link_at(PhyRate::Ofdm24);
        aarf_on_tx_result(&mut l, false, &rates);
        assert_eq!(l.current_rate, PhyRate::Ofdm24);
        aarf_on_tx_result(&mut l, false, &rates);
        assert_eq!(l.current_rate, PhyRate::Ofdm18);
    }

    #[test]
    fn threshold_is_capped() {
        let rates = PhyRate::ALL;
        let mut l = link_at(PhyRate::Ofdm24);
        for _ in 0..6 {
            for _ in 0..l.aarf.success_threshold {
                aarf_on_tx_result(&mut l, true, &rates);
            }
            aarf_on_tx_result(&mut l, false, &rates);
        }
        assert_eq!(l.aarf.success_threshold, AARF_MAX_THRESHOLD);
    }
}
