//! Gateway status assessment and the b-metric used to admit relocated stations.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::MacAddr;
use crate::mac::{saturation_throughput, CycleStats, MacError, MacParams, SaturationResult};
use crate::monitor::{Node, NodeProfile, ProfileMap, TrafficClass};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssessmentError {
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error(transparent)]
    Mac(#[from] MacError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Light threshold on `B/S`.
    pub t_l: f64,
    /// Heavy threshold on `B/S`.
    pub t_r: f64,
    /// Admission threshold on `b/S` for single-station relocation.
    pub t_a: f64,
    /// A gateway with this many stations or more is never Light.
    pub n_l: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { t_l: 0.5, t_r: 0.05, t_a: 0.2, n_l: 10 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), AssessmentError> {
        let bad = |m: String| Err(AssessmentError::InvalidThresholds(m));
        if !(0.0 <= self.t_r && self.t_r < self.t_l && self.t_l <= 1.0) {
            return bad(format!("need 0 <= T_R < T_L <= 1, got T_R={} T_L={}", self.t_r, self.t_l));
        }
        if !(0.0..=1.0).contains(&self.t_a) {
            return bad(format!("T_A must lie in [0, 1], got {}", self.t_a));
        }
        if self.n_l < 1 {
            return bad("N_L must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Light,
    Heavy,
    Regular,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Light => "light",
            Status::Heavy => "heavy",
            Status::Regular => "regular",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub status: Status,
    /// Bandwidth still available to inelastic traffic, `B(j)`.
    pub available: f64,
    /// Saturation throughput `S(j)`.
    pub saturation: f64,
    pub n_stations: u32,
}

impl StatusReport {
    /// `B/S`, taken as 1 for an idle BSS.
    pub fn ratio(&self) -> f64 {
        if self.saturation > 0.0 {
            self.available / self.saturation
        } else {
            1.0
        }
    }
}

fn node_rate(p: &NodeProfile, bss_rate: f64) -> f64 {
    if p.rate > 0.0 {
        p.rate
    } else {
        bss_rate
    }
}

/// `B(j)` over the profiles of the active node set.
pub fn available_bandwidth(stats: &CycleStats, profiles: &ProfileMap, sat: &SaturationResult) -> f64 {
    let s_n = sat.per_node;
    let mut b = sat.aggregate;
    for p in profiles.values() {
        b -= (p.inelastic + p.elastic).min(s_n);
        b -= ((p.inelastic - s_n) * stats.avg_rate / node_rate(p, stats.avg_rate)).max(0.0);
    }
    b
}

/// Classifies the gateway from `B/S`. `profiles` must hold exactly the
/// nodes active in the cycle; `sat` is `None` when no node was active.
pub fn assess_status(
    stats: &CycleStats,
    profiles: &ProfileMap,
    sat: Option<&SaturationResult>,
    th: &Thresholds,
) -> StatusReport {
    let n_stations = stats.n_active.saturating_sub(1);
    let sat = match sat {
        Some(s) if stats.n_active > 0 => s,
        _ => {
            return StatusReport { status: Status::Light, available: 0.0, saturation: 0.0, n_stations: 0 };
        }
    };
    let available = available_bandwidth(stats, profiles, sat);
    let ratio = available / sat.aggregate;
    let status = if ratio > th.t_l && n_stations < th.n_l {
        Status::Light
    } else if ratio < th.t_r {
        Status::Heavy
    } else {
        Status::Regular
    };
    StatusReport { status, available, saturation: sat.aggregate, n_stations }
}

/// Result of the b-metric evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BMetric {
    pub b: f64,
    /// Residual bandwidth after the per-node fair shares.
    pub beta_initial: f64,
    /// Sum of the inelastic grants made to overflow nodes.
    pub inelastic_granted: f64,
    /// Number of grant/removal steps taken.
    pub steps: u64,
}

/// Order in which overflow nodes seize the residual bandwidth: slowest first.
pub fn overflow_order(stats: &CycleStats, profiles: &ProfileMap, s_n: f64) -> Vec<Node> {
    let mut over: Vec<(f64, Node)> = profiles
        .iter()
        .filter(|(_, p)| p.inelastic + p.elastic > s_n)
        .map(|(n, p)| (node_rate(p, stats.avg_rate), *n))
        .collect();
    over.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    over.into_iter().map(|(_, n)| n).collect()
}

/// Packet-granular allocation of the residual bandwidth to overflow nodes,
/// inelastic traffic first. `profiles` must already include any candidate.
pub fn b_metric(stats: &CycleStats, profiles: &ProfileMap, sat: &SaturationResult) -> BMetric {
    let s = sat.aggregate;
    let s_n = sat.per_node;
    let mut beta = s;
    let mut nu_hat = Vec::with_capacity(profiles.len());
    let mut eta_hat = Vec::with_capacity(profiles.len());
    for p in profiles.values() {
        beta -= (p.inelastic + p.elastic).min(s_n);
        let nu = p.inelastic.min(s_n);
        nu_hat.push(nu);
        eta_hat.push(p.elastic.min(s_n - nu));
    }
    let index: Vec<Node> = profiles.keys().copied().collect();
    let order = overflow_order(stats, profiles, s_n);
    let mut overflow: Vec<(usize, bool)> =
        order.iter().map(|n| (index.binary_search(n).expect("node present"), true)).collect();

    let beta_initial = beta;
    let mut b = beta;
    let mut granted = 0.0;
    let mut steps = 0u64;
    let quantum = |p: &NodeProfile, class: TrafficClass| {
        let payload = match p.payload(class) {
            x if x > 0.0 => x,
            _ => stats.avg_payload,
        };
        payload * stats.avg_rate / (stats.cycle_duration * node_rate(p, stats.avg_rate))
    };

    while beta > 0.0 && overflow.iter().any(|&(_, live)| live) {
        for entry in overflow.iter_mut() {
            if !(beta > 0.0) {
                break;
            }
            if !entry.1 {
                continue;
            }
            let k = entry.0;
            let p = &profiles[&index[k]];
            steps += 1;
            if nu_hat[k] < p.inelastic {
                let q = quantum(p, TrafficClass::Inelastic);
                if !(q > 0.0) {
                    entry.1 = false;
                    continue;
                }
                let delta = q.min(beta);
                nu_hat[k] += delta;
                beta -= delta;
                b -= delta;
                granted += delta;
            } else if eta_hat[k] < p.elastic {
                let q = quantum(p, TrafficClass::Elastic);
                if !(q > 0.0) {
                    entry.1 = false;
                    continue;
                }
                let delta = q.min(beta);
                eta_hat[k] += delta;
                beta -= delta;
            } else {
                entry.1 = false;
            }
        }
    }
    BMetric { b, beta_initial, inelastic_granted: granted, steps }
}

/// Context in which a relocation is being admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdmissionMode {
    FreshJoin,
    LightCombo,
    HeavySingle,
}

pub fn admission_decision(b: f64, s: f64, mode: AdmissionMode, th: &Thresholds) -> bool {
    match mode {
        AdmissionMode::FreshJoin => true,
        AdmissionMode::LightCombo => b > 0.0,
        AdmissionMode::HeavySingle => s > 0.0 && b / s > th.t_a,
    }
}

/// Demand pair in bit/s.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    pub inelastic: f64,
    pub elastic: f64,
}

/// A station another gateway proposes to relocate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStation {
    pub mac: MacAddr,
    /// Measured uplink demand; `None` when unknown.
    pub uplink: Option<Demand>,
    /// Downlink the station wants to receive; `None` when unknown.
    pub downlink: Option<Demand>,
    pub inelastic_payload: f64,
    pub elastic_payload: f64,
    /// Rate the evaluating gateway could use towards the station.
    pub rate: f64,
}

/// A BSS as it would look after admitting some candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedBss {
    pub stats: CycleStats,
    pub profiles: ProfileMap,
    pub sat: SaturationResult,
}

fn frame_rate(p: &NodeProfile, fallback_payload: f64) -> f64 {
    let pay = |x: f64| if x > 0.0 { x } else { fallback_payload };
    if !(fallback_payload > 0.0) && p.inelastic_payload <= 0.0 && p.elastic_payload <= 0.0 {
        return 0.0;
    }
    p.inelastic / pay(p.inelastic_payload) + p.elastic / pay(p.elastic_payload)
}

/// Folds the candidates into the BSS averages `P` and `R`, weighting every
/// node by its frame rate. Candidates of unknown demand weigh as an average node.
fn blend_averages(st: &mut CycleStats, profiles: &ProfileMap, candidates: &[CandidateStation]) {
    let known = st.n_active > 0 && st.avg_payload > 0.0 && st.avg_rate > 0.0;
    let w0 = if known { profiles.values().map(|p| frame_rate(p, st.avg_payload)).sum::<f64>() } else { 0.0 };
    let avg_w = if profiles.is_empty() || !(w0 > 0.0) { 1.0 } else { w0 / profiles.len() as f64 };
    let (mut w, mut pw, mut rw) =
        if known && w0 > 0.0 { (w0, w0 * st.avg_payload, w0 * st.avg_rate) } else { (0.0, 0.0, 0.0) };
    for c in candidates {
        let payload = c.inelastic_payload.max(c.elastic_payload);
        let demand = |d: Option<Demand>| d.map(|d| d.inelastic + d.elastic);
        let wc = match (demand(c.uplink), demand(c.downlink), payload > 0.0) {
            (Some(u), Some(d), true) => (u + d) / payload,
            _ => avg_w,
        };
        w += wc;
        pw += wc * payload;
        rw += wc * c.rate;
    }
    if w > 0.0 && pw > 0.0 && rw > 0.0 {
        st.avg_payload = pw / w;
        st.avg_rate = rw / w;
    } else if !known && !candidates.is_empty() {
        let n = candidates.len() as f64;
        st.avg_payload = candidates.iter().map(|c| c.inelastic_payload.max(c.elastic_payload)).sum::<f64>() / n;
        st.avg_rate = candidates.iter().map(|c| c.rate).sum::<f64>() / n;
    }
    st.max_payload = st.max_payload.max(st.avg_payload);
}

/// Adds `candidates` to the active node set and recomputes the saturation
/// throughput for the enlarged BSS with `P` and `R` re-averaged over the
/// new node set. Unknown demands become one node share.
pub fn merge_candidates(
    stats: &CycleStats,
    profiles: &ProfileMap,
    candidates: &[CandidateStation],
    mac: &MacParams,
) -> Result<MergedBss, AssessmentError> {
    let mut merged = profiles.clone();
    let mut st = stats.clone();
    blend_averages(&mut st, profiles, candidates);
    let new_macs: BTreeSet<MacAddr> =
        candidates.iter().map(|c| c.mac).filter(|m| !merged.contains_key(&Node::Station(*m))).collect();
    let gateway_added = !merged.contains_key(&Node::Gateway)
        && candidates.iter().any(|c| c.downlink.is_none_or(|d| d.inelastic + d.elastic > 0.0));
    st.n_active += new_macs.len() as u32 + u32::from(gateway_added);
    for c in candidates {
        st.max_payload = st.max_payload.max(c.inelastic_payload).max(c.elastic_payload);
    }
    let sat = saturation_throughput(&st, mac)?;
    let share = sat.per_node;

    for c in candidates {
        let up = c.uplink.unwrap_or(Demand { inelastic: share, elastic: 0.0 });
        let entry = merged.entry(Node::Station(c.mac)).or_default();
        entry.inelastic += up.inelastic;
        entry.elastic += up.elastic;
        if c.inelastic_payload > 0.0 {
            entry.inelastic_payload = c.inelastic_payload;
        }
        if c.elastic_payload > 0.0 {
            entry.elastic_payload = c.elastic_payload;
        }
        entry.rate = c.rate;
        let down = c.downlink.unwrap_or(Demand { inelastic: share, elastic: 0.0 });
        if down.inelastic + down.elastic > 0.0 {
            let gw = merged.entry(Node::Gateway).or_default();
            gw.inelastic += down.inelastic;
            gw.elastic += down.elastic;
            if gw.rate <= 0.0 {
                gw.rate = c.rate;
            }
            if gw.inelastic_payload <= 0.0 {
                gw.inelastic_payload = c.inelastic_payload;
            }
            if gw.elastic_payload <= 0.0 {
                gw.elastic_payload = c.elastic_payload;
            }
        }
    }
    Ok(MergedBss { stats: st, profiles: merged, sat })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(n: u32) -> CycleStats {
        CycleStats {
            n_active: n,
            cycle_duration: 0.1,
            avg_payload: 12_000.0,
            max_payload: 12_000.0,
            avg_rate: 54e6,
            filtered_per: 0.0,
        }
    }

    fn prof(nu: f64, eta: f64, rate: f64) -> NodeProfile {
        NodeProfile { elastic: eta, inelastic: nu, elastic_payload: 12_000.0, inelastic_payload: 12_000.0, rate }
    }

    fn sta(i: u32) -> Node {
        Node::Station(MacAddr::local(0, i))
    }

    fn sat(s: f64, n: u32) -> SaturationResult {
        SaturationResult { tau: 0.1, p_cond: 0.1, expected_event_time: 1e-4, aggregate: s, per_node: s / f64::from(n) }
    }

    #[test]
    fn idle_bss_is_light() {
        let r = assess_status(&stats(0), &ProfileMap::new(), None, &Thresholds::default());
        assert_eq!(r.status, Status::Light);
        assert_eq!(r.ratio(), 1.0);
    }

    #[test]
    fn single_overflow_node_by_hand() {
        let s = sat(30e6, 1);
        let delta = 2e6;
        let mut p = ProfileMap::new();
        p.insert(sta(1), prof(s.per_node + delta, 0.0, 54e6));
        let b = available_bandwidth(&stats(1), &p, &s);
        assert!((b - (s.aggregate - s.per_node - delta)).abs() < 1e-6);
    }

    #[test]
    fn status_thresholds() {
        let th = Thresholds::default();
        let s = sat(30e6, 4);
        let mut p = ProfileMap::new();
        for i in 0..4 {
            p.insert(sta(i), prof(1e6, 0.0, 54e6));
        }
        assert_eq!(assess_status(&stats(4), &p, Some(&s), &th).status, Status::Light);
        for i in 0..4 {
            p.insert(sta(i), prof(5e6, 0.0, 54e6));
        }
        assert_eq!(assess_status(&stats(4), &p, Some(&s), &th).status, Status::Regular);
        for i in 0..4 {
            p.insert(sta(i), prof(8e6, 0.0, 54e6));
        }
        assert_eq!(assess_status(&stats(4), &p, Some(&s), &th).status, Status::Heavy);
    }

    #[test]
    fn many_stations_block_light() {
        let th = Thresholds::default();
        let s = sat(30e6, 11);
        let mut p = ProfileMap::new();
        for i in 0..11 {
            p.insert(sta(i), prof(0.1e6, 0.0, 54e6));
        }
        assert_eq!(assess_status(&stats(11), &p, Some(&s), &th).status, Status::Regular);
    }

    #[test]
    fn no_overflow_means_b_is_beta() {
        let s = sat(30e6, 3);
        let mut p = ProfileMap::new();
        for i in 0..3 {
            p.insert(sta(i), prof(2e6, 1e6, 54e6));
        }
        let m = b_metric(&stats(3), &p, &s);
        assert_eq!(m.b, 30e6 - 9e6);
        assert_eq!(m.steps, 0);
    }

    #[test]
    fn single_overflow_inelastic_excess_is_granted() {
        let s = sat(30e6, 2);
        let excess = 3e6;
        let mut p = ProfileMap::new();
        p.insert(sta(1), prof(s.per_node + excess, 0.0, 54e6));
        p.insert(sta(2), prof(1e6, 0.0, 54e6));
        let m = b_metric(&stats(2), &p, &s);
        let beta = 30e6 - s.per_node - 1e6;
        let quantum = 12_000.0 / 0.1;
        assert!((m.b - (beta - excess)).abs() <= quantum);
        assert!((m.b + m.inelastic_granted - m.beta_initial).abs() < 1e-6);
    }

    #[test]
    fn admission_modes() {
        let th = Thresholds::default();
        assert!(admission_decision(0.0, 10.0, AdmissionMode::FreshJoin, &th));
        assert!(admission_decision(1.0, 10.0, AdmissionMode::LightCombo, &th));
        assert!(!admission_decision(0.0, 10.0, AdmissionMode::LightCombo, &th));
        assert!(!admission_decision(1.0, 10.0, AdmissionMode::HeavySingle, &th));
        assert!(admission_decision(3.0, 10.0, AdmissionMode::HeavySingle, &th));
    }

    #[test]
    fn threshold_ordering_is_checked() {
        let th = Thresholds { t_r: 0.6, ..Thresholds::default() };
        assert!(th.validate().is_err());
    }

    #[test]
    fn merging_a_candidate_grows_the_node_set() {
        let mut p = ProfileMap::new();
        p.insert(sta(1), prof(1e6, 0.0, 54e6));
        let cand = CandidateStation {
            mac: MacAddr::local(0, 9),
            uplink: Some(Demand { inelastic: 1e6, elastic: 0.0 }),
            downlink: Some(Demand::default()),
            inelastic_payload: 12_000.0,
            elastic_payload: 0.0,
            rate: 24e6,
        };
        let m = merge_candidates(&stats(1), &p, &[cand], &MacParams::default()).unwrap();
        assert_eq!(m.stats.n_active, 2);
        assert_eq!(m.profiles.len(), 2);
        assert!(!m.profiles.contains_key(&Node::Gateway));
        // equal frame rates: the BSS rate becomes the plain mean
        assert!((m.stats.avg_rate - 39e6).abs() < 1e-6);
    }

    #[test]
    fn unknown_demand_is_one_share() {
        let cand = CandidateStation {
            mac: MacAddr::local(0, 9),
            uplink: None,
            downlink: None,
            inelastic_payload: 12_000.0,
            elastic_payload: 0.0,
            rate: 54e6,
        };
        let m = merge_candidates(&stats(0), &ProfileMap::new(), &[cand], &MacParams::default()).unwrap();
        assert_eq!(m.stats.n_active, 2);
        let share = m.sat.per_node;
        assert_eq!(m.profiles[&Node::Gateway].inelastic, share);
        assert_eq!(m.profiles[&Node::Station(MacAddr::local(0, 9))].inelastic, share);
    }
}
