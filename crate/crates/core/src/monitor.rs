//! Passive per-cycle traffic measurement at a gateway.
//!
//! A [`CycleAccumulator`] collects what the gateway sees on its channel
//! during one monitoring cycle; [`close_cycle`] turns it into the cycle
//! statistics fed to the saturation model and folds the per-node
//! instantaneous throughputs into running averages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::MacAddr;
use crate::mac::CycleStats;

pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficClass {
    Elastic,
    Inelastic,
}

/// Maps the IP protocol field to a traffic class. Only TCP is elastic.
pub fn classify_frame(ip_protocol: u8) -> TrafficClass {
    if ip_protocol == IPPROTO_TCP {
        TrafficClass::Elastic
    } else {
        TrafficClass::Inelastic
    }
}

/// A transmitter inside a BSS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Node {
    Gateway,
    Station(MacAddr),
}

/// Running averages describing one node's offered traffic. For the gateway
/// the throughputs are its downlink totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeProfile {
    /// Elastic throughput `eta` (bit/s).
    pub elastic: f64,
    /// Inelastic throughput `nu` (bit/s).
    pub inelastic: f64,
    /// Mean elastic payload (bits); 0 until a frame of that class is seen.
    pub elastic_payload: f64,
    /// Mean inelastic payload (bits); 0 until a frame of that class is seen.
    pub inelastic_payload: f64,
    /// Mean data rate (bit/s); 0 until a frame is seen.
    pub rate: f64,
}

impl NodeProfile {
    pub fn total(&self) -> f64 {
        self.elastic + self.inelastic
    }

    pub fn payload(&self, class: TrafficClass) -> f64 {
        match class {
            TrafficClass::Elastic => self.elastic_payload,
            TrafficClass::Inelastic => self.inelastic_payload,
        }
    }
}

pub type ProfileMap = BTreeMap<Node, NodeProfile>;

/// One transmission attempt (or a batch of identical ones) seen by the gateway.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMeta {
    /// Transmitter; `Node::Gateway` for downlink frames.
    pub node: Node,
    /// Destination station of a downlink frame.
    pub dest: Option<MacAddr>,
    pub class: TrafficClass,
    pub payload_bits: f64,
    pub rate: f64,
    pub success: bool,
    /// Predicted packet error rate of the link at `rate`.
    pub per: f64,
    pub time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Tally {
    bits: [f64; 2],
    frames: [u64; 2],
    payload_sum: [f64; 2],
    rate_sum: f64,
    attempts: u64,
}

fn slot(class: TrafficClass) -> usize {
    match class {
        TrafficClass::Elastic => 0,
        TrafficClass::Inelastic => 1,
    }
}

/// Per-cycle bookkeeping of one gateway.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleAccumulator {
    pub cycle_start: f64,
    tallies: BTreeMap<Node, Tally>,
    active: BTreeSet<Node>,
    expected: BTreeSet<MacAddr>,
    sent_inelastic: BTreeSet<MacAddr>,
    pending_downlink: BTreeSet<MacAddr>,
    attempts: u64,
    payload_sum: f64,
    rate_sum: f64,
    per_sum: f64,
    max_payload: f64,
}

impl CycleAccumulator {
    pub fn new(cycle_start: f64) -> Self {
        Self {
            cycle_start,
            tallies: BTreeMap::new(),
            active: BTreeSet::new(),
            expected: BTreeSet::new(),
            sent_inelastic: BTreeSet::new(),
            pending_downlink: BTreeSet::new(),
            attempts: 0,
            payload_sum: 0.0,
            rate_sum: 0.0,
            per_sum: 0.0,
            max_payload: 0.0,
        }
    }

    pub fn observe_frame(&mut self, f: &FrameMeta) {
        let (ok, failed) = if f.success { (1, 0) } else { (0, 1) };
        self.observe_batch(f, ok, failed);
    }

    /// Records `successes + failures` attempts sharing the metadata of `f`
    /// (its `success` field is ignored).
    pub fn observe_batch(&mut self, f: &FrameMeta, successes: u64, failures: u64) {
        let attempts = successes + failures;
        if attempts == 0 {
            return;
        }
        let n = attempts as f64;
        self.attempts += attempts;
        self.payload_sum += n * f.payload_bits;
        self.rate_sum += n * f.rate;
        self.per_sum += n * f.per;
        self.max_payload = self.max_payload.max(f.payload_bits);

        let t = self.tallies.entry(f.node).or_default();
        t.attempts += attempts;
        t.rate_sum += n * f.rate;
        if successes == 0 {
            if f.node == Node::Gateway {
                self.active.insert(Node::Gateway);
            }
            return;
        }
        let s = slot(f.class);
        let ok = successes as f64;
        t.bits[s] += ok * f.payload_bits;
        t.frames[s] += successes;
        t.payload_sum[s] += ok * f.payload_bits;
        self.active.insert(f.node);
        match (f.node, f.class) {
            (Node::Station(mac), TrafficClass::Inelastic) => {
                self.sent_inelastic.insert(mac);
            }
            (Node::Gateway, TrafficClass::Inelastic) => {
                if let Some(dest) = f.dest {
                    self.pending_downlink.remove(&dest);
                }
            }
            _ => {}
        }
    }

    /// Marks that the gateway holds inelastic data for `mac` this cycle.
    pub fn add_pending_downlink(&mut self, mac: MacAddr) {
        self.pending_downlink.insert(mac);
    }

    pub fn forget_station(&mut self, mac: MacAddr) {
        self.expected.remove(&mac);
        self.pending_downlink.remove(&mac);
    }

    pub fn is_active(&self, node: Node) -> bool {
        self.active.contains(&node)
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn expected(&self) -> &BTreeSet<MacAddr> {
        &self.expected
    }

    pub fn pending_downlink(&self) -> &BTreeSet<MacAddr> {
        &self.pending_downlink
    }

    /// Stations whose inelastic frame must be heard before the cycle can
    /// end early: last cycle's actives plus this cycle's.
    pub fn required_stations(&self) -> BTreeSet<MacAddr> {
        let mut req = self.expected.clone();
        req.extend(self.active.iter().filter_map(|n| match n {
            Node::Station(m) => Some(*m),
            Node::Gateway => None,
        }));
        req
    }

    fn reset(&mut self, now: f64) {
        self.expected = self
            .active
            .iter()
            .filter_map(|n| match n {
                Node::Station(m) => Some(*m),
                Node::Gateway => None,
            })
            .collect();
        self.cycle_start = now;
        self.tallies.clear();
        self.active.clear();
        self.sent_inelastic.clear();
        self.pending_downlink.clear();
        self.attempts = 0;
        self.payload_sum = 0.0;
        self.rate_sum = 0.0;
        self.per_sum = 0.0;
        self.max_payload = 0.0;
    }
}

/// True once `T_max` elapsed, or once every required station has delivered
/// an inelastic frame and no inelastic downlink is pending. A cycle with no
/// station to wait for only ends at `T_max`.
pub fn cycle_complete(acc: &CycleAccumulator, now: f64, t_max: f64) -> bool {
    if now - acc.cycle_start >= t_max {
        return true;
    }
    let required = acc.required_stations();
    if required.is_empty() && acc.pending_downlink.is_empty() {
        return false;
    }
    required.is_subset(&acc.sent_inelastic) && acc.pending_downlink.is_empty()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorError {
    #[error("cycle closed at {now} has non-positive duration (start {start})")]
    ZeroDuration { start: f64, now: f64 },
    #[error("smoothing factor must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
}

/// BSS-wide filtered averages carried across cycles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BssFilter {
    pub avg_payload: f64,
    pub avg_rate: f64,
    pub per: f64,
    pub initialized: bool,
}

fn ewma(old: f64, new: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * old + alpha * new
}

/// EWMA that starts from its first observation.
fn ewma_seeded(old: f64, new: f64, alpha: f64) -> f64 {
    if old > 0.0 {
        ewma(old, new, alpha)
    } else {
        new
    }
}

/// Closes the current cycle at `now`, updates `profiles` and `filter`, and
/// starts a fresh cycle.
///
/// Nodes present in `profiles` but silent this cycle see their throughputs
/// decay; nodes heard for the first time get a zero-initialised profile.
pub fn close_cycle(
    acc: &mut CycleAccumulator,
    now: f64,
    profiles: &mut ProfileMap,
    filter: &mut BssFilter,
    alpha: f64,
) -> Result<CycleStats, MonitorError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MonitorError::InvalidAlpha(alpha));
    }
    let c = now - acc.cycle_start;
    if !(c > 0.0) {
        return Err(MonitorError::ZeroDuration { start: acc.cycle_start, now });
    }
    for node in acc.tallies.keys() {
        profiles.entry(*node).or_default();
    }
    for (node, prof) in profiles.iter_mut() {
        let empty = Tally::default();
        let t = acc.tallies.get(node).unwrap_or(&empty);
        prof.elastic = ewma(prof.elastic, t.bits[0] / c, alpha);
        prof.inelastic = ewma(prof.inelastic, t.bits[1] / c, alpha);
        if t.frames[0] > 0 {
            prof.elastic_payload = ewma_seeded(prof.elastic_payload, t.payload_sum[0] / t.frames[0] as f64, alpha);
        }
        if t.frames[1] > 0 {
            prof.inelastic_payload = ewma_seeded(prof.inelastic_payload, t.payload_sum[1] / t.frames[1] as f64, alpha);
        }
        if t.attempts > 0 {
            prof.rate = ewma_seeded(prof.rate, t.rate_sum / t.attempts as f64, alpha);
        }
    }

    if acc.attempts > 0 {
        let n = acc.attempts as f64;
        let (p, r, pe) = (acc.payload_sum / n, acc.rate_sum / n, acc.per_sum / n);
        if filter.initialized {
            filter.avg_payload = ewma(filter.avg_payload, p, alpha);
            filter.avg_rate = ewma(filter.avg_rate, r, alpha);
            filter.per = ewma(filter.per, pe, alpha);
        } else {
            *filter = BssFilter { avg_payload: p, avg_rate: r, per: pe, initialized: true };
        }
        filter.per = filter.per.clamp(0.0, 1.0 - 1e-9);
    }

    let stats = CycleStats {
        n_active: acc.active.len() as u32,
        cycle_duration: c,
        avg_payload: filter.avg_payload,
        max_payload: acc.max_payload.max(filter.avg_payload),
        avg_rate: filter.avg_rate,
        filtered_per: filter.per,
    };
    acc.reset(now);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sta(i: u32) -> Node {
        Node::Station(MacAddr::local(0, i))
    }

    fn up(node: Node, class: TrafficClass, success: bool, time: f64) -> FrameMeta {
        FrameMeta { node, dest: None, class, payload_bits: 12_000.0, rate: 54e6, success, per: 0.0, time }
    }

    #[test]
    fn protocol_classes() {
        assert_eq!(classify_frame(IPPROTO_TCP), TrafficClass::Elastic);
        assert_eq!(classify_frame(IPPROTO_UDP), TrafficClass::Inelastic);
        assert_eq!(classify_frame(1), TrafficClass::Inelastic);
    }

    #[test]
    fn activity_requires_a_successful_frame() {
        let mut acc = CycleAccumulator::new(0.0);
        acc.observe_frame(&up(sta(1), TrafficClass::Inelastic, false, 0.01));
        assert!(!acc.is_active(sta(1)));
        acc.observe_frame(&up(sta(1), TrafficClass::Inelastic, true, 0.02));
        assert!(acc.is_active(sta(1)));
    }

    #[test]
    fn downlink_success_clears_pending() {
        let mut acc = CycleAccumulator::new(0.0);
        let mac = MacAddr::local(0, 4);
        acc.add_pending_downlink(mac);
        let mut f = up(Node::Gateway, TrafficClass::Inelastic, true, 0.01);
        f.dest = Some(mac);
        acc.observe_frame(&f);
        assert!(acc.pending_downlink().is_empty());
    }

    #[test]
    fn cycle_ends_at_t_max_regardless() {
        let acc = CycleAccumulator::new(0.0);
        assert!(cycle_complete(&acc, 0.1, 0.1));
        assert!(!cycle_complete(&acc, 0.05, 0.1));
    }

    #[test]
    fn elastic_only_station_keeps_cycle_open() {
        let mut acc = CycleAccumulator::new(0.0);
        acc.observe_frame(&up(sta(1), TrafficClass::Inelastic, true, 0.01));
        acc.observe_frame(&up(sta(2), TrafficClass::Elastic, true, 0.02));
        assert!(!cycle_complete(&acc, 0.05, 0.1));
        acc.observe_frame(&up(sta(2), TrafficClass::Inelastic, true, 0.03));
        assert!(cycle_complete(&acc, 0.04, 0.1));
    }

    #[test]
    fn unit_alpha_reports_exact_throughput() {
        let mut acc = CycleAccumulator::new(0.0);
        let f = up(sta(1), TrafficClass::Inelastic, true, 0.0);
        // 8 Mbit/s over 0.1 s with 12000-bit frames
        acc.observe_batch(&f, 800_000 / 12_000, 0);
        let mut profiles = ProfileMap::new();
        let mut filter = BssFilter::default();
        let stats = close_cycle(&mut acc, 0.1, &mut profiles, &mut filter, 1.0).unwrap();
        let expected = (800_000 / 12_000) as f64 * 12_000.0 / 0.1;
        assert!((profiles[&sta(1)].inelastic - expected).abs() < 1e-6);
        assert_eq!(stats.n_active, 1);
        assert_eq!(stats.avg_payload, 12_000.0);
    }

    #[test]
    fn silent_gateway_is_not_counted() {
        let mut acc = CycleAccumulator::new(0.0);
        acc.observe_frame(&up(sta(1), TrafficClass::Inelastic, true, 0.0));
        let stats = close_cycle(&mut acc, 0.1, &mut ProfileMap::new(), &mut BssFilter::default(), 0.3).unwrap();
        assert_eq!(stats.n_active, 1);
    }

    #[test]
    fn silent_node_decays_geometrically() {
        let alpha = 0.3;
        let mut profiles = ProfileMap::new();
        profiles.insert(sta(1), NodeProfile { inelastic: 1e6, ..Default::default() });
        let mut filter = BssFilter::default();
        let mut acc = CycleAccumulator::new(0.0);
        for k in 1..=5 {
            let stats = close_cycle(&mut acc, 0.1 * k as f64, &mut profiles, &mut filter, alpha).unwrap();
            assert_eq!(stats.n_active, 0);
        }
        let expected = 1e6 * 0.7f64.powi(5);
        assert!((profiles[&sta(1)].inelastic - expected).abs() < 1e-6);
    }

    #[test]
    fn zero_duration_cycle_is_rejected() {
        let mut acc = CycleAccumulator::new(1.0);
        let err = close_cycle(&mut acc, 1.0, &mut ProfileMap::new(), &mut BssFilter::default(), 0.3);
        assert!(matches!(err, Err(MonitorError::ZeroDuration { .. })));
    }

    #[test]
    fn previous_actives_must_report_again() {
        let mut acc = CycleAccumulator::new(0.0);
        acc.observe_frame(&up(sta(1), TrafficClass::Inelastic, true, 0.01));
        acc.observe_frame(&up(sta(2), TrafficClass::Inelastic, true, 0.01));
        close_cycle(&mut acc, 0.02, &mut ProfileMap::new(), &mut BssFilter::default(), 0.3).unwrap();
        acc.observe_frame(&up(sta(1), TrafficClass::Inelastic, true, 0.03));
        assert!(!cycle_complete(&acc, 0.03, 0.1));
        acc.observe_frame(&up(sta(2), TrafficClass::Inelastic, true, 0.035));
        assert!(cycle_complete(&acc, 0.035, 0.1));
    }
}
