//! Fluid share of one cycle's channel time among the contenders of a BSS.
//!
//! Every contender first receives up to one saturation share `S_n`; what is
//! left is handed out one packet at a time, round robin, to the contenders
//! that want more, slowest first and inelastic before elastic. This is the
//! grant sequence the b-metric predicts, so measurements and predictions
//! agree by construction.

use crate::mac::{saturation_throughput, CycleStats, MacError, MacParams, SaturationResult};
use crate::monitor::Node;

/// Offered traffic of one transmitter for the coming cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct Contender {
    pub node: Node,
    /// Inelastic demand (bit/s).
    pub inelastic: f64,
    /// Elastic demand (bit/s); `f64::INFINITY` for a greedy sender.
    pub elastic: f64,
    pub inelastic_payload: f64,
    pub elastic_payload: f64,
    pub rate: f64,
    /// Packet error rate at `rate`.
    pub per: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Grant {
    pub inelastic: f64,
    pub elastic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub grants: Vec<Grant>,
    pub sat: SaturationResult,
    pub stats: CycleStats,
}

const SATISFIED: f64 = 1e-6;

fn class_payload(c: &Contender, inelastic: bool) -> f64 {
    let (own, other) =
        if inelastic { (c.inelastic_payload, c.elastic_payload) } else { (c.elastic_payload, c.inelastic_payload) };
    if own > 0.0 {
        own
    } else {
        other
    }
}

fn bss_stats(contenders: &[Contender], weights: &[f64], quantum_time: f64) -> CycleStats {
    let (mut w, mut pw, mut rw, mut ew, mut pmax) = (0.0, 0.0, 0.0, 0.0, 0.0f64);
    for (c, &(mut wi)) in contenders.iter().zip(weights) {
        if !(wi > 0.0) {
            wi = f64::MIN_POSITIVE;
        }
        let p = if c.inelastic > 0.0 { class_payload(c, true) } else { class_payload(c, false) };
        w += wi;
        pw += wi * p;
        rw += wi * c.rate;
        ew += wi * c.per;
        pmax = pmax.max(c.inelastic_payload).max(c.elastic_payload);
    }
    let avg_payload = pw / w;
    CycleStats {
        n_active: contenders.len() as u32,
        cycle_duration: quantum_time,
        avg_payload,
        max_payload: pmax.max(avg_payload),
        avg_rate: rw / w,
        filtered_per: (ew / w).clamp(0.0, 1.0 - 1e-9),
    }
}

/// Distributes `sat.aggregate` among `contenders`. Grants are throughputs;
/// overflow grants consume `R / R_k` of capacity per bit/s.
pub fn fill(contenders: &[Contender], sat: &SaturationResult, avg_rate: f64, quantum_time: f64) -> Vec<Grant> {
    let s_n = sat.per_node;
    let mut beta = sat.aggregate;
    let mut grants: Vec<Grant> = contenders
        .iter()
        .map(|c| {
            let nu = c.inelastic.min(s_n);
            let eta = c.elastic.min(s_n - nu);
            beta -= nu + eta;
            Grant { inelastic: nu, elastic: eta }
        })
        .collect();
    let mut order: Vec<usize> =
        (0..contenders.len()).filter(|&k| contenders[k].inelastic + contenders[k].elastic > s_n).collect();
    order.sort_by(|&a, &b| {
        contenders[a].rate.total_cmp(&contenders[b].rate).then(contenders[a].node.cmp(&contenders[b].node))
    });
    let mut live = vec![true; order.len()];
    while beta > 0.0 && live.iter().any(|&l| l) {
        for (slot, &k) in order.iter().enumerate() {
            if !(beta > 0.0) {
                break;
            }
            if !live[slot] {
                continue;
            }
            let c = &contenders[k];
            let g = &mut grants[k];
            let airtime = avg_rate / c.rate;
            let (have, want, inelastic) = if c.inelastic - g.inelastic > SATISFIED {
                (g.inelastic, c.inelastic, true)
            } else if c.elastic - g.elastic > SATISFIED {
                (g.elastic, c.elastic, false)
            } else {
                live[slot] = false;
                continue;
            };
            let quantum = class_payload(c, inelastic) * airtime / quantum_time;
            if !(quantum > 0.0) {
                live[slot] = false;
                continue;
            }
            let delta = quantum.min(beta).min((want - have) * airtime);
            beta -= delta;
            if inelastic {
                g.inelastic += delta / airtime;
            } else {
                g.elastic += delta / airtime;
            }
        }
    }
    grants
}

/// Computes the BSS capacity for the contenders actually transmitting and
/// shares it. The averages entering the saturation model are weighted by
/// the granted frame rates, found with one refinement pass.
pub fn allocate(contenders: &[Contender], mac: &MacParams, quantum_time: f64) -> Result<Allocation, MacError> {
    if contenders.is_empty() {
        let stats = CycleStats {
            n_active: 0,
            cycle_duration: quantum_time,
            avg_payload: 0.0,
            max_payload: 0.0,
            avg_rate: 0.0,
            filtered_per: 0.0,
        };
        let sat = SaturationResult {
            tau: 0.0,
            p_cond: 0.0,
            expected_event_time: mac.slot_time,
            aggregate: 0.0,
            per_node: 0.0,
        };
        return Ok(Allocation { grants: Vec::new(), sat, stats });
    }
    let mut weights = vec![1.0; contenders.len()];
    let mut result = None;
    for _ in 0..2 {
        let stats = bss_stats(contenders, &weights, quantum_time);
        let sat = saturation_throughput(&stats, mac)?;
        let grants = fill(contenders, &sat, stats.avg_rate, quantum_time);
        weights = contenders
            .iter()
            .zip(&grants)
            .map(|(c, g)| g.inelastic / class_payload(c, true) + g.elastic / class_payload(c, false))
            .collect();
        result = Some(Allocation { grants, sat, stats });
    }
    Ok(result.expect("two passes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::MacAddr;

    fn udp(i: u32, load: f64, rate: f64) -> Contender {
        Contender {
            node: Node::Station(MacAddr::local(0, i)),
            inelastic: load,
            elastic: 0.0,
            inelastic_payload: 12_000.0,
            elastic_payload: 0.0,
            rate,
            per: 0.0,
        }
    }

    #[test]
    fn light_demand_is_fully_granted() {
        let a = allocate(&[udp(1, 8e6, 54e6)], &MacParams::default(), 0.1).unwrap();
        assert!((a.grants[0].inelastic - 8e6).abs() < 1e-6);
    }

    #[test]
    fn symmetric_overload_splits_evenly() {
        let c: Vec<Contender> = (1..=3).map(|i| udp(i, 30e6, 54e6)).collect();
        let a = allocate(&c, &MacParams::default(), 0.1).unwrap();
        let total: f64 = a.grants.iter().map(|g| g.inelastic).sum();
        assert!((total - a.sat.aggregate).abs() < 1e-6 * a.sat.aggregate);
        for g in &a.grants {
            assert!((g.inelastic - a.sat.aggregate / 3.0).abs() < 1.2e5, "{g:?}");
        }
    }

    #[test]
    fn greedy_elastic_yields_to_inelastic() {
        let mut tcp = udp(1, 0.0, 54e6);
        tcp.elastic = f64::INFINITY;
        tcp.elastic_payload = 12_000.0;
        let a = allocate(&[tcp, udp(2, 8e6, 54e6)], &MacParams::default(), 0.1).unwrap();
        assert!((a.grants[1].inelastic - 8e6).abs() < 1e-6);
        assert!(a.grants[0].elastic > 15e6);
        let used = a.grants[0].elastic + a.grants[1].inelastic;
        assert!((used - a.sat.aggregate).abs() < 1e-6 * a.sat.aggregate);
    }

    #[test]
    fn slow_overflow_node_costs_more_airtime() {
        let c = [udp(1, 30e6, 6e6), udp(2, 30e6, 54e6)];
        let a = allocate(&c, &MacParams::default(), 0.1).unwrap();
        let r = a.stats.avg_rate;
        let s_n = a.sat.per_node;
        let airtime: f64 = c.iter().zip(&a.grants).map(|(c, g)| s_n + (g.inelastic - s_n) * r / c.rate).sum();
        assert!((airtime - a.sat.aggregate).abs() < 1e-6 * a.sat.aggregate);
    }
}
