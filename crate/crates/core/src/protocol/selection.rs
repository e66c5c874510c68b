//! Choice of which station to shed first and of the best station placement.

use std::collections::BTreeMap;

use crate::ids::{GatewayId, MacAddr};
use crate::protocol::messages::{Combo, StationEntry};

/// Heavy-status shedding order: offered load over data rate, largest first,
/// ties by MAC address.
pub fn heavy_ws_order(stations: &[StationEntry]) -> Vec<MacAddr> {
    let weight = |s: &StationEntry| {
        let rate = if s.uplink.rate > 0.0 { s.uplink.rate } else { f64::MIN_POSITIVE };
        (s.uplink.inelastic + s.uplink.elastic) / rate
    };
    let mut v: Vec<(f64, MacAddr)> = stations.iter().map(|s| (weight(s), s.mac)).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    v.into_iter().map(|(_, m)| m).collect()
}

/// A complete placement of the requester's stations.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub per_gateway: BTreeMap<GatewayId, Vec<MacAddr>>,
    pub avg_rate: f64,
    pub avg_b: f64,
}

impl Allocation {
    pub fn assignments(&self) -> Vec<(MacAddr, GatewayId)> {
        let mut a: Vec<(MacAddr, GatewayId)> =
            self.per_gateway.iter().flat_map(|(g, ms)| ms.iter().map(move |m| (*m, *g))).collect();
        a.sort();
        a
    }
}

const TIE_TOLERANCE: f64 = 1e-9;
/// Search nodes visited before the best cover found so far is returned.
pub const SEARCH_BUDGET: u64 = 2_000_000;

struct Candidate {
    responder: usize,
    gateway: GatewayId,
    mask: u64,
    rate_sum: f64,
    b: f64,
    stations: Vec<MacAddr>,
    rates: Vec<f64>,
}

struct Search<'a> {
    opts: &'a [Candidate],
    by_station: Vec<Vec<usize>>,
    best_rate: Vec<f64>,
    full: u64,
    best: Option<(f64, f64, Vec<usize>)>,
    visits: u64,
}

impl Search<'_> {
    fn better(&self, rate: f64, b: f64) -> bool {
        match &self.best {
            None => true,
            Some((br, bb, _)) => {
                let tol = TIE_TOLERANCE * br.abs().max(1.0);
                rate > br + tol || ((rate - br).abs() <= tol && b < *bb - TIE_TOLERANCE * bb.abs().max(1.0))
            }
        }
    }

    fn dfs(&mut self, covered: u64, used: u64, rate: f64, chosen: &mut Vec<usize>) {
        self.visits += 1;
        if self.visits > SEARCH_BUDGET {
            return;
        }
        if covered == self.full {
            let avg_b = chosen.iter().map(|&i| self.opts[i].b).sum::<f64>() / chosen.len() as f64;
            if self.better(rate, avg_b) {
                self.best = Some((rate, avg_b, chosen.clone()));
            }
            return;
        }
        if let Some((br, _, _)) = &self.best {
            let bound: f64 =
                (0..self.by_station.len()).filter(|i| covered & (1 << i) == 0).map(|i| self.best_rate[i]).sum();
            if rate + bound < br - TIE_TOLERANCE * br.abs().max(1.0) {
                return;
            }
        }
        let first = (!covered & self.full).trailing_zeros() as usize;
        for k in 0..self.by_station[first].len() {
            let i = self.by_station[first][k];
            let o = &self.opts[i];
            if o.mask & covered != 0 || used & (1 << o.responder) != 0 {
                continue;
            }
            let (mask, resp, r) = (o.mask, o.responder, o.rate_sum);
            chosen.push(i);
            self.dfs(covered | mask, used | (1 << resp), rate + r, chosen);
            chosen.pop();
        }
    }
}

/// Places every station of `stations` using at most one offered combo per
/// responder. Maximises the average station rate; ties go to the smallest
/// average b-metric. Returns `None` when no complete cover exists.
pub fn select_allocation(responses: &[(GatewayId, Vec<Combo>)], stations: &[MacAddr]) -> Option<Allocation> {
    if stations.is_empty() || stations.len() > 64 {
        return None;
    }
    let mut sorted: Vec<&(GatewayId, Vec<Combo>)> = responses.iter().collect();
    sorted.sort_by_key(|(g, _)| *g);
    if sorted.len() > 64 {
        sorted.truncate(64);
    }
    let index = |m: &MacAddr| stations.iter().position(|s| s == m);
    let mut opts = Vec::new();
    for (r, (gw, combos)) in sorted.iter().enumerate() {
        'combo: for c in combos {
            if c.stations.is_empty() || c.stations.len() != c.rates.len() {
                continue;
            }
            let mut mask = 0u64;
            for m in &c.stations {
                match index(m) {
                    Some(i) if mask & (1 << i) == 0 => mask |= 1 << i,
                    _ => continue 'combo,
                }
            }
            opts.push(Candidate {
                responder: r,
                gateway: *gw,
                mask,
                rate_sum: c.rates.iter().sum(),
                b: c.b,
                stations: c.stations.clone(),
                rates: c.rates.clone(),
            });
        }
    }
    let n = stations.len();
    let mut by_station = vec![Vec::new(); n];
    let mut best_rate = vec![f64::NEG_INFINITY; n];
    for (i, o) in opts.iter().enumerate() {
        let first = o.mask.trailing_zeros() as usize;
        by_station[first].push(i);
    }
    for o in &opts {
        for (m, &r) in o.stations.iter().zip(&o.rates) {
            let i = index(m).expect("validated");
            best_rate[i] = best_rate[i].max(r);
        }
    }
    if best_rate.iter().any(|r| !r.is_finite()) {
        return None;
    }
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut s = Search { opts: &opts, by_station, best_rate, full, best: None, visits: 0 };
    s.dfs(0, 0, 0.0, &mut Vec::new());
    let (rate, avg_b, chosen) = s.best?;
    let mut per_gateway = BTreeMap::new();
    for i in chosen {
        let o = &opts[i];
        let mut ms = o.stations.clone();
        ms.sort();
        per_gateway.insert(o.gateway, ms);
    }
    Some(Allocation { per_gateway, avg_rate: rate / n as f64, avg_b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assessment::Demand;
    use crate::monitor::NodeProfile;

    fn m(i: u32) -> MacAddr {
        MacAddr::local(0, i)
    }

    fn combo(st: &[u32], rate: f64, b: f64) -> Combo {
        Combo {
            stations: st.iter().map(|&i| m(i)).collect(),
            rates: vec![rate * 1e6; st.len()],
            b: b * 1e6,
            saturation: 30e6,
        }
    }

    fn entry(i: u32, load: f64, rate: f64) -> StationEntry {
        StationEntry {
            mac: m(i),
            aid: i as u16,
            aid_hash: i as u16,
            uplink: NodeProfile { inelastic: load * 1e6, rate: rate * 1e6, ..Default::default() },
            downlink: Demand::default(),
        }
    }

    #[test]
    fn heavy_order_weights_by_inverse_rate() {
        let order = heavy_ws_order(&[entry(1, 2.0, 54.0), entry(2, 1.0, 6.0)]);
        assert_eq!(order, vec![m(2), m(1)]);
    }

    #[test]
    fn heavy_order_ties_by_mac() {
        let order = heavy_ws_order(&[entry(3, 1.0, 6.0), entry(2, 1.0, 6.0)]);
        assert_eq!(order, vec![m(2), m(3)]);
        assert_eq!(heavy_ws_order(&[entry(5, 1.0, 6.0)]), vec![m(5)]);
    }

    #[test]
    fn higher_average_rate_wins() {
        let st = [m(1), m(2), m(3)];
        let r = vec![
            (GatewayId(1), vec![combo(&[1, 2, 3], 24.0, 1.0)]),
            (GatewayId(2), vec![combo(&[1, 2, 3], 36.0, 5.0)]),
        ];
        let a = select_allocation(&r, &st).unwrap();
        assert_eq!(a.per_gateway.keys().copied().collect::<Vec<_>>(), vec![GatewayId(2)]);
        assert!((a.avg_rate - 36e6).abs() < 1e-6);
    }

    #[test]
    fn ties_prefer_smaller_b() {
        let st = [m(1), m(2), m(3)];
        let r = vec![
            (GatewayId(1), vec![combo(&[1, 2, 3], 36.0, 5.0)]),
            (GatewayId(2), vec![combo(&[1, 2, 3], 36.0, 3.0)]),
        ];
        let a = select_allocation(&r, &st).unwrap();
        assert!(a.per_gateway.contains_key(&GatewayId(2)));
    }

    #[test]
    fn uncovered_station_yields_none() {
        let st = [m(1), m(2), m(3)];
        let r = vec![(GatewayId(1), vec![combo(&[1, 2], 36.0, 5.0)]), (GatewayId(2), vec![combo(&[1], 54.0, 3.0)])];
        assert!(select_allocation(&r, &st).is_none());
    }

    #[test]
    fn split_across_responders() {
        let st = [m(1), m(2), m(3)];
        let r = vec![
            (GatewayId(1), vec![combo(&[1], 54.0, 5.0), combo(&[1, 2], 24.0, 2.0)]),
            (GatewayId(2), vec![combo(&[2, 3], 36.0, 3.0), combo(&[3], 12.0, 3.0)]),
        ];
        let a = select_allocation(&r, &st).unwrap();
        assert_eq!(a.per_gateway[&GatewayId(1)], vec![m(1)]);
        assert_eq!(a.per_gateway[&GatewayId(2)], vec![m(2), m(3)]);
        assert_eq!(a.assignments().len(), 3);
    }

    #[test]
    fn one_combo_per_responder() {
        let st = [m(1), m(2)];
        let r = vec![(GatewayId(1), vec![combo(&[1], 54.0, 5.0), combo(&[2], 54.0, 5.0)])];
        assert!(select_allocation(&r, &st).is_none());
    }
}
