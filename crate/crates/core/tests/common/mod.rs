#![allow(dead_code)]

use fedgw::config::{Direction, HouseSpec, Population, ScenarioConfig, StationSelector, Topology, TrafficSpec};
use fedgw::ids::MacAddr;
use fedgw::mac::{CycleStats, MacParams, SaturationResult};
use fedgw::monitor::{Node, NodeProfile, ProfileMap, TrafficClass};
use fedgw::sim::topology::Layout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed point by bisection on `tau`, with the textbook closed form of the
/// backoff chain.
pub fn bisect_tau(n: u32, p_e: f64, mac: &MacParams) -> (f64, f64) {
    let w = f64::from(mac.cw_min);
    let m = mac.backoff_stages as i32;
    let tau_of_p = |p: f64| {
        if (1.0 - 2.0 * p).abs() < 1e-9 {
            2.0 / (1.0 + w + p * w * f64::from(m))
        } else {
            2.0 * (1.0 - 2.0 * p) / ((1.0 - 2.0 * p) * (w + 1.0) + p * w * (1.0 - (2.0 * p).powi(m)))
        }
    };
    let p_of_tau = |t: f64| 1.0 - (1.0 - t).powi(n as i32 - 1) * (1.0 - p_e);
    let f = |t: f64| t - tau_of_p(p_of_tau(t));
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    (tau, p_of_tau(tau))
}

/// Saturated DCF simulated slot by slot: binary exponential backoff with
/// `backoff_stages` doublings, no retry limit, frames lost to channel errors
/// with probability `p_e`. Every station that does not transmit counts down
/// once per generic slot, idle or busy. Returns delivered payload bits per
/// second.
pub fn dcf_monte_carlo(n: u32, p_e: f64, payload: f64, rate: f64, mac: &MacParams, events: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = mac.cw_min as u64;
    let header = mac.phy_header_time();
    let t_s = 2.0 * header + (mac.mac_header_bits + payload + mac.ack_bits) / rate + mac.sifs + mac.difs;
    let t_f = header + (mac.mac_header_bits + payload) / rate + mac.sifs + mac.ack_time() + mac.difs;
    let mut stage = vec![0u32; n as usize];
    let mut counter: Vec<u64> = (0..n).map(|_| rng.random_range(0..w)).collect();
    let mut time = 0.0;
    let mut bits = 0.0;
    let mut tx = Vec::with_capacity(n as usize);
    for _ in 0..events {
        tx.clear();
        tx.extend((0..n as usize).filter(|&i| counter[i] == 0));
        match tx.len() {
            0 => time += mac.slot_time,
            1 if rng.random::<f64>() >= p_e => {
                time += t_s;
                bits += payload;
                stage[tx[0]] = 0;
            }
            _ => {
                time += t_f;
                for &i in &tx {
                    stage[i] = (stage[i] + 1).min(mac.backoff_stages);
                }
            }
        }
        for i in 0..n as usize {
            if tx.contains(&i) {
                counter[i] = rng.random_range(0..(w << stage[i]));
            } else {
                counter[i] -= 1;
            }
        }
    }
    bits / time
}

pub fn stats(n: u32, payload: f64, max_payload: f64, rate: f64, p_e: f64) -> CycleStats {
    CycleStats {
        n_active: n,
        cycle_duration: 0.1,
        avg_payload: payload,
        max_payload,
        avg_rate: rate,
        filtered_per: p_e,
    }
}

pub fn scenario_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn load_scenario(name: &str) -> fedgw::config::ScenarioConfig {
    fedgw::config::ScenarioConfig::load(scenario_path(name)).expect("bundled scenario loads")
}

/// One random instance for the assessment oracles. Every quantity is a
/// dyadic rational, so the result does not depend on summation order.
pub struct Instance {
    pub stats: CycleStats,
    pub profiles: ProfileMap,
    pub sat: SaturationResult,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..=6u32);
    let avg_rate = f64::from(1u32 << 25);
    let per_node = f64::from(rng.random_range(100..4000u32)) * 8192.0;
    let mut profiles = ProfileMap::new();
    for k in 0..n {
        let node = if k == 0 { Node::Gateway } else { Node::Station(MacAddr::local(1, k)) };
        let demand = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(0.3) {
                0.0
            } else {
                f64::from(rng.random_range(0..(2 * per_node as u32 / 1024))) * 1024.0
            }
        };
        let payload = |rng: &mut ChaCha8Rng| [0.0, 512.0, 4096.0, 8000.0, 12000.0][rng.random_range(0..5)];
        let profile = NodeProfile {
            inelastic: demand(rng),
            elastic: demand(rng),
            inelastic_payload: payload(rng),
            elastic_payload: payload(rng),
            rate: [0.0, avg_rate / 4.0, avg_rate / 2.0, avg_rate, avg_rate * 2.0][rng.random_range(0..5)],
        };
        profiles.insert(node, profile);
    }
    let stats = CycleStats {
        n_active: n,
        cycle_duration: 0.125,
        avg_payload: 12000.0,
        max_payload: 12000.0,
        avg_rate,
        filtered_per: 0.0,
    };
    let sat = SaturationResult {
        tau: 0.05,
        p_cond: 0.1,
        expected_event_time: 1e-4,
        aggregate: per_node * f64::from(n),
        per_node,
    };
    Instance { stats, profiles, sat }
}

fn rate_of(p: &NodeProfile, stats: &CycleStats) -> f64 {
    if p.rate > 0.0 {
        p.rate
    } else {
        stats.avg_rate
    }
}

/// Available inelastic bandwidth, node by node.
pub fn brute_available(inst: &Instance) -> f64 {
    let s_n = inst.sat.per_node;
    let mut used = 0.0;
    for p in inst.profiles.values() {
        let fair = if p.inelastic + p.elastic < s_n { p.inelastic + p.elastic } else { s_n };
        let excess = if p.inelastic > s_n { p.inelastic - s_n } else { 0.0 };
        used += fair + excess * (inst.stats.avg_rate / rate_of(p, &inst.stats));
    }
    inst.sat.aggregate - used
}

/// Hands out the residual bandwidth one packet at a time, slowest overflow
/// node first, inelastic before elastic. Returns `(b, beta, inelastic granted)`.
pub fn brute_b_metric(inst: &Instance) -> (f64, f64, f64) {
    let s_n = inst.sat.per_node;
    let stats = &inst.stats;
    struct Slot {
        node: Node,
        rate: f64,
        inel_left: f64,
        el_left: f64,
        q_inel: f64,
        q_el: f64,
    }
    let quantum = |payload: f64, rate: f64| {
        let p = if payload > 0.0 { payload } else { stats.avg_payload };
        p * stats.avg_rate / (stats.cycle_duration * rate)
    };
    let mut beta = inst.sat.aggregate;
    let mut slots = Vec::new();
    for (node, p) in &inst.profiles {
        let x = p.inelastic + p.elastic;
        beta -= x.min(s_n);
        if x > s_n {
            let nu = p.inelastic.min(s_n);
            let eta = p.elastic.min(s_n - nu);
            let rate = rate_of(p, stats);
            slots.push(Slot {
                node: *node,
                rate,
                inel_left: p.inelastic - nu,
                el_left: p.elastic - eta,
                q_inel: quantum(p.inelastic_payload, rate),
                q_el: quantum(p.elastic_payload, rate),
            });
        }
    }
    slots.sort_by(|a, b| a.rate.partial_cmp(&b.rate).unwrap().then(a.node.cmp(&b.node)));
    let beta0 = beta;
    let mut granted = 0.0;
    let mut live: Vec<bool> = vec![true; slots.len()];
    'outer: while live.iter().any(|&l| l) {
        for (i, s) in slots.iter_mut().enumerate() {
            if beta <= 0.0 {
                break 'outer;
            }
            if !live[i] {
                continue;
            }
            if s.inel_left > 0.0 {
                let d = if s.q_inel < beta { s.q_inel } else { beta };
                s.inel_left -= d;
                beta -= d;
                granted += d;
            } else if s.el_left > 0.0 {
                let d = if s.q_el < beta { s.q_el } else { beta };
                s.el_left -= d;
                beta -= d;
            } else {
                live[i] = false;
            }
        }
    }
    (beta0 - granted, beta0, granted)
}

/// A small random federation that always validates.
pub fn random_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    loop {
        let n_houses = rng.random_range(2..=6usize);
        let cols = rng.random_range(1..=3usize);
        let spacing = rng.random_range(18.0..35.0);
        let houses = (0..n_houses)
            .map(|h| HouseSpec {
                x: (h % cols) as f64 * spacing + rng.random_range(0.0..3.0),
                y: (h / cols) as f64 * spacing + rng.random_range(0.0..3.0),
                gateway: None,
                off: false,
            })
            .collect();
        let mut traffic = vec![TrafficSpec {
            stations: StationSelector::Keyword("all".into()),
            direction: Direction::Uplink,
            class: TrafficClass::Inelastic,
            rate: Some(rng.random_range(0.2e6..3e6)),
            payload_bytes: [500.0, 1000.0, 1500.0][rng.random_range(0..3)],
            start: 0.0,
            stop: None,
            start_spread: rng.random_range(0.0..2.0),
        }];
        if rng.random_bool(0.4) {
            traffic.push(TrafficSpec {
                stations: StationSelector::List(vec![0]),
                direction: if rng.random_bool(0.5) { Direction::Uplink } else { Direction::Downlink },
                class: TrafficClass::Elastic,
                rate: None,
                payload_bytes: 1500.0,
                start: rng.random_range(1.0..5.0),
                stop: None,
                start_spread: 0.0,
            });
        }
        if rng.random_bool(0.4) {
            traffic.push(TrafficSpec {
                stations: StationSelector::Keyword("all".into()),
                direction: Direction::Downlink,
                class: TrafficClass::Inelastic,
                rate: Some(rng.random_range(0.1e6..1e6)),
                payload_bytes: 1500.0,
                start: rng.random_range(5.0..10.0),
                stop: None,
                start_spread: 1.0,
            });
        }
        let mut cfg = ScenarioConfig {
            name: format!("random-{seed}"),
            seed,
            duration: rng.random_range(15.0..30.0),
            topology: Topology { houses, ..Topology::default() },
            population: Some(Population { per_house: rng.random_range(1..=4), margin: 1.0 }),
            traffic,
            ..ScenarioConfig::default()
        };
        cfg.channel.distance_coef = 28.0;
        cfg.channel.wall_loss_db = 7.0;
        if cfg.validate().is_ok() && Layout::build(&cfg).is_ok() {
            return cfg;
        }
    }
}
