//! Event loop driving gateways, stations and the backhaul bus.
//!
//! Each switched-on gateway runs back-to-back monitoring cycles. At the
//! start of a cycle the channel time is shared among the BSS contenders
//! (see [`super::allocate`]); at its end the granted frames are sent over
//! the links, fed to the passive monitor, and the closed cycle is handed to
//! the gateway's protocol agent.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::allocate::{allocate, Contender, Grant};
use super::checker::{Checker, Violation};
use super::links::transmit;
use super::metrics::{AssocEvent, AssocRow, CycleRow, GatewayRow, MessageRow, RunLog, RunSummary, StatusFilter};
use super::topology::Layout;
use super::traffic::{demands_at, instantiate, Flow, StationDemand, SEGMENTS_PER_ACK, TCP_ACK_BITS};
use crate::assessment::{assess_status, Demand};
use crate::channel::{best_rate, packet_error_rate, LinkState, PhyRate};
use crate::config::{ConfigError, ScenarioConfig};
use crate::ids::{GatewayId, MacAddr};
use crate::mac::{saturation_throughput, MacError};
use crate::monitor::{
    close_cycle, BssFilter, CycleAccumulator, FrameMeta, MonitorError, Node, ProfileMap, TrafficClass,
};
use crate::protocol::probe::{aid_hash, assign_aid};
use crate::protocol::{
    Action, AgentParams, BssView, Destination, GatewayAgent, ProbeObservation, ProtocolMessage, StationEntry, Timer,
};
use crate::rng::substream;

/// Wi-Fi channels assigned round robin to the gateways.
pub const CHANNELS: [u8; 3] = [1, 6, 11];
/// Extra time past `reassoc_delay` a station may stay unassociated.
pub const ORPHAN_GRACE: f64 = 0.5;
/// Retry period of a station that finds no gateway.
pub const SCAN_RETRY: f64 = 1.0;
const MIN_CYCLE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mac(#[from] MacError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Check protocol invariants and stop at the first violation.
    pub check_invariants: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { check_invariants: true }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: RunLog,
    pub summary: RunSummary,
    pub violations: Vec<Violation>,
    /// Simulated time reached.
    pub end_time: f64,
}

#[derive(Debug, Clone)]
enum EventKind {
    CycleEnd { g: usize, epoch: u64 },
    Deliver { to: usize, msg: ProtocolMessage },
    Timer { g: usize, timer: Timer },
    Reassociate { s: usize },
    OrphanCheck { s: usize, since: f64 },
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Inelastic,
    Elastic,
    Ack,
}

impl Kind {
    fn class(self) -> TrafficClass {
        match self {
            Kind::Inelastic => TrafficClass::Inelastic,
            _ => TrafficClass::Elastic,
        }
    }
}

/// `(downlink, station, kind)`
type StreamKey = (bool, usize, Kind);

#[derive(Debug, Clone)]
struct Stream {
    key: StreamKey,
    payload_bits: f64,
    /// Granted throughput (bit/s).
    rate: f64,
}

#[derive(Debug)]
struct Gw {
    agent: GatewayAgent,
    epoch: u64,
    channel: u8,
    stations: BTreeSet<usize>,
    aids: BTreeMap<usize, u16>,
    authorized: BTreeSet<usize>,
    probe_window: Option<(u8, f64)>,
    acc: CycleAccumulator,
    profiles: ProfileMap,
    filter: BssFilter,
    plan: Vec<Stream>,
    credits: BTreeMap<StreamKey, f64>,
    /// Damped elastic throughput per node.
    elastic: BTreeMap<Node, f64>,
    /// Elastic data sent in the last cycle, per `(downlink, station)`; drives ACK load.
    tcp_sent: BTreeMap<(bool, usize), (f64, f64)>,
    /// Smoothed downlink each station receives.
    downlink: BTreeMap<usize, Demand>,
    confirmed: StatusFilter,
}

impl Gw {
    fn reset_bss(&mut self, now: f64) {
        self.acc = CycleAccumulator::new(now);
        self.profiles.clear();
        self.filter = BssFilter::default();
        self.plan.clear();
        self.credits.clear();
        self.elastic.clear();
        self.tcp_sent.clear();
        self.downlink.clear();
        self.confirmed.reset();
    }
}

#[derive(Debug)]
struct Sta {
    mac: MacAddr,
    gateway: Option<usize>,
    left_at: Option<f64>,
    up: LinkState,
    down: LinkState,
    link_rng: ChaCha8Rng,
    phase_rng: ChaCha8Rng,
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    layout: Layout,
    flows: Vec<Flow>,
    gws: Vec<Gw>,
    stas: Vec<Sta>,
    mac_index: BTreeMap<MacAddr, usize>,
    queue: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    bus_rng: ChaCha8Rng,
    checker: Option<Checker>,
    log: RunLog,
}

pub fn station_mac(s: usize) -> MacAddr {
    MacAddr::local(1, s as u32)
}

fn frame_bits(payload: f64, cfg: &ScenarioConfig) -> f64 {
    payload + cfg.mac.mac_header_bits
}

fn ewma(old: f64, new: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * old + alpha * new
}

/// Runs `cfg` to its configured duration.
pub fn run(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let mut e = Engine::new(cfg, opts)?;
    e.bootstrap();
    e.run_loop()?;
    let end_time = e.now;
    let violations = e.checker.map(|c| c.violations).unwrap_or_default();
    let summary = e.log.summarize(cfg.last_traffic_change());
    Ok(RunOutput { log: e.log, summary, violations, end_time })
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig, opts: &RunOptions) -> Result<Self, SimError> {
        let layout = Layout::build(cfg)?;
        layout.check_coverage(cfg)?;
        let flows = instantiate(cfg);
        let params = AgentParams {
            protocol: cfg.protocol.clone(),
            thresholds: cfg.thresholds.clone(),
            mac: cfg.mac.clone(),
            t_max: cfg.t_max,
        };
        let gws: Vec<Gw> = cfg
            .topology
            .houses
            .iter()
            .enumerate()
            .map(|(g, h)| Gw {
                agent: GatewayAgent::new(
                    GatewayId(g as u16),
                    params.clone(),
                    substream(cfg.seed, &format!("agent/{g}")),
                    !h.off,
                ),
                epoch: 0,
                channel: CHANNELS[g % CHANNELS.len()],
                stations: BTreeSet::new(),
                aids: BTreeMap::new(),
                authorized: BTreeSet::new(),
                probe_window: None,
                acc: CycleAccumulator::new(0.0),
                profiles: ProfileMap::new(),
                filter: BssFilter::default(),
                plan: Vec::new(),
                credits: BTreeMap::new(),
                elastic: BTreeMap::new(),
                tcp_sent: BTreeMap::new(),
                downlink: BTreeMap::new(),
                confirmed: StatusFilter::default(),
            })
            .collect();
        let n = layout.stations.len();
        let stas: Vec<Sta> = (0..n)
            .map(|s| Sta {
                mac: station_mac(s),
                gateway: None,
                left_at: None,
                up: LinkState::new(0.0, 0, 0.0, PhyRate::Dsss1),
                down: LinkState::new(0.0, 0, 0.0, PhyRate::Dsss1),
                link_rng: substream(cfg.seed, &format!("link/{s}")),
                phase_rng: substream(cfg.seed, &format!("phase/{s}")),
            })
            .collect();
        let mac_index = stas.iter().enumerate().map(|(s, st)| (st.mac, s)).collect();
        let secs = cfg.duration.ceil() as usize + 1;
        let log = RunLog {
            n_gateways: gws.len(),
            n_stations: n,
            duration: cfg.duration,
            initially_on: cfg.topology.houses.iter().map(|h| !h.off).collect(),
            station_bits: vec![vec![[0.0; 2]; secs]; n],
            offered_inelastic: super::bundle::offered_inelastic(cfg),
            ..RunLog::default()
        };
        let checker = opts
            .check_invariants
            .then(|| Checker::new(cfg.thresholds.clone(), cfg.protocol.bus_latency, cfg.reassoc_delay + ORPHAN_GRACE));
        Ok(Self {
            cfg,
            layout,
            flows,
            gws,
            stas,
            mac_index,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            bus_rng: substream(cfg.seed, "bus"),
            checker,
            log,
        })
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event { time, seq: self.seq, kind });
    }

    fn bootstrap(&mut self) {
        for s in 0..self.stas.len() {
            let home = self.layout.home[s];
            let target = if self.gws[home].agent.is_on() && self.layout.visible(s, home) {
                Some(home)
            } else {
                self.best_gateway(s, |_| true)
            };
            match target {
                Some(g) => self.associate(s, g, "initial"),
                None => {
                    self.stas[s].left_at = Some(0.0);
                    self.push(SCAN_RETRY, EventKind::Reassociate { s });
                    self.push(self.cfg.reassoc_delay + ORPHAN_GRACE, EventKind::OrphanCheck { s, since: 0.0 });
                }
            }
        }
        for g in 0..self.gws.len() {
            if self.gws[g].agent.is_on() {
                self.start_cycle(g);
            }
        }
    }

    fn run_loop(&mut self) -> Result<(), SimError> {
        while let Some(ev) = self.queue.pop() {
            if ev.time > self.cfg.duration {
                break;
            }
            self.now = ev.time;
            match ev.kind {
                EventKind::CycleEnd { g, epoch } => {
                    if self.gws[g].epoch == epoch && self.gws[g].agent.is_on() {
                        self.end_cycle(g)?;
                    }
                }
                EventKind::Deliver { to, msg } => {
                    let actions = self.gws[to].agent.on_message(self.now, &msg);
                    self.execute(to, actions);
                }
                EventKind::Timer { g, timer } => {
                    let actions = self.gws[g].agent.on_timer(self.now, timer);
                    self.execute(g, actions);
                }
                EventKind::Reassociate { s } => self.reassociate(s),
                EventKind::OrphanCheck { s, since } => {
                    let st = &self.stas[s];
                    if st.gateway.is_none() && st.left_at == Some(since) {
                        let mac = st.mac;
                        if let Some(c) = self.checker.as_mut() {
                            c.on_orphan(self.now, mac, since);
                        }
                    }
                }
            }
            if self.checker.as_ref().is_some_and(|c| !c.violations.is_empty()) {
                break;
            }
        }
        if self.checker.as_ref().is_none_or(|c| c.violations.is_empty()) {
            self.now = self.cfg.duration;
        }
        Ok(())
    }

    // ---- association ----

    fn best_gateway(&self, s: usize, accept: impl Fn(&Gw) -> bool) -> Option<usize> {
        (0..self.gws.len())
            .filter(|&g| self.gws[g].agent.is_on() && self.layout.visible(s, g) && accept(&self.gws[g]))
            .max_by(|&a, &b| self.layout.snr[s][a].total_cmp(&self.layout.snr[s][b]).then(b.cmp(&a)))
    }

    fn associate(&mut self, s: usize, g: usize, reason: &str) {
        let cfg = self.cfg;
        let snr = self.layout.snr[s][g];
        let bits = frame_bits(super::topology::REFERENCE_FRAME_BITS, cfg);
        let rate = best_rate(snr, &PhyRate::ALL, bits, cfg.max_per).unwrap_or(PhyRate::Dsss1);
        let d = {
            let (p, q) = (self.layout.stations[s], self.layout.gateways[g]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        };
        let walls = self.layout.walls[s][g];
        let gw = &mut self.gws[g];
        let used: BTreeSet<u16> = gw.aids.values().copied().collect();
        gw.aids.insert(s, assign_aid(&used, &cfg.mac));
        gw.stations.insert(s);
        let on = gw.agent.is_on();
        for other in self.gws.iter_mut() {
            other.authorized.remove(&s);
        }
        let st = &mut self.stas[s];
        st.gateway = Some(g);
        st.left_at = None;
        st.up = LinkState::new(d, walls, snr, rate);
        st.down = LinkState::new(d, walls, snr, rate);
        let mac = st.mac;
        if let Some(c) = self.checker.as_mut() {
            c.on_associate(self.now, mac, GatewayId(g as u16), on);
        }
        self.log.assoc.push(AssocRow {
            time: self.now,
            station: s,
            mac: mac.to_string(),
            event: AssocEvent::Join,
            gateway: g as u16,
            reason: reason.into(),
        });
    }

    fn deassociate(&mut self, s: usize, reason: &str) {
        let Some(g) = self.stas[s].gateway else { return };
        let mac = self.stas[s].mac;
        let gw = &mut self.gws[g];
        gw.stations.remove(&s);
        gw.aids.remove(&s);
        gw.acc.forget_station(mac);
        gw.profiles.remove(&Node::Station(mac));
        gw.credits.retain(|k, _| k.1 != s);
        gw.tcp_sent.retain(|k, _| k.1 != s);
        gw.downlink.remove(&s);
        gw.elastic.remove(&Node::Station(mac));
        gw.plan.retain(|st| st.key.1 != s);
        let st = &mut self.stas[s];
        st.gateway = None;
        st.left_at = Some(self.now);
        self.log.assoc.push(AssocRow {
            time: self.now,
            station: s,
            mac: mac.to_string(),
            event: AssocEvent::Leave,
            gateway: g as u16,
            reason: reason.into(),
        });
        self.push(self.now + self.cfg.reassoc_delay, EventKind::Reassociate { s });
        let since = self.now;
        self.push(self.now + self.cfg.reassoc_delay + ORPHAN_GRACE, EventKind::OrphanCheck { s, since });
    }

    fn reassociate(&mut self, s: usize) {
        if self.stas[s].gateway.is_some() {
            return;
        }
        if let Some(g) = self.best_gateway(s, |gw| gw.authorized.contains(&s)) {
            self.associate(s, g, "handover");
        } else if let Some(g) = self.best_gateway(s, |_| true) {
            self.associate(s, g, "scan");
        } else {
            self.push(self.now + SCAN_RETRY, EventKind::Reassociate { s });
        }
    }

    // ---- monitoring cycles ----

    fn per(&self, link: &LinkState, payload: f64) -> f64 {
        packet_error_rate(link.snr, link.current_rate, frame_bits(payload, self.cfg))
    }

    fn start_cycle(&mut self, g: usize) {
        let cfg = self.cfg;
        let now = self.now;
        let demands = demands_at(&self.flows, self.stas.len(), now);
        let stations: Vec<usize> = self.gws[g].stations.iter().copied().collect();

        let mut contenders: Vec<Contender> = Vec::new();
        let mut owners: Vec<Option<usize>> = Vec::new();
        let mut ack_down: Vec<(usize, f64)> = Vec::new();
        let mut gw_in = (0.0, 0.0);
        let mut gw_greedy: Vec<usize> = Vec::new();
        let mut gw_el_payload = 0.0f64;
        let mut dest: Vec<usize> = Vec::new();

        for &s in &stations {
            let d: StationDemand = demands[s];
            let st = &self.stas[s];
            let (elastic, el_payload) = if d.up_greedy {
                (f64::INFINITY, d.up_elastic_payload)
            } else if d.down_greedy {
                let (bits, payload) = self.gws[g].tcp_sent.get(&(true, s)).copied().unwrap_or((0.0, 0.0));
                let acks = if payload > 0.0 { bits / (SEGMENTS_PER_ACK * payload) * TCP_ACK_BITS } else { 0.0 };
                (acks, TCP_ACK_BITS)
            } else {
                (0.0, 0.0)
            };
            if d.up_inelastic > 0.0 || elastic > 0.0 {
                let payload = if d.up_inelastic > 0.0 { d.up_inelastic_payload } else { el_payload };
                contenders.push(Contender {
                    node: Node::Station(st.mac),
                    inelastic: d.up_inelastic,
                    elastic,
                    inelastic_payload: d.up_inelastic_payload,
                    elastic_payload: el_payload,
                    rate: st.up.current_rate.bps(),
                    per: self.per(&st.up, payload),
                });
                owners.push(Some(s));
            }
            if d.down_inelastic > 0.0 {
                gw_in.0 += d.down_inelastic;
                gw_in.1 += d.down_inelastic * d.down_inelastic_payload;
            }
            if d.down_greedy {
                gw_greedy.push(s);
                gw_el_payload = gw_el_payload.max(d.down_elastic_payload);
            } else if d.up_greedy {
                let (bits, payload) = self.gws[g].tcp_sent.get(&(false, s)).copied().unwrap_or((0.0, 0.0));
                if payload > 0.0 {
                    ack_down.push((s, bits / (SEGMENTS_PER_ACK * payload) * TCP_ACK_BITS));
                }
            }
            if d.down_inelastic > 0.0 || d.down_greedy || ack_down.last().is_some_and(|a| a.0 == s) {
                dest.push(s);
            }
        }
        let ack_total: f64 = ack_down.iter().map(|a| a.1).sum();
        let gw_elastic = if !gw_greedy.is_empty() { f64::INFINITY } else { ack_total };
        if gw_in.0 > 0.0 || gw_elastic > 0.0 {
            // equal-share harmonic mean keeps airtime consistent across destinations
            let inv: f64 =
                dest.iter().map(|&s| 1.0 / self.stas[s].down.current_rate.bps()).sum::<f64>() / dest.len() as f64;
            let in_payload = if gw_in.0 > 0.0 { gw_in.1 / gw_in.0 } else { 0.0 };
            let el_payload = if gw_greedy.is_empty() { TCP_ACK_BITS } else { gw_el_payload };
            let per_payload = if in_payload > 0.0 { in_payload } else { el_payload };
            let per = dest.iter().map(|&s| self.per(&self.stas[s].down, per_payload)).sum::<f64>() / dest.len() as f64;
            contenders.push(Contender {
                node: Node::Gateway,
                inelastic: gw_in.0,
                elastic: gw_elastic,
                inelastic_payload: in_payload,
                elastic_payload: el_payload,
                rate: 1.0 / inv,
                per,
            });
            owners.push(None);
        }

        let grants: Vec<Grant> = if contenders.is_empty() {
            Vec::new()
        } else {
            match allocate(&contenders, &cfg.mac, cfg.t_max) {
                Ok(a) => a.grants,
                Err(_) => contenders.iter().map(|_| Grant::default()).collect(),
            }
        };

        let damping = cfg.elastic_damping;
        let gw = &mut self.gws[g];
        let mut plan = Vec::new();
        for ((c, owner), grant) in contenders.iter().zip(&owners).zip(&grants) {
            let greedy = c.elastic.is_infinite();
            let elastic = if greedy {
                let prev = gw.elastic.get(&c.node).copied().unwrap_or(0.0);
                let e = if grant.elastic > prev { prev + damping * (grant.elastic - prev) } else { grant.elastic };
                gw.elastic.insert(c.node, e);
                e
            } else {
                grant.elastic
            };
            match owner {
                Some(s) => {
                    let d = &demands[*s];
                    if grant.inelastic > 0.0 {
                        plan.push(Stream {
                            key: (false, *s, Kind::Inelastic),
                            payload_bits: d.up_inelastic_payload,
                            rate: grant.inelastic,
                        });
                    }
                    if elastic > 0.0 {
                        let kind = if greedy { Kind::Elastic } else { Kind::Ack };
                        plan.push(Stream { key: (false, *s, kind), payload_bits: c.elastic_payload, rate: elastic });
                    }
                }
                None => {
                    let share = if gw_in.0 > 0.0 { (grant.inelastic / gw_in.0).min(1.0) } else { 0.0 };
                    for &s in &stations {
                        let d = &demands[s];
                        if d.down_inelastic > 0.0 && share > 0.0 {
                            plan.push(Stream {
                                key: (true, s, Kind::Inelastic),
                                payload_bits: d.down_inelastic_payload,
                                rate: d.down_inelastic * share,
                            });
                        }
                    }
                    if elastic > 0.0 {
                        if greedy {
                            let each = elastic / gw_greedy.len() as f64;
                            for &s in &gw_greedy {
                                plan.push(Stream {
                                    key: (true, s, Kind::Elastic),
                                    payload_bits: demands[s].down_elastic_payload,
                                    rate: each,
                                });
                            }
                        } else if ack_total > 0.0 {
                            for &(s, a) in &ack_down {
                                plan.push(Stream {
                                    key: (true, s, Kind::Ack),
                                    payload_bits: TCP_ACK_BITS,
                                    rate: elastic * a / ack_total,
                                });
                            }
                        }
                    }
                }
            }
        }
        for st in &plan {
            let sta = &mut self.stas[st.key.1];
            gw.credits.entry(st.key).or_insert_with(|| sta.phase_rng.random());
        }

        // The monitor closes the cycle once every required station has sent
        // an inelastic frame and every pending downlink destination got one.
        let mut required: BTreeSet<usize> =
            gw.acc.expected().iter().filter_map(|m| self.mac_index.get(m).copied()).collect();
        required.extend(plan.iter().filter(|st| !st.key.0).map(|st| st.key.1));
        let first_frame = |key: StreamKey| -> f64 {
            match plan.iter().find(|st| st.key == key) {
                Some(st) if st.rate > 0.0 => (1.0 - gw.credits[&key]).max(0.0) * st.payload_bits / st.rate,
                _ => f64::INFINITY,
            }
        };
        let mut c: f64 = 0.0;
        let mut any = false;
        for &s in &required {
            any = true;
            c = c.max(first_frame((false, s, Kind::Inelastic)));
        }
        let mut pending = Vec::new();
        for st in plan.iter().filter(|st| st.key.0 && st.key.2 == Kind::Inelastic) {
            pending.push(self.stas[st.key.1].mac);
            any = true;
            c = c.max(first_frame(st.key));
        }
        for m in pending {
            gw.acc.add_pending_downlink(m);
        }
        let c = if any { c.min(cfg.t_max).max(MIN_CYCLE) } else { cfg.t_max };
        gw.plan = plan;
        let epoch = gw.epoch;
        self.push(now + c, EventKind::CycleEnd { g, epoch });
    }

    fn end_cycle(&mut self, g: usize) -> Result<(), SimError> {
        let cfg = self.cfg;
        let now = self.now;
        let start = self.gws[g].acc.cycle_start;
        let c = now - start;
        let sec = (start.max(0.0) as usize).min(self.log.station_bits.first().map_or(0, |b| b.len().saturating_sub(1)));
        let plan = std::mem::take(&mut self.gws[g].plan);
        let mut delivered = [0.0f64; 2];
        let mut down_bits: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
        let mut tcp_sent = BTreeMap::new();
        for stream in &plan {
            let (down, s, kind) = stream.key;
            if self.stas[s].gateway != Some(g) {
                continue;
            }
            let gw = &mut self.gws[g];
            let credit = gw.credits.get(&stream.key).copied().unwrap_or(0.0) + stream.rate * c / stream.payload_bits;
            let frames = (credit + 1e-9).floor().max(0.0);
            gw.credits.insert(stream.key, (credit - frames).max(0.0));
            if kind == Kind::Elastic {
                tcp_sent.insert((down, s), (stream.rate, stream.payload_bits));
            }
            if frames < 1.0 {
                continue;
            }
            let bits = frame_bits(stream.payload_bits, cfg);
            let st = &mut self.stas[s];
            let mac = st.mac;
            let link = if down { &mut st.down } else { &mut st.up };
            let out = transmit(link, frames as u64, bits, &PhyRate::ALL, &mut st.link_rng);
            let snr = link.snr;
            let node = if down { Node::Gateway } else { Node::Station(mac) };
            for &(rate, ok, fail) in &out.segments {
                let meta = FrameMeta {
                    node,
                    dest: down.then_some(mac),
                    class: kind.class(),
                    payload_bits: stream.payload_bits,
                    rate: rate.bps(),
                    success: true,
                    per: packet_error_rate(snr, rate, bits),
                    time: now,
                };
                self.gws[g].acc.observe_batch(&meta, ok, fail);
            }
            if kind != Kind::Ack {
                let b = out.delivered as f64 * stream.payload_bits;
                let slot = usize::from(kind != Kind::Inelastic);
                delivered[slot] += b;
                self.log.station_bits[s][sec][slot] += b;
                if down {
                    down_bits.entry(s).or_default()[slot] += b;
                }
            }
        }

        let gw = &mut self.gws[g];
        gw.tcp_sent = tcp_sent;
        let mut active: Vec<Node> = vec![Node::Gateway];
        active.extend(gw.stations.iter().map(|&s| Node::Station(self.stas[s].mac)));
        active.retain(|n| gw.acc.is_active(*n));
        let stats = close_cycle(&mut gw.acc, now, &mut gw.profiles, &mut gw.filter, cfg.ewma_alpha)?;
        let active_profiles: ProfileMap =
            active.iter().filter_map(|n| gw.profiles.get(n).map(|p| (*n, p.clone()))).collect();
        let sat = if stats.n_active > 0 { Some(saturation_throughput(&stats, &cfg.mac)?) } else { None };
        let report = assess_status(&stats, &active_profiles, sat.as_ref(), &cfg.thresholds);
        for &s in &gw.stations {
            let b = down_bits.get(&s).copied().unwrap_or([0.0; 2]);
            let d = gw.downlink.entry(s).or_default();
            d.inelastic = ewma(d.inelastic, b[0] / c, cfg.ewma_alpha);
            d.elastic = ewma(d.elastic, b[1] / c, cfg.ewma_alpha);
        }
        let entries: Vec<StationEntry> = gw
            .stations
            .iter()
            .map(|&s| {
                let mac = self.stas[s].mac;
                let aid = gw.aids[&s];
                StationEntry {
                    mac,
                    aid,
                    aid_hash: aid_hash(aid, &cfg.mac),
                    uplink: gw.profiles.get(&Node::Station(mac)).cloned().unwrap_or_default(),
                    downlink: gw.downlink.get(&s).copied().unwrap_or_default(),
                }
            })
            .collect();
        let view = BssView {
            stats: gw.filter.initialized.then(|| stats.clone()),
            active: active_profiles,
            report: Some(report),
            stations: entries,
            channel: gw.channel,
        };
        self.log.cycles.push(CycleRow {
            time: now,
            gateway: g as u16,
            duration: c,
            n_active: stats.n_active,
            avg_payload: stats.avg_payload,
            avg_rate: stats.avg_rate,
            per: stats.filtered_per,
            saturation: report.saturation,
            available: report.available,
            ratio: report.ratio(),
            status: report.status,
            confirmed: gw.confirmed.update(now, report.status, &cfg.protocol),
            stations: gw.stations.len(),
            inelastic: delivered[0] / c,
            elastic: delivered[1] / c,
        });
        let epoch = gw.epoch;
        let actions = gw.agent.on_cycle(now, view);
        self.execute(g, actions);
        let gw = &self.gws[g];
        if gw.agent.is_on() && gw.epoch == epoch {
            self.start_cycle(g);
        }
        Ok(())
    }

    // ---- protocol actions ----

    fn execute(&mut self, g: usize, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { to, msg } => self.send(g, to, msg),
                Action::SetTimer { at, timer } => self.push(at, EventKind::Timer { g, timer }),
                Action::OpenProbeWindow { channel, until } => self.gws[g].probe_window = Some((channel, until)),
                Action::RunProbes { probes } => {
                    let channel = self.gws[g].channel;
                    for h in 0..self.gws.len() {
                        let open =
                            self.gws[h].probe_window.is_some_and(|(ch, until)| ch == channel && self.now <= until);
                        if h == g || !self.gws[h].agent.is_on() || !open {
                            continue;
                        }
                        for p in &probes {
                            let Some(&s) = self.mac_index.get(&p.mac) else { continue };
                            if self.stas[s].gateway != Some(g) || !self.layout.visible(s, h) {
                                continue;
                            }
                            let snr = self.layout.snr[s][h];
                            let bits = frame_bits(super::topology::REFERENCE_FRAME_BITS, self.cfg);
                            let obs = ProbeObservation {
                                aid_hash: p.aid_hash,
                                slot: p.slot,
                                snr,
                                rate: best_rate(snr, &PhyRate::ALL, bits, self.cfg.max_per),
                            };
                            self.gws[h].agent.on_probe(obs);
                        }
                    }
                }
                Action::TurnOff => {
                    let stations: Vec<usize> = self.gws[g].stations.iter().copied().collect();
                    let macs: Vec<MacAddr> = stations.iter().map(|&s| self.stas[s].mac).collect();
                    if let Some(c) = self.checker.as_mut() {
                        c.on_turn_off(self.now, GatewayId(g as u16), &macs);
                    }
                    for s in stations {
                        self.deassociate(s, "switch-off");
                    }
                    let gw = &mut self.gws[g];
                    gw.epoch += 1;
                    gw.authorized.clear();
                    gw.probe_window = None;
                    gw.reset_bss(self.now);
                    self.log.gateways.push(GatewayRow { time: self.now, gateway: g as u16, on: false, stations: 0 });
                }
                Action::TurnOn => {
                    let gw = &mut self.gws[g];
                    gw.epoch += 1;
                    gw.reset_bss(self.now);
                    let stations = gw.stations.len();
                    self.log.gateways.push(GatewayRow { time: self.now, gateway: g as u16, on: true, stations });
                    self.start_cycle(g);
                }
                Action::Authorize(macs) => {
                    for m in macs {
                        if let Some(&s) = self.mac_index.get(&m) {
                            self.gws[g].authorized.insert(s);
                        }
                    }
                }
                Action::Release(macs) => {
                    for m in macs {
                        if let Some(&s) = self.mac_index.get(&m) {
                            if self.stas[s].gateway == Some(g) {
                                self.deassociate(s, "release");
                            }
                        }
                    }
                }
            }
        }
    }

    fn send(&mut self, from: usize, to: Destination, msg: ProtocolMessage) {
        let sender = &self.gws[from].agent;
        let status = sender.view().report.map(|r| r.status);
        if let Some(c) = self.checker.as_mut() {
            c.on_send(self.now, GatewayId(from as u16), sender.is_on(), status, &msg);
        }
        let targets: Vec<usize> = match to {
            Destination::Multicast => (0..self.gws.len()).filter(|&h| h != from).collect(),
            Destination::Unicast(h) => vec![h.0 as usize],
        };
        let loss = self.cfg.protocol.bus_loss;
        let at = self.now + self.cfg.protocol.bus_latency;
        let (mut delivered, mut lost) = (0, 0);
        for h in targets {
            if loss > 0.0 && self.bus_rng.random::<f64>() < loss {
                lost += 1;
                continue;
            }
            delivered += 1;
            self.push(at, EventKind::Deliver { to: h, msg: msg.clone() });
        }
        self.log.messages.push(MessageRow {
            time: self.now,
            from: from as u16,
            to: match to {
                Destination::Multicast => "*".into(),
                Destination::Unicast(h) => h.0.to_string(),
            },
            kind: msg.kind().into(),
            procedure: msg.header().procedure.to_string(),
            delivered,
            lost,
            detail: msg.summary(),
        });
    }
}
