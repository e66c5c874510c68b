use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::messages::{Combo, Header, ProcedureId, ProtocolMessage, StationEntry};
use super::probe::{Probe, ProbeObservation};
use super::selection::{heavy_ws_order, select_allocation, Allocation};
use super::ProtocolConfig;
use crate::assessment::{
    admission_decision, b_metric, merge_candidates, AdmissionMode, CandidateStation, Status, StatusReport, Thresholds,
};
use crate::ids::{GatewayId, MacAddr};
use crate::mac::{CycleStats, MacParams};
use crate::monitor::ProfileMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    Multicast,
    Unicast(GatewayId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Timer {
    ProbeStart(ProcedureId, u8),
    ProbeWindowEnd(ProcedureId, u8),
    ResponseDeadline(ProcedureId, u8),
    AllocationDeadline(ProcedureId),
}

/// Side effects requested by an agent.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send {
        to: Destination,
        msg: ProtocolMessage,
    },
    SetTimer {
        at: f64,
        timer: Timer,
    },
    /// Tune the second radio to `channel` until `until`.
    OpenProbeWindow {
        channel: u8,
        until: f64,
    },
    RunProbes {
        probes: Vec<Probe>,
    },
    TurnOff,
    TurnOn,
    /// Add stations to the authorized list.
    Authorize(Vec<MacAddr>),
    /// Deauthenticate stations so that they reassociate elsewhere.
    Release(Vec<MacAddr>),
}

/// What a gateway knows about its own BSS after the last closed cycle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BssView {
    pub stats: Option<CycleStats>,
    /// Profiles of the nodes active in the last cycle.
    pub active: ProfileMap,
    pub report: Option<StatusReport>,
    /// Currently associated stations.
    pub stations: Vec<StationEntry>,
    pub channel: u8,
}

impl BssView {
    fn ratio(&self) -> f64 {
        self.report.map_or(1.0, |r| r.ratio())
    }

    fn status(&self) -> Status {
        self.report.map_or(Status::Light, |r| r.status)
    }
}

#[derive(Debug, Clone)]
pub struct AgentParams {
    pub protocol: ProtocolConfig,
    pub thresholds: Thresholds,
    pub mac: MacParams,
    pub t_max: f64,
}

#[derive(Debug, Clone)]
enum Phase {
    Collecting(Vec<(GatewayId, Vec<Combo>)>),
    Allocating { allocation: Allocation, awaiting: BTreeSet<GatewayId> },
}

#[derive(Debug, Clone)]
struct Requester {
    id: ProcedureId,
    started_at: f64,
    status: Status,
    round: u8,
    advertised: f64,
    stations: Vec<StationEntry>,
    phase: Phase,
}

#[derive(Debug, Clone)]
struct Responder {
    id: ProcedureId,
    origin: GatewayId,
    round: u8,
    status: Status,
    stations: Vec<StationEntry>,
    observations: Vec<ProbeObservation>,
    window_open: bool,
    rates: BTreeMap<MacAddr, f64>,
}

#[derive(Debug, Clone, Copy)]
struct Dwell {
    status: Option<Status>,
    since: f64,
    cycles: u32,
}

/// Offload state machine of one gateway.
#[derive(Debug, Clone)]
pub struct GatewayAgent {
    pub id: GatewayId,
    params: AgentParams,
    rng: ChaCha8Rng,
    on: bool,
    view: BssView,
    dwell: Dwell,
    seq: u32,
    foreign: Option<(ProcedureId, f64, f64)>,
    requester: Option<Requester>,
    responder: Option<Responder>,
    deferred: bool,
    not_before: f64,
    failures: u32,
    heavy_failed: BTreeSet<MacAddr>,
    woken_for: Option<ProcedureId>,
    pending_auth: BTreeMap<MacAddr, f64>,
}

fn priority(started_at: f64, id: ProcedureId) -> (u64, ProcedureId) {
    (started_at.to_bits(), id)
}

impl GatewayAgent {
    pub fn new(id: GatewayId, params: AgentParams, rng: ChaCha8Rng, on: bool) -> Self {
        Self {
            id,
            params,
            rng,
            on,
            view: BssView::default(),
            dwell: Dwell { status: None, since: 0.0, cycles: 0 },
            seq: 0,
            foreign: None,
            requester: None,
            responder: None,
            deferred: false,
            not_before: 0.0,
            failures: 0,
            heavy_failed: BTreeSet::new(),
            woken_for: None,
            pending_auth: BTreeMap::new(),
        }
    }

    pub fn is_on(&self) -> bool {
        self.on
    }

    pub fn is_requesting(&self) -> bool {
        self.requester.is_some()
    }

    pub fn view(&self) -> &BssView {
        &self.view
    }

    /// Stations this gateway agreed to take that have not associated yet.
    pub fn pending_authorizations(&self) -> impl Iterator<Item = &MacAddr> {
        self.pending_auth.keys()
    }

    fn proto(&self) -> &ProtocolConfig {
        &self.params.protocol
    }

    fn reset_dwell(&mut self, now: f64) {
        self.dwell = Dwell { status: self.dwell.status, since: now, cycles: 0 };
    }

    /// Feeds the outcome of a closed cycle. May start a procedure.
    pub fn on_cycle(&mut self, now: f64, view: BssView) -> Vec<Action> {
        let mut out = Vec::new();
        if !self.on {
            return out;
        }
        self.view = view;
        let status = self.view.status();
        if self.dwell.status == Some(status) {
            self.dwell.cycles += 1;
        } else {
            self.dwell = Dwell { status: Some(status), since: now, cycles: 1 };
            self.failures = 0;
            self.heavy_failed.clear();
        }
        let present: BTreeSet<MacAddr> = self.view.stations.iter().map(|s| s.mac).collect();
        self.pending_auth.retain(|m, deadline| !present.contains(m) && *deadline > now);
        self.expire_foreign(now);
        self.maybe_start(now, &mut out);
        out
    }

    fn expire_foreign(&mut self, now: f64) {
        if let Some((_, _, seen)) = self.foreign {
            if now - seen > self.proto().procedure_timeout {
                self.foreign = None;
                self.responder = None;
                self.end_deferral(now);
            }
        }
    }

    fn dwell_satisfied(&self, now: f64, status: Status) -> bool {
        let p = self.proto();
        let (cycles, secs) = match status {
            Status::Light => (p.dwell_light_cycles, p.dwell_light_secs),
            Status::Heavy => (p.dwell_heavy_cycles, p.dwell_heavy_secs),
            Status::Regular => return false,
        };
        self.dwell.status == Some(status) && self.dwell.cycles >= cycles && now - self.dwell.since >= secs
    }

    fn maybe_start(&mut self, now: f64, out: &mut Vec<Action>) {
        if !self.proto().enabled || self.requester.is_some() || self.woken_for.is_some() {
            return;
        }
        let status = self.view.status();
        if !self.dwell_satisfied(now, status) || !self.pending_auth.is_empty() {
            return;
        }
        if self.foreign.is_some() {
            self.deferred = true;
            return;
        }
        if self.deferred || now < self.not_before {
            return;
        }
        let stations = match status {
            Status::Light => self.view.stations.clone(),
            Status::Heavy => {
                let order = heavy_ws_order(&self.view.stations);
                match order.into_iter().find(|m| !self.heavy_failed.contains(m)) {
                    Some(top) => self.view.stations.iter().filter(|s| s.mac == top).cloned().collect(),
                    None => {
                        self.heavy_failed.clear();
                        self.fail_backoff(now);
                        return;
                    }
                }
            }
            Status::Regular => return,
        };
        self.seq += 1;
        let id = ProcedureId { gateway: self.id, seq: self.seq };
        let header = Header { origin: self.id, procedure: id };
        if stations.is_empty() {
            out.push(Action::Send {
                to: Destination::Multicast,
                msg: ProtocolMessage::HandoverCommand { header, assignments: Vec::new() },
            });
            self.turn_off(out);
            return;
        }
        let req = Requester {
            id,
            started_at: now,
            status,
            round: 1,
            advertised: self.view.ratio(),
            stations,
            phase: Phase::Collecting(Vec::new()),
        };
        self.send_request(now, &req, false, out);
        self.requester = Some(req);
    }

    fn send_request(&self, now: f64, req: &Requester, flagged: bool, out: &mut Vec<Action>) {
        out.push(Action::Send {
            to: Destination::Multicast,
            msg: ProtocolMessage::OffloadRequest {
                header: Header { origin: self.id, procedure: req.id },
                started_at: req.started_at,
                status: req.status,
                channel: self.view.channel,
                advertised: req.advertised,
                stations: req.stations.clone(),
                flagged,
                round: req.round,
            },
        });
        let p = self.proto();
        out.push(Action::SetTimer {
            at: now + p.bus_latency + p.probe_delay,
            timer: Timer::ProbeStart(req.id, req.round),
        });
        out.push(Action::SetTimer { at: now + p.tau_r, timer: Timer::ResponseDeadline(req.id, req.round) });
    }

    fn turn_off(&mut self, out: &mut Vec<Action>) {
        out.push(Action::TurnOff);
        self.on = false;
        self.requester = None;
        self.responder = None;
        self.foreign = None;
        self.deferred = false;
        self.woken_for = None;
        self.pending_auth.clear();
        self.view = BssView { channel: self.view.channel, ..BssView::default() };
        self.dwell = Dwell { status: None, since: 0.0, cycles: 0 };
    }

    fn fail_backoff(&mut self, now: f64) {
        self.failures += 1;
        let p = self.proto();
        let delay = (p.retry_base * 2f64.powi(self.failures as i32 - 1)).min(p.retry_cap);
        self.not_before = self.not_before.max(now + delay);
    }

    fn end_deferral(&mut self, now: f64) {
        if self.deferred {
            self.deferred = false;
            let (lo, hi) = self.proto().defer_backoff;
            let wait = if hi > lo { self.rng.random_range(lo..hi) } else { lo };
            self.not_before = self.not_before.max(now + wait);
        }
    }

    fn finish(&mut self, now: f64, success: bool, out: &mut Vec<Action>) {
        let Some(req) = self.requester.take() else { return };
        let header = Header { origin: self.id, procedure: req.id };
        self.reset_dwell(now);
        if !success {
            out.push(Action::Send { to: Destination::Multicast, msg: ProtocolMessage::Abort { header } });
            if req.status == Status::Heavy {
                self.heavy_failed.extend(req.stations.iter().map(|s| s.mac));
            }
            self.fail_backoff(now);
            return;
        }
        let Phase::Allocating { allocation, .. } = req.phase else { unreachable!("success implies allocation") };
        let assignments = allocation.assignments();
        out.push(Action::Send {
            to: Destination::Multicast,
            msg: ProtocolMessage::HandoverCommand { header, assignments: assignments.clone() },
        });
        self.failures = 0;
        match req.status {
            Status::Light => self.turn_off(out),
            _ => out.push(Action::Release(assignments.iter().map(|(m, _)| *m).collect())),
        }
    }

    pub fn on_message(&mut self, now: f64, msg: &ProtocolMessage) -> Vec<Action> {
        let mut out = Vec::new();
        let header = *msg.header();
        if header.origin == self.id {
            return out;
        }
        match msg {
            ProtocolMessage::OffloadRequest { .. } => self.handle_request(now, msg, &mut out),
            ProtocolMessage::OffloadResponse { round, combos, .. } => {
                if let Some(req) = self.requester.as_mut() {
                    if req.id == header.procedure && req.round == *round {
                        if let Phase::Collecting(responses) = &mut req.phase {
                            responses.retain(|(g, _)| *g != header.origin);
                            responses.push((header.origin, combos.clone()));
                        }
                    }
                }
            }
            ProtocolMessage::AllocationRequest { stations, advertised, .. } => {
                let accept = self.evaluate_allocation(header.procedure, stations, *advertised);
                if let Some(accept) = accept {
                    out.push(Action::Send {
                        to: Destination::Unicast(header.origin),
                        msg: ProtocolMessage::AllocationResponse {
                            header: Header { origin: self.id, procedure: header.procedure },
                            accept,
                        },
                    });
                }
            }
            ProtocolMessage::AllocationResponse { accept, .. } => {
                let mut done = None;
                if let Some(req) = self.requester.as_mut() {
                    if req.id == header.procedure {
                        if let Phase::Allocating { awaiting, .. } = &mut req.phase {
                            if !accept {
                                done = Some(false);
                            } else if awaiting.remove(&header.origin) && awaiting.is_empty() {
                                done = Some(true);
                            }
                        }
                    }
                }
                if let Some(success) = done {
                    self.finish(now, success, &mut out);
                }
            }
            ProtocolMessage::HandoverCommand { assignments, .. } => {
                let mine: Vec<MacAddr> = assignments.iter().filter(|(_, g)| *g == self.id).map(|(m, _)| *m).collect();
                if !self.on {
                    return out;
                }
                if !mine.is_empty() {
                    let deadline = now + self.proto().authorization_timeout;
                    for m in &mine {
                        self.pending_auth.insert(*m, deadline);
                    }
                    out.push(Action::Authorize(mine.clone()));
                    self.reset_dwell(now);
                }
                self.procedure_ended(now, header.procedure, !mine.is_empty(), &mut out);
            }
            ProtocolMessage::Abort { .. } => {
                if self.on {
                    self.procedure_ended(now, header.procedure, false, &mut out);
                }
            }
        }
        out
    }

    fn procedure_ended(&mut self, now: f64, id: ProcedureId, selected: bool, out: &mut Vec<Action>) {
        if self.foreign.map(|f| f.0) == Some(id) {
            self.foreign = None;
            self.responder = None;
            self.end_deferral(now);
        }
        if self.woken_for == Some(id) {
            self.woken_for = None;
            if !selected && self.view.stations.is_empty() && self.pending_auth.is_empty() {
                self.turn_off(out);
            }
        }
    }

    fn handle_request(&mut self, now: f64, msg: &ProtocolMessage, out: &mut Vec<Action>) {
        let ProtocolMessage::OffloadRequest {
            header,
            started_at,
            status,
            channel,
            advertised,
            stations,
            flagged,
            round,
        } = msg
        else {
            return;
        };
        let id = header.procedure;
        if !self.on {
            if *flagged && self.proto().enabled && self.rng.random::<f64>() < self.proto().p_wake {
                self.on = true;
                self.woken_for = Some(id);
                self.dwell = Dwell { status: None, since: now, cycles: 0 };
                out.push(Action::TurnOn);
            } else {
                return;
            }
        }
        let incoming = priority(*started_at, id);
        if let Some(req) = &self.requester {
            if priority(req.started_at, req.id) < incoming {
                return;
            }
            let own = Header { origin: self.id, procedure: req.id };
            out.push(Action::Send { to: Destination::Multicast, msg: ProtocolMessage::Abort { header: own } });
            self.requester = None;
            self.deferred = true;
            self.reset_dwell(now);
        }
        match self.foreign {
            Some((fid, fstart, _)) if fid != id && priority(fstart, fid) < incoming => return,
            _ => {}
        }
        self.foreign = Some((id, *started_at, now));

        let eligible =
            self.view.status() != Status::Heavy && (*status != Status::Light || self.view.ratio() <= *advertised);
        if !eligible {
            self.responder = None;
            return;
        }
        let p = self.proto();
        let until = now + p.tau_p;
        out.push(Action::OpenProbeWindow { channel: *channel, until });
        out.push(Action::SetTimer { at: until, timer: Timer::ProbeWindowEnd(id, *round) });
        self.responder = Some(Responder {
            id,
            origin: header.origin,
            round: *round,
            status: *status,
            stations: stations.clone(),
            observations: Vec::new(),
            window_open: true,
            rates: BTreeMap::new(),
        });
    }

    /// Records a CTS overheard while the probe window is open.
    pub fn on_probe(&mut self, obs: ProbeObservation) {
        if let Some(r) = self.responder.as_mut() {
            if r.window_open {
                r.observations.push(obs);
            }
        }
    }

    pub fn on_timer(&mut self, now: f64, timer: Timer) -> Vec<Action> {
        let mut out = Vec::new();
        if !self.on {
            return out;
        }
        match timer {
            Timer::ProbeStart(id, round) => {
                if let Some(req) = &self.requester {
                    if req.id == id && req.round == round {
                        let probes = req
                            .stations
                            .iter()
                            .enumerate()
                            .map(|(i, s)| Probe { mac: s.mac, aid_hash: s.aid_hash, slot: i as u32 })
                            .collect();
                        out.push(Action::RunProbes { probes });
                    }
                }
            }
            Timer::ProbeWindowEnd(id, round) => {
                let matches = self.responder.as_ref().is_some_and(|r| r.id == id && r.round == round && r.window_open);
                if matches && self.view.status() == Status::Heavy {
                    self.responder = None;
                } else if matches {
                    let combos = self.evaluate_combos();
                    let r = self.responder.as_mut().expect("checked");
                    r.window_open = false;
                    out.push(Action::Send {
                        to: Destination::Unicast(r.origin),
                        msg: ProtocolMessage::OffloadResponse {
                            header: Header { origin: self.id, procedure: id },
                            round,
                            combos,
                        },
                    });
                }
            }
            Timer::ResponseDeadline(id, round) => {
                let Some(req) = self.requester.as_mut() else { return out };
                if req.id != id || req.round != round {
                    return out;
                }
                let Phase::Collecting(responses) = &req.phase else { return out };
                let macs: Vec<MacAddr> = req.stations.iter().map(|s| s.mac).collect();
                match select_allocation(responses, &macs) {
                    Some(allocation) => {
                        let awaiting: BTreeSet<GatewayId> = allocation.per_gateway.keys().copied().collect();
                        for (gw, ms) in &allocation.per_gateway {
                            out.push(Action::Send {
                                to: Destination::Unicast(*gw),
                                msg: ProtocolMessage::AllocationRequest {
                                    header: Header { origin: self.id, procedure: id },
                                    stations: ms.clone(),
                                    advertised: req.advertised,
                                },
                            });
                        }
                        req.phase = Phase::Allocating { allocation, awaiting };
                        out.push(Action::SetTimer {
                            at: now + self.params.protocol.tau_r,
                            timer: Timer::AllocationDeadline(id),
                        });
                    }
                    None if req.status == Status::Heavy && req.round == 1 => {
                        req.round = 2;
                        req.phase = Phase::Collecting(Vec::new());
                        let req = req.clone();
                        self.send_request(now, &req, true, &mut out);
                    }
                    None => self.finish(now, false, &mut out),
                }
            }
            Timer::AllocationDeadline(id) => {
                let pending =
                    self.requester.as_ref().is_some_and(|r| r.id == id && matches!(r.phase, Phase::Allocating { .. }));
                if pending {
                    self.finish(now, false, &mut out);
                }
            }
        }
        out
    }

    fn base_stats(&self) -> CycleStats {
        self.view.stats.clone().unwrap_or(CycleStats {
            n_active: 0,
            cycle_duration: self.params.t_max,
            avg_payload: 0.0,
            max_payload: 0.0,
            avg_rate: 0.0,
            filtered_per: 0.0,
        })
    }

    fn candidate(entry: &StationEntry, rate: f64) -> CandidateStation {
        CandidateStation {
            mac: entry.mac,
            uplink: Some(crate::assessment::Demand {
                inelastic: entry.uplink.inelastic,
                elastic: entry.uplink.elastic,
            }),
            downlink: Some(entry.downlink),
            inelastic_payload: entry.uplink.inelastic_payload,
            elastic_payload: entry.uplink.elastic_payload,
            rate,
        }
    }

    /// b-metric of the BSS with `cands` admitted, and the resulting `S`.
    fn evaluate(&self, cands: &[CandidateStation]) -> Option<(f64, f64)> {
        let stats = self.base_stats();
        let merged = merge_candidates(&stats, &self.view.active, cands, &self.params.mac).ok()?;
        let m = b_metric(&merged.stats, &merged.profiles, &merged.sat);
        Some((m.b, merged.sat.aggregate))
    }

    fn evaluate_combos(&mut self) -> Vec<Combo> {
        let Some(r) = self.responder.as_ref() else { return Vec::new() };
        let mut heard: Vec<(usize, f64)> = Vec::new();
        for obs in &r.observations {
            let slot = obs.slot as usize;
            let Some(entry) = r.stations.get(slot) else { continue };
            if entry.aid_hash != obs.aid_hash {
                continue;
            }
            if let Some(rate) = obs.rate {
                if !heard.iter().any(|(i, _)| *i == slot) {
                    heard.push((slot, rate.bps()));
                }
            }
        }
        heard.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        heard.truncate(self.params.protocol.max_subset);
        heard.sort_by_key(|(i, _)| *i);

        let mode = if r.status == Status::Light { AdmissionMode::LightCombo } else { AdmissionMode::HeavySingle };
        let k = heard.len();
        let mut combos = Vec::new();
        for mask in 1u32..(1u32 << k) {
            if mode == AdmissionMode::HeavySingle && mask.count_ones() != 1 {
                continue;
            }
            let picked: Vec<(usize, f64)> = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| heard[i]).collect();
            let cands: Vec<CandidateStation> =
                picked.iter().map(|&(i, rate)| Self::candidate(&r.stations[i], rate)).collect();
            let Some((b, s)) = self.evaluate(&cands) else { continue };
            if admission_decision(b, s, mode, &self.params.thresholds) {
                combos.push(Combo {
                    stations: cands.iter().map(|c| c.mac).collect(),
                    rates: cands.iter().map(|c| c.rate).collect(),
                    b,
                    saturation: s,
                });
            }
        }
        let rates: BTreeMap<MacAddr, f64> = heard.iter().map(|&(i, rate)| (r.stations[i].mac, rate)).collect();
        if let Some(r) = self.responder.as_mut() {
            r.rates = rates;
        }
        combos
    }

    fn evaluate_allocation(&mut self, id: ProcedureId, stations: &[MacAddr], advertised: f64) -> Option<bool> {
        let r = self.responder.as_ref().filter(|r| r.id == id)?;
        if !self.on || self.view.status() == Status::Heavy {
            return Some(false);
        }
        let mut cands = Vec::new();
        for m in stations {
            let entry = r.stations.iter().find(|s| s.mac == *m);
            let rate = r.rates.get(m);
            match (entry, rate) {
                (Some(e), Some(&rate)) => cands.push(Self::candidate(e, rate)),
                _ => return Some(false),
            }
        }
        let status = r.status;
        let Some((b, s)) = self.evaluate(&cands) else { return Some(false) };
        Some(match status {
            Status::Light => b > 0.0 && s > 0.0 && b / s < advertised,
            _ => admission_decision(b, s, AdmissionMode::HeavySingle, &self.params.thresholds),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assessment::Demand;
    use crate::channel::PhyRate;
    use crate::monitor::{Node, NodeProfile};
    use crate::rng::substream;

    fn params() -> AgentParams {
        AgentParams {
            protocol: ProtocolConfig::default(),
            thresholds: Thresholds::default(),
            mac: MacParams::default(),
            t_max: 0.1,
        }
    }

    fn agent(id: u16) -> GatewayAgent {
        GatewayAgent::new(GatewayId(id), params(), substream(1, &format!("gw/{id}")), true)
    }

    fn station(i: u32) -> StationEntry {
        StationEntry {
            mac: MacAddr::local(1, i),
            aid: i as u16,
            aid_hash: i as u16,
            uplink: NodeProfile {
                inelastic: 1e6,
                elastic: 0.0,
                inelastic_payload: 12_000.0,
                elastic_payload: 0.0,
                rate: 54e6,
            },
            downlink: Demand::default(),
        }
    }

    fn light_view(n: u32) -> BssView {
        let stations: Vec<StationEntry> = (0..n).map(station).collect();
        let mut active = ProfileMap::new();
        for s in &stations {
            active.insert(Node::Station(s.mac), s.uplink.clone());
        }
        let stats = CycleStats {
            n_active: n,
            cycle_duration: 0.012,
            avg_payload: 12_000.0,
            max_payload: 12_000.0,
            avg_rate: 54e6,
            filtered_per: 0.0,
        };
        let report = StatusReport { status: Status::Light, available: 25e6, saturation: 30e6, n_stations: n - 1 };
        BssView { stats: Some(stats), active, report: Some(report), stations, channel: 1 }
    }

    fn drive_to_request(a: &mut GatewayAgent, view: &BssView) -> (f64, Vec<Action>) {
        let mut t = 0.0;
        for _ in 0..400 {
            t += 0.012;
            let acts = a.on_cycle(t, view.clone());
            if !acts.is_empty() {
                return (t, acts);
            }
        }
        panic!("no procedure started");
    }

    #[test]
    fn regular_gateway_stays_quiet() {
        let mut a = agent(0);
        let mut v = light_view(3);
        v.report.as_mut().unwrap().status = Status::Regular;
        for k in 1..500 {
            assert!(a.on_cycle(k as f64 * 0.012, v.clone()).is_empty());
        }
    }

    #[test]
    fn light_dwell_needs_cycles_and_seconds() {
        let mut a = agent(0);
        let (t, acts) = drive_to_request(&mut a, &light_view(3));
        assert!(t >= 3.0);
        let Action::Send { msg: ProtocolMessage::OffloadRequest { stations, flagged, .. }, .. } = &acts[0] else {
            panic!("expected request, got {acts:?}");
        };
        assert_eq!(stations.len(), 3);
        assert!(!flagged);
    }

    #[test]
    fn busy_federation_defers() {
        let mut a = agent(0);
        let mut b = agent(1);
        let (_, acts) = drive_to_request(&mut b, &light_view(2));
        let Action::Send { msg, .. } = &acts[0] else { panic!() };
        a.on_message(0.5, msg);
        let v = light_view(3);
        let mut t = 0.5;
        for _ in 0..400 {
            t += 0.012;
            assert!(a.on_cycle(t, v.clone()).iter().all(|x| !matches!(x, Action::Send { .. })));
        }
        assert!(a.deferred);
    }

    #[test]
    fn heavy_responder_discards() {
        let mut a = agent(0);
        let mut v = light_view(3);
        v.report.as_mut().unwrap().status = Status::Heavy;
        a.on_cycle(0.01, v);
        let mut b = agent(1);
        let (_, acts) = drive_to_request(&mut b, &light_view(2));
        let Action::Send { msg, .. } = &acts[0] else { panic!() };
        assert!(a.on_message(4.0, msg).is_empty());
    }

    #[test]
    fn less_loaded_responder_discards_light_request() {
        let mut a = agent(0);
        let mut v = light_view(1);
        v.report = Some(StatusReport { status: Status::Light, available: 0.9, saturation: 1.0, n_stations: 0 });
        a.on_cycle(0.01, v);
        let mut b = agent(1);
        let mut bv = light_view(2);
        bv.report = Some(StatusReport { status: Status::Light, available: 0.6, saturation: 1.0, n_stations: 1 });
        let (_, acts) = drive_to_request(&mut b, &bv);
        let Action::Send { msg, .. } = &acts[0] else { panic!() };
        assert!(a.on_message(4.0, msg).is_empty());
    }

    #[test]
    fn full_light_handover_round_trip() {
        let mut req = agent(0);
        let mut resp = agent(1);
        let mut rv = light_view(2);
        for s in rv.stations.iter_mut() {
            s.mac = MacAddr::local(2, s.aid as u32);
        }
        rv.active = rv.stations.iter().map(|s| (Node::Station(s.mac), s.uplink.clone())).collect();
        rv.report = Some(StatusReport { status: Status::Regular, available: 10e6, saturation: 30e6, n_stations: 1 });
        resp.on_cycle(0.01, rv);

        let mut qv = light_view(2);
        qv.report.as_mut().unwrap().available = 29e6;
        let (t0, acts) = drive_to_request(&mut req, &qv);
        let Action::Send { msg: request, .. } = &acts[0] else { panic!() };
        let t1 = t0 + 0.005;
        let acts = resp.on_message(t1, request);
        assert!(matches!(acts[0], Action::OpenProbeWindow { .. }));
        let probe_t = t0 + 0.006;
        let probes = req.on_timer(probe_t, Timer::ProbeStart(ProcedureId { gateway: GatewayId(0), seq: 1 }, 1));
        let Action::RunProbes { probes } = &probes[0] else { panic!() };
        for p in probes {
            resp.on_probe(ProbeObservation {
                aid_hash: p.aid_hash,
                slot: p.slot,
                snr: 30.0,
                rate: Some(PhyRate::Ofdm36),
            });
        }
        let id = ProcedureId { gateway: GatewayId(0), seq: 1 };
        let acts = resp.on_timer(t1 + 0.1, Timer::ProbeWindowEnd(id, 1));
        let Action::Send { msg: response, .. } = &acts[0] else { panic!() };
        let ProtocolMessage::OffloadResponse { combos, .. } = response else { panic!() };
        assert_eq!(combos.len(), 3);
        req.on_message(t1 + 0.105, response);
        let acts = req.on_timer(t0 + 0.3, Timer::ResponseDeadline(id, 1));
        let Action::Send { msg: alloc, .. } = &acts[0] else { panic!() };
        let acts = resp.on_message(t0 + 0.305, alloc);
        let Action::Send { msg: answer, .. } = &acts[0] else { panic!() };
        assert_eq!(
            *answer,
            ProtocolMessage::AllocationResponse {
                header: Header { origin: GatewayId(1), procedure: id },
                accept: true
            }
        );
        let acts = req.on_message(t0 + 0.31, answer);
        assert!(
            matches!(&acts[0], Action::Send { msg: ProtocolMessage::HandoverCommand { assignments, .. }, .. } if assignments.len() == 2)
        );
        assert_eq!(acts[1], Action::TurnOff);
        assert!(!req.is_on());
        let Action::Send { msg: cmd, .. } = &acts[0] else { panic!() };
        let acts = resp.on_message(t0 + 0.315, cmd);
        assert!(matches!(&acts[0], Action::Authorize(m) if m.len() == 2));
    }

    #[test]
    fn earlier_request_wins_a_race() {
        let mut a = agent(0);
        let mut b = agent(1);
        let (ta, acts_a) = drive_to_request(&mut a, &light_view(2));
        let (tb, acts_b) = drive_to_request(&mut b, &light_view(2));
        assert_eq!(ta, tb);
        let Action::Send { msg: ma, .. } = &acts_a[0] else { panic!() };
        let Action::Send { msg: mb, .. } = &acts_b[0] else { panic!() };
        // equal start times: the lower procedure id (gateway 0) has priority
        let from_a = b.on_message(ta + 0.005, ma);
        assert!(matches!(&from_a[0], Action::Send { msg: ProtocolMessage::Abort { .. }, .. }));
        assert!(!b.is_requesting());
        assert!(a.on_message(tb + 0.005, mb).is_empty());
        assert!(a.is_requesting());
    }

    #[test]
    fn off_gateway_ignores_unflagged_requests() {
        let mut off = GatewayAgent::new(GatewayId(5), params(), substream(1, "gw/5"), false);
        let mut b = agent(1);
        let (_, acts) = drive_to_request(&mut b, &light_view(2));
        let Action::Send { msg, .. } = &acts[0] else { panic!() };
        assert!(off.on_message(4.0, msg).is_empty());
        assert!(!off.is_on());
    }
}
