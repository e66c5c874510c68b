//! Federation-wide protocol invariants, checked on every message and
//! association change.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::assessment::{admission_decision, AdmissionMode, Status, Thresholds};
use crate::ids::{GatewayId, MacAddr};
use crate::protocol::{ProcedureId, ProtocolMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvariantKind {
    MutualExclusion,
    NoOrphan,
    OffOnlyAfterHandover,
    ResponderEligibility,
}

impl fmt::Display for InvariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvariantKind::MutualExclusion => "mutual-exclusion",
            InvariantKind::NoOrphan => "no-orphan",
            InvariantKind::OffOnlyAfterHandover => "off-only-after-handover",
            InvariantKind::ResponderEligibility => "responder-eligibility",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub time: f64,
    pub kind: InvariantKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={:.6} {}: {}", self.time, self.kind, self.detail)
    }
}

#[derive(Debug, Clone)]
struct Procedure {
    started_at: f64,
    status: Status,
    allocating: bool,
}

/// Observer of everything the gateways send and every station move.
#[derive(Debug, Clone)]
pub struct Checker {
    thresholds: Thresholds,
    /// Procedures whose requests were sent less than this apart cannot have
    /// heard each other yet.
    race_window: f64,
    /// Longest tolerated gap between leaving one gateway and joining the next.
    pub orphan_limit: f64,
    open: BTreeMap<ProcedureId, Procedure>,
    commands: BTreeMap<GatewayId, BTreeSet<MacAddr>>,
    pub violations: Vec<Violation>,
}

impl Checker {
    pub fn new(thresholds: Thresholds, bus_latency: f64, orphan_limit: f64) -> Self {
        Self {
            thresholds,
            race_window: bus_latency + 1e-9,
            orphan_limit,
            open: BTreeMap::new(),
            commands: BTreeMap::new(),
            violations: Vec::new(),
        }
    }

    fn flag(&mut self, time: f64, kind: InvariantKind, detail: String) {
        self.violations.push(Violation { time, kind, detail });
    }

    /// `sender_status` is the sender's latest assessed status.
    pub fn on_send(
        &mut self,
        now: f64,
        from: GatewayId,
        sender_on: bool,
        sender_status: Option<Status>,
        msg: &ProtocolMessage,
    ) {
        let id = msg.header().procedure;
        match msg {
            ProtocolMessage::OffloadRequest { started_at, status, round, .. } => {
                if *round == 1 && !self.open.contains_key(&id) {
                    let clash: Vec<String> = self
                        .open
                        .iter()
                        .filter(|(_, p)| now - p.started_at > self.race_window)
                        .map(|(other, _)| other.to_string())
                        .collect();
                    if !clash.is_empty() {
                        self.flag(
                            now,
                            InvariantKind::MutualExclusion,
                            format!("{id} started while {} in progress", clash.join(", ")),
                        );
                    }
                    self.open.insert(id, Procedure { started_at: *started_at, status: *status, allocating: false });
                }
            }
            ProtocolMessage::AllocationRequest { .. } => {
                let Some(me) = self.open.get(&id).cloned() else { return };
                let rivals: Vec<String> = self
                    .open
                    .iter()
                    .filter(|(other, p)| {
                        **other != id
                            && (p.allocating || (p.started_at.to_bits(), **other) < (me.started_at.to_bits(), id))
                    })
                    .map(|(other, _)| other.to_string())
                    .collect();
                if !rivals.is_empty() {
                    self.flag(
                        now,
                        InvariantKind::MutualExclusion,
                        format!("{id} allocating alongside {}", rivals.join(", ")),
                    );
                }
                if let Some(p) = self.open.get_mut(&id) {
                    p.allocating = true;
                }
            }
            ProtocolMessage::OffloadResponse { combos, .. } => {
                if !sender_on || sender_status == Some(Status::Heavy) {
                    self.flag(
                        now,
                        InvariantKind::ResponderEligibility,
                        format!("{from} answered {id} while off or Heavy"),
                    );
                }
                let mode = match self.open.get(&id).map(|p| p.status) {
                    Some(Status::Light) => AdmissionMode::LightCombo,
                    _ => AdmissionMode::HeavySingle,
                };
                for c in combos {
                    if c.stations.is_empty() || !admission_decision(c.b, c.saturation, mode, &self.thresholds) {
                        self.flag(
                            now,
                            InvariantKind::ResponderEligibility,
                            format!("{from} offered an inadmissible combo for {id} (b={}, S={})", c.b, c.saturation),
                        );
                    }
                    if mode == AdmissionMode::HeavySingle && c.stations.len() != 1 {
                        self.flag(
                            now,
                            InvariantKind::ResponderEligibility,
                            format!("{from} offered several stations to Heavy {id}"),
                        );
                    }
                }
            }
            ProtocolMessage::HandoverCommand { assignments, .. } => {
                self.open.remove(&id);
                self.commands.insert(from, assignments.iter().map(|(m, _)| *m).collect());
            }
            ProtocolMessage::Abort { .. } => {
                self.open.remove(&id);
            }
            ProtocolMessage::AllocationResponse { .. } => {}
        }
    }

    /// A gateway switches off while serving `stations`.
    pub fn on_turn_off(&mut self, now: f64, g: GatewayId, stations: &[MacAddr]) {
        let covered = self.commands.remove(&g).unwrap_or_default();
        let missing: Vec<String> = stations.iter().filter(|m| !covered.contains(m)).map(|m| m.to_string()).collect();
        if !missing.is_empty() {
            self.flag(
                now,
                InvariantKind::OffOnlyAfterHandover,
                format!("{g} switched off still serving {}", missing.join(" ")),
            );
        }
    }

    pub fn on_orphan(&mut self, now: f64, mac: MacAddr, since: f64) {
        self.flag(now, InvariantKind::NoOrphan, format!("{mac} unassociated since t={since:.6}"));
    }

    pub fn on_associate(&mut self, now: f64, mac: MacAddr, g: GatewayId, gateway_on: bool) {
        if !gateway_on {
            self.flag(now, InvariantKind::NoOrphan, format!("{mac} associated to switched-off {g}"));
        }
    }
}
