use std::fmt;

use serde::{Deserialize, Serialize};

use crate::assessment::{Demand, Status};
use crate::ids::{GatewayId, MacAddr};
use crate::monitor::NodeProfile;

/// Federation-wide identifier of one offload procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProcedureId {
    pub gateway: GatewayId,
    pub seq: u32,
}

impl fmt::Display for ProcedureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.gateway, self.seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub origin: GatewayId,
    pub procedure: ProcedureId,
}

/// A station listed in an offload request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationEntry {
    pub mac: MacAddr,
    pub aid: u16,
    pub aid_hash: u16,
    /// Measured uplink profile.
    pub uplink: NodeProfile,
    /// Downlink the station receives from its current gateway.
    pub downlink: Demand,
}

/// One station set a responder can take, with the b-metric it would leave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combo {
    pub stations: Vec<MacAddr>,
    /// Rate (bit/s) the responder would use towards each listed station.
    pub rates: Vec<f64>,
    pub b: f64,
    /// Saturation throughput of the responder with the combo admitted.
    pub saturation: f64,
}

impl Combo {
    pub fn avg_rate(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProtocolMessage {
    OffloadRequest {
        header: Header,
        /// Time the procedure started; orders concurrent requests.
        started_at: f64,
        status: Status,
        channel: u8,
        /// `B/S` of the requester.
        advertised: f64,
        stations: Vec<StationEntry>,
        flagged: bool,
        round: u8,
    },
    OffloadResponse {
        header: Header,
        round: u8,
        combos: Vec<Combo>,
    },
    AllocationRequest {
        header: Header,
        stations: Vec<MacAddr>,
        advertised: f64,
    },
    AllocationResponse {
        header: Header,
        accept: bool,
    },
    HandoverCommand {
        header: Header,
        assignments: Vec<(MacAddr, GatewayId)>,
    },
    Abort {
        header: Header,
    },
}

impl ProtocolMessage {
    pub fn header(&self) -> &Header {
        match self {
            ProtocolMessage::OffloadRequest { header, .. }
            | ProtocolMessage::OffloadResponse { header, .. }
            | ProtocolMessage::AllocationRequest { header, .. }
            | ProtocolMessage::AllocationResponse { header, .. }
            | ProtocolMessage::HandoverCommand { header, .. }
            | ProtocolMessage::Abort { header } => header,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::OffloadRequest { .. } => "OFFLOAD_REQUEST",
            ProtocolMessage::OffloadResponse { .. } => "OFFLOAD_RESPONSE",
            ProtocolMessage::AllocationRequest { .. } => "ALLOCATION_REQUEST",
            ProtocolMessage::AllocationResponse { .. } => "ALLOCATION_RESPONSE",
            ProtocolMessage::HandoverCommand { .. } => "HANDOVER_COMMAND",
            ProtocolMessage::Abort { .. } => "ABORT",
        }
    }

    /// Short human-readable payload description for transcripts.
    pub fn summary(&self) -> String {
        match self {
            ProtocolMessage::OffloadRequest { status, advertised, stations, flagged, round, .. } => format!(
                "status={status} b/S={advertised:.4} stations={} flagged={flagged} round={round}",
                stations.len()
            ),
            ProtocolMessage::OffloadResponse { round, combos, .. } => {
                format!("round={round} combos={}", combos.len())
            }
            ProtocolMessage::AllocationRequest { stations, advertised, .. } => {
                let macs: Vec<String> = stations.iter().map(|m| m.to_string()).collect();
                format!("stations=[{}] b/S={advertised:.4}", macs.join(" "))
            }
            ProtocolMessage::AllocationResponse { accept, .. } => format!("accept={accept}"),
            ProtocolMessage::HandoverCommand { assignments, .. } => {
                let a: Vec<String> = assignments.iter().map(|(m, g)| format!("{m}->{g}")).collect();
                format!("assignments=[{}]", a.join(" "))
            }
            ProtocolMessage::Abort { .. } => String::new(),
        }
    }
}
