//! Run logs, their CSV form and the summary derived from them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assessment::Status;
use crate::protocol::ProtocolConfig;

/// Length of the quiet window that marks steady state (s).
pub const STEADY_WINDOW: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub time: f64,
    pub gateway: u16,
    pub duration: f64,
    pub n_active: u32,
    pub avg_payload: f64,
    pub avg_rate: f64,
    pub per: f64,
    pub saturation: f64,
    pub available: f64,
    pub ratio: f64,
    pub status: Status,
    /// Status held long enough to be acted on, see [`StatusFilter`].
    pub confirmed: Status,
    pub stations: usize,
    /// Delivered payload throughput over the cycle (bit/s).
    pub inelastic: f64,
    pub elastic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRow {
    pub time: f64,
    pub from: u16,
    /// Destination gateway, or `*` for multicast.
    pub to: String,
    pub kind: String,
    pub procedure: String,
    pub delivered: usize,
    pub lost: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRow {
    pub time: f64,
    pub gateway: u16,
    pub on: bool,
    pub stations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssocEvent {
    Join,
    Leave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssocRow {
    pub time: f64,
    pub station: usize,
    pub mac: String,
    pub event: AssocEvent,
    pub gateway: u16,
    pub reason: String,
}

/// Light or Heavy once the per-cycle assessment has held for the protocol's
/// dwell (cycles and seconds), Regular otherwise.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StatusFilter {
    streak: Option<(Status, f64, u32)>,
}

impl StatusFilter {
    pub fn update(&mut self, now: f64, raw: Status, p: &ProtocolConfig) -> Status {
        let (status, since, cycles) = match self.streak {
            Some((s, since, n)) if s == raw => (s, since, n + 1),
            _ => (raw, now, 1),
        };
        self.streak = Some((status, since, cycles));
        let (need_cycles, need_secs) = match status {
            Status::Light => (p.dwell_light_cycles, p.dwell_light_secs),
            Status::Heavy => (p.dwell_heavy_cycles, p.dwell_heavy_secs),
            Status::Regular => return Status::Regular,
        };
        if cycles >= need_cycles && now - since >= need_secs {
            status
        } else {
            Status::Regular
        }
    }

    pub fn reset(&mut self) {
        self.streak = None;
    }
}

/// Everything a run records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub n_gateways: usize,
    pub n_stations: usize,
    pub duration: f64,
    pub initially_on: Vec<bool>,
    pub cycles: Vec<CycleRow>,
    pub messages: Vec<MessageRow>,
    pub gateways: Vec<GatewayRow>,
    pub assoc: Vec<AssocRow>,
    /// Delivered payload bits per station and whole second, `[inelastic, elastic]`.
    pub station_bits: Vec<Vec<[f64; 2]>>,
    /// Inelastic load offered by each station once all flows have started (bit/s).
    pub offered_inelastic: Vec<f64>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r).map_err(io::Error::other)?;
    }
    w.flush()
}

/// Writes a CSV with only a header when `rows` is empty.
fn write_csv_or_header<T: Serialize>(path: &Path, rows: &[T], header: &str) -> io::Result<()> {
    if rows.is_empty() {
        let mut f = File::create(path)?;
        writeln!(f, "{header}")
    } else {
        write_csv(path, rows)
    }
}

impl RunLog {
    pub fn write_csvs(&self, dir: &Path) -> io::Result<()> {
        write_csv_or_header(
            &dir.join("cycles.csv"),
            &self.cycles,
            "time,gateway,duration,n_active,avg_payload,avg_rate,per,saturation,available,ratio,status,confirmed,stations,inelastic,elastic",
        )?;
        write_csv_or_header(
            &dir.join("protocol.csv"),
            &self.messages,
            "time,from,to,kind,procedure,delivered,lost,detail",
        )?;
        write_csv_or_header(&dir.join("gateways.csv"), &self.gateways, "time,gateway,on,stations")?;
        write_csv_or_header(&dir.join("assoc.csv"), &self.assoc, "time,station,mac,event,gateway,reason")?;
        let mut w = csv::Writer::from_path(dir.join("stations.csv"))?;
        w.write_record(["second", "station", "inelastic", "elastic"])?;
        for (s, bins) in self.station_bits.iter().enumerate() {
            for (sec, b) in bins.iter().enumerate() {
                w.write_record([sec.to_string(), s.to_string(), b[0].to_string(), b[1].to_string()])?;
            }
        }
        w.flush()
    }

    /// Reads back the CSVs written by [`RunLog::write_csvs`]. Station bins
    /// and offered loads are not restored.
    pub fn read_csvs(dir: &Path) -> io::Result<RunLog> {
        fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Vec<T>> {
            let mut r = csv::Reader::from_path(path)?;
            r.deserialize().collect::<Result<Vec<T>, _>>().map_err(io::Error::other)
        }
        Ok(RunLog {
            cycles: read(&dir.join("cycles.csv"))?,
            messages: read(&dir.join("protocol.csv"))?,
            gateways: read(&dir.join("gateways.csv"))?,
            assoc: read(&dir.join("assoc.csv"))?,
            ..RunLog::default()
        })
    }

    /// Instants at which the federation changed: messages, on/off switches
    /// and changes of confirmed status.
    pub fn change_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.messages.iter().map(|m| m.time).collect();
        t.extend(self.gateways.iter().map(|g| g.time));
        let mut last: BTreeMap<u16, Status> = BTreeMap::new();
        for c in &self.cycles {
            if last.insert(c.gateway, c.confirmed).is_some_and(|prev| prev != c.confirmed) {
                t.push(c.time);
            }
        }
        t.sort_by(f64::total_cmp);
        t
    }

    /// Start of the first quiet window at or after `from`.
    pub fn steady_state(&self, from: f64) -> Option<f64> {
        let changes = self.change_times();
        let mut start = from;
        loop {
            if start + STEADY_WINDOW > self.duration + 1e-9 {
                return None;
            }
            match changes.iter().rev().find(|&&c| c >= start && c < start + STEADY_WINDOW) {
                Some(&c) => start = c + 1e-9,
                None => return Some(start),
            }
        }
    }

    /// On/off state and station placement at `t` (inclusive), replayed from the logs.
    pub fn snapshot(&self, t: f64) -> Snapshot {
        let mut on = self.initially_on.clone();
        if on.len() < self.n_gateways {
            on.resize(self.n_gateways, true);
        }
        for g in self.gateways.iter().filter(|g| g.time <= t) {
            on[g.gateway as usize] = g.on;
        }
        let mut at: BTreeMap<usize, Option<u16>> = BTreeMap::new();
        for a in self.assoc.iter().filter(|a| a.time <= t) {
            at.insert(
                a.station,
                match a.event {
                    AssocEvent::Join => Some(a.gateway),
                    AssocEvent::Leave => None,
                },
            );
        }
        let mut stations = vec![0usize; self.n_gateways];
        let mut orphans = 0;
        for s in 0..self.n_stations {
            match at.get(&s).copied().flatten() {
                Some(g) => stations[g as usize] += 1,
                None => orphans += 1,
            }
        }
        let mut status = vec![None; self.n_gateways];
        for c in self.cycles.iter().filter(|c| c.time <= t) {
            status[c.gateway as usize] = Some(c.confirmed);
        }
        for (g, s) in status.iter_mut().enumerate() {
            if !on[g] {
                *s = None;
            }
        }
        Snapshot { time: t, on, stations, status, orphans }
    }

    /// Delivered inelastic throughput of the federation over `[from, to)`,
    /// from the per-cycle records.
    pub fn inelastic_throughput(&self, from: f64, to: f64) -> f64 {
        let mut bits = 0.0;
        for c in &self.cycles {
            let start = c.time - c.duration;
            let overlap = (c.time.min(to) - start.max(from)).max(0.0);
            bits += c.inelastic * overlap;
        }
        bits / (to - from)
    }

    pub fn summarize(&self, last_traffic_change: f64) -> RunSummary {
        let steady = self.steady_state(last_traffic_change);
        let (at, window) = match steady {
            Some(s) => (s + STEADY_WINDOW, (s, s + STEADY_WINDOW)),
            None => (self.duration, ((self.duration - STEADY_WINDOW).max(0.0), self.duration)),
        };
        let snap = self.snapshot(at);
        RunSummary {
            steady_state: steady,
            gateways_on: snap.on.iter().filter(|&&o| o).count(),
            stations_per_gateway: snap.stations.clone(),
            heavy: snap.status.iter().filter(|s| **s == Some(Status::Heavy)).count(),
            light: snap.status.iter().filter(|s| **s == Some(Status::Light)).count(),
            orphans: snap.orphans,
            inelastic_throughput: if window.1 > window.0 { self.inelastic_throughput(window.0, window.1) } else { 0.0 },
            offered_inelastic: self.offered_inelastic.iter().sum(),
            off_fraction: if self.n_gateways > 0 {
                snap.on.iter().filter(|&&o| !o).count() as f64 / self.n_gateways as f64
            } else {
                0.0
            },
            messages: self.messages.len(),
            handovers: self.messages.iter().filter(|m| m.kind == "HANDOVER_COMMAND").count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub on: Vec<bool>,
    pub stations: Vec<usize>,
    pub status: Vec<Option<Status>>,
    pub orphans: usize,
}

impl Snapshot {
    /// Spread of station counts over the switched-on gateways.
    pub fn station_spread(&self) -> usize {
        let counts: Vec<usize> = (0..self.on.len()).filter(|&g| self.on[g]).map(|g| self.stations[g]).collect();
        match (counts.iter().max(), counts.iter().min()) {
            (Some(a), Some(b)) => a - b,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Start of the first quiet window after the last traffic change.
    pub steady_state: Option<f64>,
    pub gateways_on: usize,
    pub stations_per_gateway: Vec<usize>,
    pub heavy: usize,
    pub light: usize,
    pub orphans: usize,
    /// Over the steady window, or the last window of the run (bit/s).
    pub inelastic_throughput: f64,
    pub offered_inelastic: f64,
    /// Share of gateways switched off at the end of the steady window, or
    /// at the end of the run without steady state.
    pub off_fraction: f64,
    pub messages: usize,
    pub handovers: usize,
}
