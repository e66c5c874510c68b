//! RTS/CTS probing with the station identity hidden in the CTS duration field.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::channel::PhyRate;
use crate::ids::MacAddr;
use crate::mac::MacParams;

/// Largest association identifier allowed by 802.11.
pub const MAX_AID: u16 = 2007;
/// CTS control frame length in bits (same fields as an ACK).
pub const CTS_BITS: f64 = 112.0;

/// Number of distinct hash values: `2 SIFS + ACK` expressed in whole microseconds.
pub fn hash_modulus(mac: &MacParams) -> u16 {
    ((2.0 * mac.sifs + mac.ack_time()) * 1e6).floor().max(1.0) as u16
}

pub fn aid_hash(aid: u16, mac: &MacParams) -> u16 {
    aid % hash_modulus(mac)
}

/// RTS duration field (us) that makes the elicited CTS carry `hash`.
pub fn rts_duration_us(hash: u16, mac: &MacParams) -> f64 {
    mac.sifs * 1e6 + (mac.phy_header_bits + CTS_BITS) / mac.basic_rate * 1e6 + f64::from(hash)
}

/// Recovers the hash from a CTS duration field: the CTS duration is the RTS
/// duration minus SIFS and the CTS airtime.
pub fn hash_from_cts_duration(cts_duration_us: f64, mac: &MacParams) -> u16 {
    let cts_air = (mac.phy_header_bits + CTS_BITS) / mac.basic_rate * 1e6;
    (cts_duration_us - cts_air).round().max(0.0) as u16
}

/// Smallest free AID whose hash is not used by `used`; falls back to the
/// smallest free AID once every hash value is taken.
pub fn assign_aid(used: &BTreeSet<u16>, mac: &MacParams) -> u16 {
    let hashes: BTreeSet<u16> = used.iter().map(|&a| aid_hash(a, mac)).collect();
    let free = (1..=MAX_AID).filter(|a| !used.contains(a));
    let mut fallback = None;
    for aid in free {
        if !hashes.contains(&aid_hash(aid, mac)) {
            return aid;
        }
        fallback.get_or_insert(aid);
    }
    fallback.unwrap_or(MAX_AID)
}

/// One RTS sent by the requester.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub mac: MacAddr,
    pub aid_hash: u16,
    /// Position in the probe sequence.
    pub slot: u32,
}

/// A CTS overheard by a monitoring gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeObservation {
    pub aid_hash: u16,
    pub slot: u32,
    pub snr: f64,
    /// Best usable data rate inferred from the SNR; `None` if unusable.
    pub rate: Option<PhyRate>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_bound_matches_default_timing() {
        // 2 * 10 us + (120 + 112) bits / 6 Mbit/s = 58.67 us
        assert_eq!(hash_modulus(&MacParams::default()), 58);
    }

    #[test]
    fn hash_survives_the_duration_field() {
        let mac = MacParams::default();
        for aid in [1, 57, 58, 300, MAX_AID] {
            let h = aid_hash(aid, &mac);
            let cts = rts_duration_us(h, &mac) - mac.sifs * 1e6;
            assert_eq!(hash_from_cts_duration(cts, &mac), h);
        }
    }

    #[test]
    fn assigned_aids_have_unique_hashes() {
        let mac = MacParams::default();
        let mut used = BTreeSet::new();
        for _ in 0..58 {
            used.insert(assign_aid(&used, &mac));
        }
        let hashes: BTreeSet<u16> = used.iter().map(|&a| aid_hash(a, &mac)).collect();
        assert_eq!(hashes.len(), 58);
        // the 59th necessarily collides
        let extra = assign_aid(&used, &mac);
        assert!(hashes.contains(&aid_hash(extra, &mac)));
    }
}
