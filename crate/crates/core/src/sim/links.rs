//! Frame-level realization of a cycle's grant on one link: independent
//! frame errors at the link PER, retransmissions and AARF.

use rand::Rng;

use crate::channel::{aarf_on_tx_result, packet_error_rate, LinkState, PhyRate};

/// Attempts after which a frame is dropped.
pub const RETRY_LIMIT: u32 = 64;

/// Outcome of sending a batch of frames, split by the rate used.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Delivery {
    /// `(rate, successes, failures)` in order of first use.
    pub segments: Vec<(PhyRate, u64, u64)>,
    pub delivered: u64,
    pub dropped: u64,
}

impl Delivery {
    fn record(&mut self, rate: PhyRate, ok: u64, failed: u64) {
        if ok == 0 && failed == 0 {
            return;
        }
        match self.segments.iter_mut().find(|s| s.0 == rate) {
            Some(s) => {
                s.1 += ok;
                s.2 += failed;
            }
            None => self.segments.push((rate, ok, failed)),
        }
    }

    pub fn attempts(&self) -> u64 {
        self.segments.iter().map(|s| s.1 + s.2).sum()
    }
}

/// Number of successes before the next failure, for failure probability `p`.
fn successes_before_failure(p: f64, rng: &mut impl Rng) -> u64 {
    if !(p > 1e-15) {
        return u64::MAX;
    }
    if p >= 1.0 {
        return 0;
    }
    let u: f64 = rng.random::<f64>();
    let k = ((1.0 - u).ln() / (-p).ln_1p()).floor();
    if k >= u64::MAX as f64 {
        u64::MAX
    } else {
        k as u64
    }
}

/// Sends `frames` frames of `length_bits` over `link`, updating its AARF
/// state. Runs of successes are skipped in bulk.
pub fn transmit(
    link: &mut LinkState,
    frames: u64,
    length_bits: f64,
    rates: &[PhyRate],
    rng: &mut impl Rng,
) -> Delivery {
    let mut out = Delivery::default();
    let mut remaining = frames;
    let mut retries = 0u32;
    let mut per_cache: Option<(PhyRate, f64)> = None;
    while remaining > 0 {
        let rate = link.current_rate;
        let per = match per_cache {
            Some((r, p)) if r == rate => p,
            _ => {
                let p = packet_error_rate(link.snr, rate, length_bits);
                per_cache = Some((rate, p));
                p
            }
        };
        if link.aarf.probe_pending {
            let ok = rng.random::<f64>() >= per;
            aarf_on_tx_result(link, ok, rates);
            if ok {
                out.record(rate, 1, 0);
                remaining -= 1;
                out.delivered += 1;
                retries = 0;
            } else {
                out.record(rate, 0, 1);
                retries += 1;
            }
        } else {
            let a = &link.aarf;
            let to_probe = u64::from(a.success_threshold.saturating_sub(a.success_count)).max(1);
            let gap = successes_before_failure(per, rng);
            let run = gap.min(remaining).min(to_probe);
            if run > 0 {
                // all but the last success are plain counter increments
                link.aarf.success_count += (run - 1) as u32;
                link.aarf.failure_count = 0;
                aarf_on_tx_result(link, true, rates);
                out.record(rate, run, 0);
                remaining -= run;
                out.delivered += run;
                retries = 0;
            }
            if run == gap && gap < to_probe && remaining > 0 {
                aarf_on_tx_result(link, false, rates);
                out.record(rate, 0, 1);
                retries += 1;
            }
        }
        if retries >= RETRY_LIMIT {
            remaining -= 1;
            out.dropped += 1;
            retries = 0;
        }
    }
    out
}
