//! Geometry of the neighbourhood and the frozen link budget between every
//! station and every gateway.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::channel::{packet_error_rate, path_loss, snr_db, PhyRate};
use crate::config::{ConfigError, ScenarioConfig};
use crate::rng::substream;

/// Frame length used to decide whether a link is usable at all.
pub const REFERENCE_FRAME_BITS: f64 = 12_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub house_centers: Vec<[f64; 2]>,
    pub gateways: Vec<[f64; 2]>,
    pub stations: Vec<[f64; 2]>,
    pub home: Vec<usize>,
    /// `snr[s][g]`: SNR (dB) between station `s` and gateway `g`.
    pub snr: Vec<Vec<f64>>,
    pub walls: Vec<Vec<u32>>,
    reference_bits: f64,
    max_per: f64,
}

fn segment_hits_rect(p: [f64; 2], q: [f64; 2], c: [f64; 2], size: [f64; 2]) -> bool {
    let (x0, x1) = (c[0] - size[0] / 2.0, c[0] + size[0] / 2.0);
    let (y0, y1) = (c[1] - size[1] / 2.0, c[1] + size[1] / 2.0);
    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (pp, qq) in [(-dx, p[0] - x0), (dx, x1 - p[0]), (-dy, p[1] - y0), (dy, y1 - p[1])] {
        if pp == 0.0 {
            if qq < 0.0 {
                return false;
            }
        } else {
            let t = qq / pp;
            if pp < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    t0 <= t1
}

fn inside(p: [f64; 2], c: [f64; 2], size: [f64; 2]) -> bool {
    (p[0] - c[0]).abs() <= size[0] / 2.0 && (p[1] - c[1]).abs() <= size[1] / 2.0
}

fn place(rng: &mut impl Rng, c: [f64; 2], size: [f64; 2], margin: f64) -> [f64; 2] {
    let hx = size[0] / 2.0 - margin;
    let hy = size[1] / 2.0 - margin;
    [c[0] + rng.random_range(-hx..=hx), c[1] + rng.random_range(-hy..=hy)]
}

impl Layout {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self, ConfigError> {
        let topo = &cfg.topology;
        let size = topo.house_size;
        let house_centers: Vec<[f64; 2]> = topo.houses.iter().map(|h| [h.x, h.y]).collect();
        let gateways: Vec<[f64; 2]> = topo
            .houses
            .iter()
            .map(|h| {
                let off = h.gateway.unwrap_or([0.0, 0.0]);
                [h.x + off[0], h.y + off[1]]
            })
            .collect();

        let mut stations = Vec::new();
        let mut home = Vec::new();
        if let Some(pop) = &cfg.population {
            for (h, c) in house_centers.iter().enumerate() {
                for k in 0..pop.per_house {
                    let mut rng = substream(cfg.seed, &format!("place/{h}/{k}"));
                    stations.push(place(&mut rng, *c, size, pop.margin));
                    home.push(h);
                }
            }
        }
        for (i, s) in cfg.stations.iter().enumerate() {
            let pos = match s.position {
                Some(p) => p,
                None => {
                    let mut rng = substream(cfg.seed, &format!("place/station/{i}"));
                    place(&mut rng, house_centers[s.house], size, 1.0_f64.min(size[0].min(size[1]) / 4.0))
                }
            };
            stations.push(pos);
            home.push(s.house);
        }

        let n_h = house_centers.len();
        let house_of = |p: [f64; 2]| house_centers.iter().position(|c| inside(p, *c, size));
        let geometric_walls = |p: [f64; 2], from: Option<usize>, q: [f64; 2], to: usize| -> u32 {
            if from == Some(to) {
                return 0;
            }
            let mut w = 1 + u32::from(from.is_some());
            for (o, c) in house_centers.iter().enumerate() {
                if Some(o) != from && o != to && segment_hits_rect(p, q, *c, size) {
                    w += 2;
                }
            }
            w
        };
        let mut walls = vec![vec![0u32; n_h]; stations.len()];
        let mut snr = vec![vec![0.0; n_h]; stations.len()];
        let shadow_sd = cfg.channel.shadowing_std_db;
        for (s, &p) in stations.iter().enumerate() {
            for (g, &q) in gateways.iter().enumerate() {
                let w = match &topo.walls {
                    Some(m) => m[home[s]][g],
                    None => geometric_walls(p, house_of(p), q, g),
                };
                walls[s][g] = w;
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                let shadow = if shadow_sd > 0.0 {
                    let mut rng = substream(cfg.seed, &format!("shadow/{s}/{g}"));
                    Normal::new(0.0, shadow_sd).expect("validated").sample(&mut rng)
                } else {
                    0.0
                };
                snr[s][g] = snr_db(path_loss(d, w, &cfg.channel), shadow, &cfg.channel);
            }
        }
        Ok(Self {
            house_centers,
            gateways,
            stations,
            home,
            snr,
            walls,
            reference_bits: REFERENCE_FRAME_BITS + cfg.mac.mac_header_bits,
            max_per: cfg.max_per,
        })
    }

    /// Whether station `s` and gateway `g` can exchange frames at 1 Mbit/s.
    pub fn visible(&self, s: usize, g: usize) -> bool {
        packet_error_rate(self.snr[s][g], PhyRate::Dsss1, self.reference_bits) <= self.max_per
    }

    /// Mean fraction of gateways each station can reach at 1 Mbit/s.
    pub fn visibility_fraction(&self) -> f64 {
        if self.stations.is_empty() {
            return 0.0;
        }
        let n_g = self.gateways.len() as f64;
        let total: f64 = (0..self.stations.len())
            .map(|s| (0..self.gateways.len()).filter(|&g| self.visible(s, g)).count() as f64 / n_g)
            .sum();
        total / self.stations.len() as f64
    }

    pub fn check_coverage(&self, _cfg: &ScenarioConfig) -> Result<(), ConfigError> {
        for s in 0..self.stations.len() {
            if !(0..self.gateways.len()).any(|g| self.visible(s, g)) {
                let p = self.stations[s];
                return Err(ConfigError::Invalid(format!(
                    "station {s} at ({:.1}, {:.1}) has no gateway within 1 Mbit/s range",
                    p[0], p[1]
                )));
            }
        }
        Ok(())
    }
}
