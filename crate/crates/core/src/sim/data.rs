//! Synthetic multi-domain segmentation data.
//!
//! Every sample is a fundus-like picture: a bright elliptical disc with a
//! brighter concentric cup on a shaded background. Domains differ in how the
//! clean rendering is mapped to intensities (gain, gamma, offset, noise) and
//! in the eccentricity of the shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grid::{Image, Mask};

pub const BACKGROUND: u8 = 0;
pub const DISC: u8 = 1;
pub const CUP: u8 = 2;
pub const NUM_CLASSES: usize = 3;

pub type DomainId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Image,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: DomainId,
    pub name: String,
    pub brightness_shift: f64,
    pub contrast_gain: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub shape_eccentricity: f64,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid domain spec `{name}`: {reason}")]
pub struct DomainSpecError {
    pub name: String,
    pub reason: String,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), DomainSpecError> {
        let fail = |reason: &str| {
            Err(DomainSpecError {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.gamma > 0.0) {
            return fail("gamma must be > 0");
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise_std must be >= 0");
        }
        if !(0.0..1.0).contains(&self.shape_eccentricity) {
            return fail("shape_eccentricity must be in [0, 1)");
        }
        if self.size < 8 {
            return fail("size must be at least 8");
        }
        Ok(())
    }

    /// Renders every sample without the final clamp to `[0, 1]`.
    pub fn render_raw(&self) -> Vec<(Vec<f64>, Mask)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("finite std");
        (0..self.n_samples)
            .map(|_| {
                let geom = Geometry::sample(self, &mut rng);
                let (base, mask) = geom.render(self.size);
                let raw = base
                    .iter()
                    .map(|&b| {
                        let n = if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        self.contrast_gain * b.powf(self.gamma) + self.brightness_shift + n
                    })
                    .collect();
                (raw, mask)
            })
            .collect()
    }
}

/// Shape and shading parameters of one sample.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    cx: f64,
    cy: f64,
    semi_major: f64,
    semi_minor: f64,
    angle: f64,
    cup_ratio: f64,
    tilt_x: f64,
    tilt_y: f64,
}

impl Geometry {
    fn sample(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Self {
        let s = spec.size as f64;
        let jitter = s / 8.0;
        let semi_major = s * rng.random_range(0.18..0.28);
        let e = spec.shape_eccentricity;
        Self {
            cx: (s - 1.0) / 2.0 + rng.random_range(-jitter..jitter),
            cy: (s - 1.0) / 2.0 + rng.random_range(-jitter..jitter),
            semi_major,
            semi_minor: semi_major * (1.0 - e * e).sqrt(),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            cup_ratio: rng.random_range(0.35..0.6),
            tilt_x: rng.random_range(-0.05..0.05),
            tilt_y: rng.random_range(-0.05..0.05),
        }
    }

    /// Clean base intensities in `[0, 1]` and the label mask.
    fn render(&self, size: usize) -> (Vec<f64>, Mask) {
        let s = size as f64;
        let (sin, cos) = self.angle.sin_cos();
        let mut base = Vec::with_capacity(size * size);
        let mut mask = Mask::zeros(size, size);
        for row in 0..size {
            for col in 0..size {
                let dx = col as f64 - self.cx;
                let dy = row as f64 - self.cy;
                let u = (dx * cos + dy * sin) / self.semi_major;
                let v = (-dx * sin + dy * cos) / self.semi_minor;
                let rho = (u * u + v * v).sqrt();
                let label = if rho <= self.cup_ratio {
                    CUP
                } else if rho <= 1.0 {
                    DISC
                } else {
                    BACKGROUND
                };
                mask.set(row, col, label);

                let px = col as f64 / s - 0.5;
                let py = row as f64 / s - 0.5;
                let vignette = 0.1 * (1.0 - 2.0 * (px * px + py * py));
                let shade = self.tilt_x * px * 2.0 + self.tilt_y * py * 2.0;
                let b = match label {
                    CUP => 0.85 + 0.05 * (1.0 - rho / self.cup_ratio),
                    DISC => 0.55 + 0.08 * (1.0 - rho),
                    _ => 0.2 + vignette,
                } + shade;
                base.push(b.clamp(0.0, 1.0));
            }
        }
        (base, mask)
    }
}

/// Deterministic sample set for a domain.
pub fn generate_domain(spec: &DomainSpec) -> Vec<SegSample> {
    spec.render_raw()
        .into_iter()
        .map(|(raw, mask)| SegSample {
            image: Image::gray(
                spec.size,
                spec.size,
                raw.into_iter().map(|x| x.clamp(0.0, 1.0)).collect(),
            ),
            mask,
        })
        .collect()
}

/// The four desk-scale default domains.
pub fn default_domains() -> Vec<DomainSpec> {
    let mk = |id: DomainId, name: &str, shift: f64, gain: f64, gamma: f64, noise: f64, ecc: f64| DomainSpec {
        domain_id: id,
        name: name.to_string(),
        brightness_shift: shift,
        contrast_gain: gain,
        gamma,
        noise_std: noise,
        shape_eccentricity: ecc,
        n_samples: 40,
        seed: 1000 + id as u64,
        size: 32,
    };
    vec![
        mk(0, "A", 0.0, 1.0, 1.0, 0.03, 0.3),
        mk(1, "B", 0.15, 0.7, 1.4, 0.05, 0.5),
        mk(2, "C", -0.1, 1.2, 0.7, 0.02, 0.2),
        mk(3, "D", 0.05, 0.8, 1.0, 0.08, 0.6),
    ]
}
