//! Synthetic bright-blob images with exact instance ground truth.

use std::f64::consts::TAU;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::InstanceLabelMap;
use crate::sbr::PromptRng;

/// Background grey level before noise.
pub const BACKGROUND_LEVEL: f64 = 40.0;
/// Minimum distance between a blob and the image edge.
pub const EDGE_MARGIN: f64 = 12.0;
/// Minimum gap between the outer radii of two blobs.
pub const BLOB_GAP: f64 = 3.0;
/// Largest relative boundary perturbation.
pub const MAX_WOBBLE: f64 = 0.2;
const PLACEMENT_ATTEMPTS: usize = 2000;
/// Smallest radius that keeps an eroded interior and a full negative band.
pub const MIN_RADIUS: f64 = 13.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("could not place instance {placed} of {requested} after {attempts} attempts")]
    PackingFailure { placed: usize, requested: usize, attempts: usize },
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub side: usize,
    pub n_instances: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Foreground level as a fraction of the headroom above the background.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { side: 256, n_instances: 8, radius_min: 14.0, radius_max: 26.0, contrast: 0.5, noise_sigma: 12.0, seed: 0 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_owned()));
        if self.n_instances == 0 {
            return bad("n_instances must be at least 1");
        }
        if !(self.radius_min >= MIN_RADIUS && self.radius_min <= self.radius_max) {
            return bad("radius range must satisfy 13 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.contrast) || !(self.noise_sigma >= 0.0) {
            return bad("contrast must lie in [0, 1] and noise sigma must be non-negative");
        }
        if self.side == 0 || self.side > u32::MAX as usize {
            return bad("side out of range");
        }
        Ok(())
    }

    pub fn foreground_level(&self) -> f64 {
        BACKGROUND_LEVEL + self.contrast * (255.0 - BACKGROUND_LEVEL)
    }
}

/// Star-shaped blob: radius r0 * (1 + a * (1 + sin(k * theta + phase)) / 2).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
}

impl Blob {
    fn outer(&self) -> f64 {
        self.r0 * (1.0 + self.wobble)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.r0 * (1.0 + self.wobble * (1.0 + (self.lobes * dy.atan2(dx) + self.phase).sin()) / 2.0);
        dx * dx + dy * dy <= r * r
    }
}

/// Renders a grey RGB image and its label map; ids run 1..=n_instances.
pub fn synth_generate(spec: &SynthSpec) -> Result<(RgbImage, InstanceLabelMap), SynthError> {
    spec.validate()?;
    let mut rng = PromptRng::seed_from_u64(spec.seed);
    let side = spec.side as f64;
    let mut blobs: Vec<Blob> = Vec::with_capacity(spec.n_instances);
    let mut attempts = 0;
    while blobs.len() < spec.n_instances {
        if attempts == PLACEMENT_ATTEMPTS {
            return Err(SynthError::PackingFailure {
                placed: blobs.len(),
                requested: spec.n_instances,
                attempts,
            });
        }
        attempts += 1;
        let r0 = rng.random_range(spec.radius_min..=spec.radius_max);
        let wobble = rng.random_range(0.0..=MAX_WOBBLE);
        let lobes = f64::from(rng.random_range(3u32..=6));
        let phase = rng.random_range(0.0..TAU);
        let reach = r0 * (1.0 + wobble) + EDGE_MARGIN;
        if 2.0 * reach >= side {
            continue;
        }
        let cx = rng.random_range(reach..side - 1.0 - reach);
        let cy = rng.random_range(reach..side - 1.0 - reach);
        let blob = Blob { cx, cy, r0, wobble, lobes, phase };
        let clear = blobs
            .iter()
            .all(|b| ((b.cx - cx).powi(2) + (b.cy - cy).powi(2)).sqrt() >= b.outer() + blob.outer() + BLOB_GAP);
        if clear {
            blobs.push(blob);
        }
    }

    let labels = InstanceLabelMap::from_fn(spec.side, spec.side, |x, y| {
        blobs
            .iter()
            .position(|b| b.contains(x as f64, y as f64))
            .map_or(0, |i| i as u32 + 1)
    });
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let fg = spec.foreground_level();
    let mut image = RgbImage::new(spec.side as u32, spec.side as u32);
    for (i, px) in labels.labels().iter().enumerate() {
        let base = if *px == 0 { BACKGROUND_LEVEL } else { fg };
        let v = if spec.noise_sigma > 0.0 { base + noise.sample(&mut rng) } else { base };
        let v = v.round().clamp(0.0, 255.0) as u8;
        image.put_pixel((i % spec.side) as u32, (i / spec.side) as u32, Rgb([v; 3]));
    }
    Ok((image, labels))
}
