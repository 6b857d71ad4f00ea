//! Semantic boundary regularization: positive prompts drawn from the eroded
//! interior of an instance, negative prompts from a band of background pixels
//! just outside it, each with a fallback cascade so every mask gets prompts.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{self, BinaryMask, InstanceLabelMap, Point};

/// RNG family used for every prompt stream.
pub type PromptRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SbrError {
    #[error("at least one positive point is required")]
    NoPositives,
    #[error("instance {instance_id} covers the whole image; no background for negative points")]
    NoBackground { instance_id: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbrConfig {
    pub n_positive: usize,
    pub n_negative: usize,
    pub erosion_iterations: usize,
    pub band_lo: f64,
    pub band_hi: f64,
    pub external_dilate_iterations: usize,
    pub seed: u64,
}

impl Default for SbrConfig {
    fn default() -> Self {
        Self {
            n_positive: 1,
            n_negative: 3,
            erosion_iterations: 10,
            band_lo: 9.0,
            band_hi: 11.0,
            external_dilate_iterations: 11,
            seed: 0,
        }
    }
}

impl SbrConfig {
    pub fn with_points(mut self, n_positive: usize, n_negative: usize) -> Self {
        self.n_positive = n_positive;
        self.n_negative = n_negative;
        self
    }

    pub fn validate(&self) -> Result<(), SbrError> {
        if self.n_positive == 0 {
            return Err(SbrError::NoPositives);
        }
        if !(self.band_lo > 0.0 && self.band_lo <= self.band_hi) {
            return Err(SbrError::InvalidConfig(format!(
                "band [{}, {}] must satisfy 0 < lo <= hi",
                self.band_lo, self.band_hi
            )));
        }
        Ok(())
    }
}

/// Which case of the positive-point cascade produced the points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositiveBranch {
    /// Uniform draw without replacement from the eroded interior.
    Interior,
    /// Interior too small: cycle through it in row-major order.
    InteriorCycled,
    /// Interior empty: the mask centroid, repeated.
    Centroid,
    /// Empty mask: the image center, repeated.
    ImageCenter,
}

/// Which case of the negative-point cascade produced the points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeBranch {
    /// No points requested.
    None,
    /// Uniform draw without replacement from the boundary band.
    Band,
    /// Uniform draw without replacement from the region outside the dilated mask.
    External,
    /// Uniform draw with replacement from all background pixels.
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Draw<B> {
    pub branch: B,
    pub points: Vec<Point>,
}

fn sample_distinct(region: &[Point], n: usize, rng: &mut impl Rng) -> Vec<Point> {
    index::sample(rng, region.len(), n).into_iter().map(|i| region[i]).collect()
}

/// Draws `n_p` positive points for `mask`.
pub fn sample_positive_points(
    mask: &BinaryMask,
    n_p: usize,
    erosion_iterations: usize,
    rng: &mut impl Rng,
) -> Result<Draw<PositiveBranch>, SbrError> {
    if n_p == 0 {
        return Err(SbrError::NoPositives);
    }
    let interior = mask::erode(mask, erosion_iterations).points();
    let draw = if interior.len() >= n_p {
        Draw { branch: PositiveBranch::Interior, points: sample_distinct(&interior, n_p, rng) }
    } else if !interior.is_empty() {
        let points = (0..n_p).map(|i| interior[i % interior.len()]).collect();
        Draw { branch: PositiveBranch::InteriorCycled, points }
    } else if let Ok(c) = mask::centroid(mask) {
        Draw { branch: PositiveBranch::Centroid, points: vec![c; n_p] }
    } else {
        let center = Point::new(mask.width() / 2, mask.height() / 2);
        Draw { branch: PositiveBranch::ImageCenter, points: vec![center; n_p] }
    };
    Ok(draw)
}

/// Draws `n_n` negative points around `mask`.
///
/// For an empty mask the band and external region are treated as empty, so
/// the draw falls through to the whole image.
pub fn sample_negative_points(
    mask: &BinaryMask,
    n_n: usize,
    cfg: &SbrConfig,
    rng: &mut impl Rng,
) -> Result<Draw<NegativeBranch>, SbrError> {
    if n_n == 0 {
        return Ok(Draw { branch: NegativeBranch::None, points: Vec::new() });
    }
    if !mask.is_empty() {
        let band = mask::boundary_band(mask, cfg.band_lo, cfg.band_hi)
            .map_err(|e| SbrError::InvalidConfig(e.to_string()))?
            .points();
        if band.len() >= n_n {
            return Ok(Draw { branch: NegativeBranch::Band, points: sample_distinct(&band, n_n, rng) });
        }
        let external = mask::external_region(mask, cfg.external_dilate_iterations).points();
        if external.len() >= n_n {
            return Ok(Draw {
                branch: NegativeBranch::External,
                points: sample_distinct(&external, n_n, rng),
            });
        }
    }
    let background = mask.complement().points();
    if background.is_empty() {
        return Err(SbrError::NoBackground { instance_id: 0 });
    }
    let points = (0..n_n).map(|_| background[rng.random_range(0..background.len())]).collect();
    Ok(Draw { branch: NegativeBranch::Background, points })
}

/// Prompts for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSet {
    pub instance_id: u32,
    pub positives: Vec<Point>,
    pub negatives: Vec<Point>,
}

impl PromptSet {
    /// Points with their prompt labels (1 positive, 0 negative), positives first.
    pub fn labeled_points(&self) -> impl Iterator<Item = (Point, u8)> + '_ {
        self.positives.iter().map(|&p| (p, 1)).chain(self.negatives.iter().map(|&p| (p, 0)))
    }
}

/// One line of the prompt record stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub image_id: String,
    pub instance_id: u32,
    /// `[x, y, 1]` triples.
    pub positives: Vec<[usize; 3]>,
    /// `[x, y, 0]` triples.
    pub negatives: Vec<[usize; 3]>,
}

impl PromptRecord {
    pub fn new(image_id: &str, set: &PromptSet) -> Self {
        Self {
            image_id: image_id.to_owned(),
            instance_id: set.instance_id,
            positives: set.positives.iter().map(|p| [p.x, p.y, 1]).collect(),
            negatives: set.negatives.iter().map(|p| [p.x, p.y, 0]).collect(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("prompt record serializes")
    }

    pub fn prompt_set(&self) -> PromptSet {
        PromptSet {
            instance_id: self.instance_id,
            positives: self.positives.iter().map(|t| Point::new(t[0], t[1])).collect(),
            negatives: self.negatives.iter().map(|t| Point::new(t[0], t[1])).collect(),
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Stable 64-bit key for a sequence of fields: FNV-1a over length-prefixed
/// little-endian bytes, finished with the splitmix64 mixer.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    for part in parts {
        feed(&(part.len() as u64).to_le_bytes());
        feed(part);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Streams for positives and negatives of one instance. The positive stream
/// depends on the positive count but not the negative count, so varying the
/// number of negatives leaves the positives untouched.
fn instance_streams(cfg: &SbrConfig, image_id: &str, instance_id: u32) -> (PromptRng, PromptRng) {
    let seed = cfg.seed.to_le_bytes();
    let id = instance_id.to_le_bytes();
    let np = (cfg.n_positive as u64).to_le_bytes();
    let nn = (cfg.n_negative as u64).to_le_bytes();
    let pos = stable_hash(&[b"pos", &seed, image_id.as_bytes(), &id, &np]);
    let neg = stable_hash(&[b"neg", &seed, image_id.as_bytes(), &id, &np, &nn]);
    (PromptRng::seed_from_u64(pos), PromptRng::seed_from_u64(neg))
}

/// Prompts for one instance mask using the per-instance streams of `cfg`.
pub fn prompts_for_instance(
    mask: &BinaryMask,
    image_id: &str,
    instance_id: u32,
    cfg: &SbrConfig,
) -> Result<PromptSet, SbrError> {
    let (mut pos_rng, mut neg_rng) = instance_streams(cfg, image_id, instance_id);
    let positives = sample_positive_points(mask, cfg.n_positive, cfg.erosion_iterations, &mut pos_rng)?.points;
    let negatives = sample_negative_points(mask, cfg.n_negative, cfg, &mut neg_rng)
        .map_err(|e| match e {
            SbrError::NoBackground { .. } => SbrError::NoBackground { instance_id },
            other => other,
        })?
        .points;
    Ok(PromptSet { instance_id, positives, negatives })
}

/// One prompt set per instance id, ascending.
pub fn generate_prompts(
    labels: &InstanceLabelMap,
    image_id: &str,
    cfg: &SbrConfig,
) -> Result<Vec<PromptSet>, SbrError> {
    cfg.validate()?;
    labels
        .instance_ids()
        .into_iter()
        .map(|id| prompts_for_instance(&labels.mask_of(id), image_id, id, cfg))
        .collect()
}

/// Uniform subset of at most `max_instances` instance ids, in draw order.
pub fn select_training_instances(
    labels: &InstanceLabelMap,
    max_instances: usize,
    rng: &mut impl Rng,
) -> Vec<u32> {
    let ids = labels.instance_ids();
    let k = max_instances.min(ids.len());
    index::sample(rng, ids.len(), k).into_iter().map(|i| ids[i]).collect()
}
