//! The point-prompt segmenter contract and its implementations.

mod baseline;
mod remote;
pub mod rle;
pub mod synth;

pub use baseline::{region_compete_segment, RegionCompete, RegionCompeteParams};
pub use remote::{encode_png_b64, PredictPayload, RemoteSegmenter, RleMask, WirePoint};

use image::RgbImage;
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::sbr::PromptSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("prompt set has no positive point")]
    NoPositive,
    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds { x: usize, y: usize, width: usize, height: usize },
    #[error("positive and negative prompt coincide at ({0}, {1})")]
    DegeneratePrompts(usize, usize),
    #[error("request timed out")]
    Timeout,
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Everything a backend sees for one prompted instance.
#[derive(Debug, Clone, Copy)]
pub struct SegmentRequest<'a> {
    pub image_id: &'a str,
    pub image: &'a RgbImage,
    pub prompts: &'a PromptSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: BinaryMask,
    /// Per-pixel cost of the object label (lower is more confident), when the
    /// backend has one.
    pub cost: Option<Vec<f64>>,
}

impl Segmentation {
    pub fn from_mask(mask: BinaryMask) -> Self {
        Self { mask, cost: None }
    }
}

pub trait Segmenter: Send + Sync {
    /// Stable identifier used in reports.
    fn id(&self) -> &str;

    /// Returns a mask with the image's dimensions; inputs are not modified.
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Segmentation, SegmentError>;
}

/// Checks the preconditions shared by every backend.
pub fn validate_prompts(width: usize, height: usize, prompts: &PromptSet) -> Result<(), SegmentError> {
    if prompts.positives.is_empty() {
        return Err(SegmentError::NoPositive);
    }
    for (p, _) in prompts.labeled_points() {
        if p.x >= width || p.y >= height {
            return Err(SegmentError::OutOfBounds { x: p.x, y: p.y, width, height });
        }
    }
    for n in &prompts.negatives {
        if prompts.positives.contains(n) {
            return Err(SegmentError::DegeneratePrompts(n.x, n.y));
        }
    }
    Ok(())
}

/// Dimension match and prompt containment: positives inside, negatives outside.
pub fn check_contract(request: &SegmentRequest<'_>, seg: &Segmentation) -> Result<(), SegmentError> {
    let dims = (request.image.width() as usize, request.image.height() as usize);
    if seg.mask.dims() != dims {
        return Err(SegmentError::Contract(format!("mask {:?} for image {:?}", seg.mask.dims(), dims)));
    }
    if let Some(p) = request.prompts.positives.iter().find(|p| !seg.mask.contains(**p)) {
        return Err(SegmentError::Contract(format!("positive ({}, {}) outside mask", p.x, p.y)));
    }
    if let Some(p) = request.prompts.negatives.iter().find(|p| seg.mask.contains(**p)) {
        return Err(SegmentError::Contract(format!("negative ({}, {}) inside mask", p.x, p.y)));
    }
    Ok(())
}

/// Wraps a backend and rejects results that break the prompt contract.
pub struct Strict<S>(pub S);

impl<S: Segmenter> Segmenter for Strict<S> {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Segmentation, SegmentError> {
        let seg = self.0.segment(request)?;
        check_contract(request, &seg)?;
        Ok(seg)
    }
}

impl<S: Segmenter + ?Sized> Segmenter for Box<S> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Segmentation, SegmentError> {
        (**self).segment(request)
    }
}

impl<S: Segmenter + ?Sized> Segmenter for std::sync::Arc<S> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Segmentation, SegmentError> {
        (**self).segment(request)
    }
}
