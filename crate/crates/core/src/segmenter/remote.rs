//! HTTP client for an external point-prompt segmentation server.

use std::io::Cursor;
use std::sync::OnceLock;
use std::time::Duration;

use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{rle, validate_prompts, SegmentError, SegmentRequest, Segmentation, Segmenter};
use crate::mask::BinaryMask;
use crate::sbr::PromptSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePoint {
    pub x: usize,
    pub y: usize,
    /// 1 positive, 0 negative.
    pub label: u8,
}

impl WirePoint {
    pub fn from_prompts(prompts: &PromptSet) -> Vec<WirePoint> {
        prompts.labeled_points().map(|(p, label)| WirePoint { x: p.x, y: p.y, label }).collect()
    }
}

/// Exactly one of `image_id` and `image_b64_png` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64_png: Option<String>,
    pub points: Vec<WirePoint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub rle: Vec<u32>,
}

impl RleMask {
    pub fn encode(mask: &BinaryMask) -> Self {
        Self { width: mask.width(), height: mask.height(), rle: rle::encode(mask) }
    }

    pub fn decode(&self) -> Result<BinaryMask, rle::RleError> {
        rle::decode(self.width, self.height, &self.rle)
    }
}

pub fn encode_png_b64(image: &RgbImage) -> Result<String, image::ImageError> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

#[derive(Debug)]
pub struct RemoteSegmenter {
    endpoint: String,
    timeout: Duration,
    inline_image: bool,
    id: String,
    // Built on first use so construction is safe inside an async runtime.
    client: OnceLock<Result<reqwest::blocking::Client, String>>,
}

impl RemoteSegmenter {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let endpoint = endpoint.into();
        Self { id: format!("remote:{endpoint}"), endpoint, timeout, inline_image: true, client: OnceLock::new() }
    }

    /// Send `image_id` only, for servers that already hold the image.
    pub fn by_image_id(mut self) -> Self {
        self.inline_image = false;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, SegmentError> {
        self.client
            .get_or_init(|| {
                reqwest::blocking::Client::builder()
                    .timeout(self.timeout)
                    .connect_timeout(self.timeout)
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| SegmentError::Unreachable(e.clone()))
    }

    fn payload(&self, request: &SegmentRequest<'_>) -> Result<PredictPayload, SegmentError> {
        let points = WirePoint::from_prompts(request.prompts);
        if self.inline_image {
            let b64 = encode_png_b64(request.image).map_err(|e| SegmentError::Protocol(e.to_string()))?;
            Ok(PredictPayload { image_id: None, image_b64_png: Some(b64), points })
        } else {
            Ok(PredictPayload { image_id: Some(request.image_id.to_owned()), image_b64_png: None, points })
        }
    }
}

fn transport_error(e: reqwest::Error) -> SegmentError {
    if e.is_timeout() {
        SegmentError::Timeout
    } else if e.is_connect() {
        SegmentError::Unreachable(e.to_string())
    } else {
        SegmentError::Protocol(e.to_string())
    }
}

impl Segmenter for RemoteSegmenter {
    fn id(&self) -> &str {
        &self.id
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Segmentation, SegmentError> {
        let (w, h) = (request.image.width() as usize, request.image.height() as usize);
        validate_prompts(w, h, request.prompts)?;
        let payload = self.payload(request)?;
        let response = self.client()?.post(&self.endpoint).json(&payload).send().map_err(transport_error)?;
        let status = response.status();
        if !status.is_success() {
            return Err(SegmentError::Protocol(format!("status {status}")));
        }
        let body: RleMask = response.json().map_err(|e| match transport_error(e) {
            SegmentError::Timeout => SegmentError::Timeout,
            other => SegmentError::Protocol(other.to_string()),
        })?;
        if (body.width, body.height) != (w, h) {
            return Err(SegmentError::Protocol(format!(
                "mask is {}x{}, image is {w}x{h}",
                body.width, body.height
            )));
        }
        let mask = body.decode().map_err(|e| SegmentError::Protocol(e.to_string()))?;
        Ok(Segmentation::from_mask(mask))
    }
}
