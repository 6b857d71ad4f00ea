//! Seeded region competition: object seeds (positives) and background seeds
//! (negatives plus the image border) each grow a minimum-cost path field; a
//! pixel is object iff its object cost is strictly below its background cost.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use image::RgbImage;

use super::{validate_prompts, SegmentError, SegmentRequest, Segmentation, Segmenter};
use crate::mask::{BinaryMask, Point};
use crate::sbr::PromptSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionCompeteParams {
    /// Constant cost added to every 4-neighbour step.
    pub step_cost: f64,
    /// Box-filter radius applied to the intensity before competition; 0 disables.
    pub smooth_radius: usize,
}

impl Default for RegionCompeteParams {
    fn default() -> Self {
        Self { step_cost: 0.5, smooth_radius: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    cost: f64,
    index: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn intensity(image: &RgbImage) -> Vec<f64> {
    image.pixels().map(|p| (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2])) / 3.0).collect()
}

/// Mean over the in-grid part of each (2r+1)x(2r+1) window.
fn box_smooth(values: &[f64], width: usize, height: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return values.to_vec();
    }
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let (outer, inner) = if along_x { (height, width) } else { (width, height) };
        let mut out = vec![0.0; src.len()];
        let mut prefix = vec![0.0; inner + 1];
        for o in 0..outer {
            let at = |i: usize| if along_x { o * width + i } else { i * width + o };
            for i in 0..inner {
                prefix[i + 1] = prefix[i] + src[at(i)];
            }
            for i in 0..inner {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius + 1).min(inner);
                out[at(i)] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            }
        }
        out
    };
    let tmp = pass(values, true);
    pass(&tmp, false)
}

fn cost_field(intensity: &[f64], width: usize, height: usize, seeds: &[usize], step_cost: f64) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; width * height];
    let mut heap = BinaryHeap::with_capacity(seeds.len() * 4);
    for &s in seeds {
        if dist[s] > 0.0 {
            dist[s] = 0.0;
            heap.push(Entry { cost: 0.0, index: s });
        }
    }
    while let Some(Entry { cost, index }) = heap.pop() {
        if cost > dist[index] {
            continue;
        }
        let (x, y) = (index % width, index / width);
        let mut relax = |n: usize| {
            let c = cost + (intensity[n] - intensity[index]).abs() + step_cost;
            if c < dist[n] {
                dist[n] = c;
                heap.push(Entry { cost: c, index: n });
            }
        };
        if x > 0 {
            relax(index - 1);
        }
        if x + 1 < width {
            relax(index + 1);
        }
        if y > 0 {
            relax(index - width);
        }
        if y + 1 < height {
            relax(index + width);
        }
    }
    dist
}

/// Returns the object mask and the per-pixel object cost.
pub fn region_compete_segment(
    image: &RgbImage,
    prompts: &PromptSet,
    params: &RegionCompeteParams,
) -> Result<Segmentation, SegmentError> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    validate_prompts(w, h, prompts)?;
    let idx = |p: &Point| p.y * w + p.x;
    let positives = BinaryMask::from_points(w, h, &prompts.positives);

    let mut bg_seeds: Vec<usize> = prompts.negatives.iter().map(idx).collect();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !positives.get(x, y) {
                bg_seeds.push(y * w + x);
            }
        }
    }
    let obj_seeds: Vec<usize> = prompts.positives.iter().map(idx).collect();

    let values = box_smooth(&intensity(image), w, h, params.smooth_radius);
    let d_obj = cost_field(&values, w, h, &obj_seeds, params.step_cost);
    let d_bg = cost_field(&values, w, h, &bg_seeds, params.step_cost);

    let mut mask = BinaryMask::from_fn(w, h, |x, y| d_obj[y * w + x] < d_bg[y * w + x]);
    for p in &prompts.positives {
        mask.set(p.x, p.y, true);
    }
    for p in &prompts.negatives {
        mask.set(p.x, p.y, false);
    }
    Ok(Segmentation { mask, cost: Some(d_obj) })
}

#[derive(Debug, Clone, Default)]
pub struct RegionCompete {
    pub params: RegionCompeteParams,
}

impl RegionCompete {
    pub fn new(params: RegionCompeteParams) -> Self {
        Self { params }
    }
}

impl Segmenter for RegionCompete {
    fn id(&self) -> &str {
        "baseline"
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Segmentation, SegmentError> {
        region_compete_segment(request.image, request.prompts, &self.params)
    }
}
