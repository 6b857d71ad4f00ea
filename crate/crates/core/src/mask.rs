//! Pixel-grid geometry: binary masks, instance label maps, morphology with a
//! 3×3 square structuring element, exact Euclidean distance fields, centroids
//! and 8-connected component labeling.
//!
//! Grids are row-major with the origin at the top-left; `x` is the column and
//! `y` the row.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask has no foreground pixel")]
    EmptySource,
    #[error("grid dimensions must be at least 1x1 (got {width}x{height})")]
    EmptyGrid { width: usize, height: usize },
    #[error("buffer length {len} does not match {width}x{height}")]
    BufferSize { width: usize, height: usize, len: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid distance band [{lo}, {hi}]")]
    InvalidBand { lo: f64, hi: f64 },
}

/// A pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

impl Point {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<(), MaskError> {
    if width == 0 || height == 0 {
        return Err(MaskError::EmptyGrid { width, height });
    }
    if width * height != len {
        return Err(MaskError::BufferSize { width, height, len });
    }
    Ok(())
}

/// A boolean grid holding one instance or one prediction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    /// An all-background mask.
    ///
    /// # Panics
    /// If either dimension is zero.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        let mut m = Self::new(width, height);
        m.bits.fill(true);
        m
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        check_dims(width, height, bits.len())?;
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    /// Builds a mask from foreground points; out-of-bounds points are ignored.
    pub fn from_points(width: usize, height: usize, points: &[Point]) -> Self {
        let mut m = Self::new(width, height);
        for p in points {
            if p.x < width && p.y < height {
                m.set(p.x, p.y, true);
            }
        }
        m
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn contains(&self, p: Point) -> bool {
        p.x < self.width && p.y < self.height && self.get(p.x, p.y)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixels in row-major order.
    pub fn points(&self) -> Vec<Point> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| Point::new(i % self.width, i / self.width))
            .collect()
    }

    pub fn complement(&self) -> Self {
        Self { width: self.width, height: self.height, bits: self.bits.iter().map(|b| !b).collect() }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self, MaskError> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { width: self.width, height: self.height, bits })
    }

    pub fn and(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a || b)
    }

    /// Pixels in `self` but not in `other`.
    pub fn minus(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn same_dims(&self, other: &Self) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Inclusive bounding box `(min, max)` of the foreground.
    pub fn bounding_box(&self) -> Option<(Point, Point)> {
        let mut it = self.points().into_iter();
        let first = it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        Some((lo, hi))
    }
}

/// A grid of instance ids; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceLabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "label map dimensions must be positive");
        Self { width, height, labels: vec![0; width * height] }
    }

    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self, MaskError> {
        check_dims(width, height, labels.len())?;
        Ok(Self { width, height, labels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.labels[y * width + x] = f(x, y);
            }
        }
        m
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, id: u32) {
        self.labels[y * self.width + x] = id;
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    /// Distinct non-zero ids in ascending order.
    pub fn instance_ids(&self) -> Vec<u32> {
        self.labels.iter().copied().filter(|&l| l != 0).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ids().len()
    }

    pub fn mask_of(&self, id: u32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l == id).collect(),
        }
    }

    /// Union of all instances.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }

    /// Writes `id` into every foreground pixel of `mask`.
    pub fn paint(&mut self, mask: &BinaryMask, id: u32) -> Result<(), MaskError> {
        if mask.dims() != self.dims() {
            return Err(MaskError::DimensionMismatch(self.width, self.height, mask.width, mask.height));
        }
        for (l, &b) in self.labels.iter_mut().zip(&mask.bits) {
            if b {
                *l = id;
            }
        }
        Ok(())
    }

    pub fn max_id(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Exact Euclidean distances in pixel units, with the squared integer distance
/// kept alongside so comparisons can be done without rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    squared: Vec<u64>,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn squared(&self, x: usize, y: usize) -> u64 {
        self.squared[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn squared_values(&self) -> &[u64] {
        &self.squared
    }
}

// One 3×3 pass. `erode` treats out-of-grid pixels as background; `dilate`
// ignores them.
fn morph_step(mask: &BinaryMask, erode: bool) -> BinaryMask {
    let (w, h) = mask.dims();
    let src = &mask.bits;
    // Horizontal pass followed by a vertical pass; the square element is separable.
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let left = if x > 0 { Some(row[x - 1]) } else { None };
            let right = if x + 1 < w { Some(row[x + 1]) } else { None };
            horiz[y * w + x] = if erode {
                row[x] && left.unwrap_or(false) && right.unwrap_or(false)
            } else {
                row[x] || left.unwrap_or(false) || right.unwrap_or(false)
            };
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let c = horiz[y * w + x];
            let up = if y > 0 { Some(horiz[(y - 1) * w + x]) } else { None };
            let down = if y + 1 < h { Some(horiz[(y + 1) * w + x]) } else { None };
            out[y * w + x] = if erode {
                c && up.unwrap_or(false) && down.unwrap_or(false)
            } else {
                c || up.unwrap_or(false) || down.unwrap_or(false)
            };
        }
    }
    BinaryMask { width: w, height: h, bits: out }
}

/// Erodes `mask` `iterations` times with a 3×3 square element.
pub fn erode(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let mut out = mask.clone();
    for _ in 0..iterations {
        if out.is_empty() {
            break;
        }
        out = morph_step(&out, true);
    }
    out
}

/// Dilates `mask` `iterations` times with a 3×3 square element, clipped to the grid.
pub fn dilate(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let mut out = mask.clone();
    for _ in 0..iterations {
        if out.is_empty() {
            break;
        }
        out = morph_step(&out, false);
    }
    out
}

// Squared distance standing in for "no source in this column"; larger than any
// in-grid squared distance.
fn unreachable_column(w: usize, h: usize) -> i64 {
    (w + h) as i64
}

/// Exact Euclidean distance from every pixel to the nearest foreground pixel.
///
/// Two-pass separable squared-distance transform (column scan, then a lower
/// envelope of parabolas per row), all in integer arithmetic.
pub fn distance_to_mask(mask: &BinaryMask) -> Result<DistanceField, MaskError> {
    if mask.is_empty() {
        return Err(MaskError::EmptySource);
    }
    let (w, h) = mask.dims();
    let inf = unreachable_column(w, h);

    // Column pass: g[y][x] = vertical distance to the nearest source in column x.
    let mut g = vec![inf; w * h];
    for x in 0..w {
        if mask.get(x, 0) {
            g[x] = 0;
        }
        for y in 1..h {
            g[y * w + x] = if mask.get(x, y) { 0 } else { (g[(y - 1) * w + x] + 1).min(inf) };
        }
        for y in (0..h.saturating_sub(1)).rev() {
            let below = g[(y + 1) * w + x];
            if below + 1 < g[y * w + x] {
                g[y * w + x] = below + 1;
            }
        }
    }

    // Row pass: minimise (x - u)^2 + g(u)^2 over u.
    let mut squared = vec![0u64; w * h];
    let mut s = vec![0usize; w];
    let mut t = vec![0i64; w];
    for y in 0..h {
        let gr = &g[y * w..(y + 1) * w];
        let f = |x: i64, u: usize| -> i64 {
            let d = x - u as i64;
            d * d + gr[u] * gr[u]
        };
        let sep = |i: usize, u: usize| -> i64 {
            let (ii, uu) = (i as i64, u as i64);
            (uu * uu - ii * ii + gr[u] * gr[u] - gr[i] * gr[i]).div_euclid(2 * (uu - ii))
        };
        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let wsep = 1 + sep(s[q as usize], u);
                if wsep < w as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = wsep;
                }
            }
        }
        for x in (0..w).rev() {
            let xi = x as i64;
            squared[y * w + x] = f(xi, s[q as usize]) as u64;
            if xi == t[q as usize] {
                q -= 1;
            }
        }
    }

    let values = squared.iter().map(|&d| (d as f64).sqrt()).collect();
    Ok(DistanceField { width: w, height: h, squared, values })
}

/// Rounded mean foreground position, half away from zero, clamped into the grid.
pub fn centroid(mask: &BinaryMask) -> Result<Point, MaskError> {
    let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
    for p in mask.points() {
        sx += p.x as u64;
        sy += p.y as u64;
        n += 1;
    }
    if n == 0 {
        return Err(MaskError::EmptySource);
    }
    let mx = (sx as f64 / n as f64).round() as usize;
    let my = (sy as f64 / n as f64).round() as usize;
    Ok(Point::new(mx.min(mask.width - 1), my.min(mask.height - 1)))
}

/// Background pixels whose distance to `mask` lies in `[lo, hi]`.
pub fn boundary_band(mask: &BinaryMask, lo: f64, hi: f64) -> Result<BinaryMask, MaskError> {
    if !(lo > 0.0 && lo <= hi) {
        return Err(MaskError::InvalidBand { lo, hi });
    }
    let field = distance_to_mask(mask)?;
    let bits = field
        .values
        .iter()
        .zip(&mask.bits)
        .map(|(&d, &inside)| !inside && lo <= d && d <= hi)
        .collect();
    Ok(BinaryMask { width: mask.width, height: mask.height, bits })
}

/// Pixels outside both `mask` and its dilation by `dilate_iterations`.
pub fn external_region(mask: &BinaryMask, dilate_iterations: usize) -> BinaryMask {
    let grown = dilate(mask, dilate_iterations);
    let bits = grown.bits.iter().zip(&mask.bits).map(|(&g, &m)| !g && !m).collect();
    BinaryMask { width: mask.width, height: mask.height, bits }
}

/// 8-connected components labeled `1..=k` in order of first row-major encounter.
pub fn connected_components(mask: &BinaryMask) -> InstanceLabelMap {
    let (w, h) = mask.dims();
    let mut out = InstanceLabelMap::new(w, h);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || out.labels[start] != 0 {
            continue;
        }
        next += 1;
        out.labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && out.labels[j] == 0 {
                        out.labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    out
}
