//! A small, deterministic replica of the vision-language alignment data flow:
//! pixel shuffle over channel-last tensors, visual/text token concatenation and
//! separation, layer norm, a two-layer projection, and the α/β affine that
//! produces a dense prompt embedding. Parameters are always supplied by the
//! caller; nothing here is trained.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VlsaError {
    #[error("pixel shuffle by {ratio} is not integral for dims {dims:?}")]
    IncompatibleDims { dims: [usize; 4], ratio: ShuffleRatio },
    #[error("ratio {0} is not an integer or the reciprocal of one")]
    UnsupportedRatio(ShuffleRatio),
    #[error("token width {left} does not match {right}")]
    WidthMismatch { left: usize, right: usize },
    #[error("sequence has no visual tokens")]
    NoVisualTokens,
    #[error("token conversion needs batch size 1, got {0}")]
    BatchSize(usize),
    #[error("invalid shape: {0}")]
    Shape(String),
}

/// Reduced rational `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShuffleRatio {
    num: usize,
    den: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl ShuffleRatio {
    pub const ONE: Self = Self { num: 1, den: 1 };
    pub const HALF: Self = Self { num: 1, den: 2 };

    /// # Panics
    /// If either term is zero.
    pub fn new(num: usize, den: usize) -> Self {
        assert!(num > 0 && den > 0, "ratio terms must be positive");
        let g = gcd(num, den);
        Self { num: num / g, den: den / g }
    }

    pub fn inverse(self) -> Self {
        Self { num: self.den, den: self.num }
    }

    pub fn num(self) -> usize {
        self.num
    }

    pub fn den(self) -> usize {
        self.den
    }
}

impl fmt::Display for ShuffleRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 { write!(f, "{}", self.num) } else { write!(f, "{}/{}", self.num, self.den) }
    }
}

/// Dense `(batch, height, width, channels)` array, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl ToyTensor {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self, VlsaError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VlsaError::Shape(format!("zero dimension in {dims:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(VlsaError::Shape(format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Result<Self, VlsaError> {
        let [b, h, w, c] = dims;
        let mut data = Vec::with_capacity(b * h * w * c);
        for ib in 0..b {
            for ih in 0..h {
                for iw in 0..w {
                    for ic in 0..c {
                        data.push(f([ib, ih, iw, ic]));
                    }
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, b: usize, h: usize, w: usize, c: usize) -> usize {
        let [_, dh, dw, dc] = self.dims;
        ((b * dh + h) * dw + w) * dc + c
    }

    #[inline]
    pub fn at(&self, b: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.offset(b, h, w, c)]
    }
}

/// Rearranges `(B, H, W, C)` into `(B, H·r, W·r, C/r²)`.
///
/// For an integer ratio `k` each output `k×k` block takes its values from a
/// contiguous group of `k²` input channels; a ratio of `1/k` is the exact
/// inverse, folding each `k×k` block into channels.
pub fn pixel_shuffle(t: &ToyTensor, ratio: ShuffleRatio) -> Result<ToyTensor, VlsaError> {
    let [b, h, w, c] = t.dims;
    if ratio == ShuffleRatio::ONE {
        return Ok(t.clone());
    }
    if ratio.num != 1 && ratio.den != 1 {
        return Err(VlsaError::UnsupportedRatio(ratio));
    }
    let incompatible = || VlsaError::IncompatibleDims { dims: t.dims, ratio };
    if ratio.den == 1 {
        let k = ratio.num;
        if c % (k * k) != 0 {
            return Err(incompatible());
        }
        let oc = c / (k * k);
        ToyTensor::from_fn([b, h * k, w * k, oc], |[ib, y, x, ch]| {
            t.at(ib, y / k, x / k, ch * k * k + (y % k) * k + x % k)
        })
    } else {
        let k = ratio.den;
        if h % k != 0 || w % k != 0 {
            return Err(incompatible());
        }
        ToyTensor::from_fn([b, h / k, w / k, c * k * k], |[ib, y, x, ch]| {
            let (src_c, sub) = (ch / (k * k), ch % (k * k));
            t.at(ib, y * k + sub / k, x * k + sub % k, src_c)
        })
    }
}

/// Counts of visual and text tokens, plus the spatial grid of the visual part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_visual: usize,
    pub n_text: usize,
    /// `(rows, cols)` of the visual tokens.
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    width: usize,
    data: Vec<f64>,
    layout: TokenLayout,
}

impl TokenSequence {
    /// Opaque text tokens.
    pub fn text(width: usize, tokens: Vec<Vec<f64>>) -> Result<Self, VlsaError> {
        let n = tokens.len();
        let mut data = Vec::with_capacity(n * width);
        for t in tokens {
            if t.len() != width {
                return Err(VlsaError::WidthMismatch { left: t.len(), right: width });
            }
            data.extend(t);
        }
        Ok(Self { width, data, layout: TokenLayout { n_visual: 0, n_text: n, grid: (0, 0) } })
    }

    /// Visual tokens from a batch-1 tensor, flattened row-major over the grid.
    pub fn visual(t: &ToyTensor) -> Result<Self, VlsaError> {
        let [b, h, w, c] = t.dims;
        if b != 1 {
            return Err(VlsaError::BatchSize(b));
        }
        Ok(Self { width: c, data: t.data.clone(), layout: TokenLayout { n_visual: h * w, n_text: 0, grid: (h, w) } })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.layout.n_visual + self.layout.n_text
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width.max(1)).take(self.len())
    }

    /// Visual tokens back into a `(1, rows, cols, width)` tensor.
    pub fn to_tensor(&self) -> Result<ToyTensor, VlsaError> {
        let (h, w) = self.layout.grid;
        if self.layout.n_visual == 0 {
            return Err(VlsaError::NoVisualTokens);
        }
        ToyTensor::new([1, h, w, self.width], self.data[..self.layout.n_visual * self.width].to_vec())
    }
}

/// Visual tokens first, then text tokens.
pub fn concat_tokens(visual: &TokenSequence, text: &TokenSequence) -> Result<TokenSequence, VlsaError> {
    if text.layout.n_text > 0 && visual.width != text.width {
        return Err(VlsaError::WidthMismatch { left: visual.width, right: text.width });
    }
    let mut data = visual.data[..visual.layout.n_visual * visual.width].to_vec();
    data.extend_from_slice(&text.data[..text.layout.n_text * text.width]);
    Ok(TokenSequence {
        width: visual.width,
        data,
        layout: TokenLayout {
            n_visual: visual.layout.n_visual,
            n_text: visual.layout.n_text + text.layout.n_text,
            grid: visual.layout.grid,
        },
    })
}

/// The leading visual tokens, with their grid.
pub fn split_visual_tokens(hidden: &TokenSequence) -> Result<TokenSequence, VlsaError> {
    let n = hidden.layout.n_visual;
    if n == 0 {
        return Err(VlsaError::NoVisualTokens);
    }
    Ok(TokenSequence {
        width: hidden.width,
        data: hidden.data[..n * hidden.width].to_vec(),
        layout: TokenLayout { n_visual: n, n_text: 0, grid: hidden.layout.grid },
    })
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-token normalisation with population variance.
pub fn layer_norm(tokens: &TokenSequence, gain: &[f64], bias: &[f64]) -> Result<TokenSequence, VlsaError> {
    let w = tokens.width;
    for v in [gain, bias] {
        if v.len() != w {
            return Err(VlsaError::WidthMismatch { left: v.len(), right: w });
        }
    }
    let mut data = Vec::with_capacity(tokens.data.len());
    for t in tokens.tokens() {
        let mean = t.iter().sum::<f64>() / w as f64;
        let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        data.extend(t.iter().enumerate().map(|(i, v)| (v - mean) * inv * gain[i] + bias[i]));
    }
    Ok(TokenSequence { width: w, data, layout: tokens.layout })
}

/// Row-major `rows × cols` matrix applied as `y = x · M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        Self { rows, cols, data }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.cols).map(|j| (0..self.rows).map(|i| x[i] * self.data[i * self.cols + j]).sum()).collect()
    }
}

/// `x · σ(x)`, the smooth gate between the projection layers.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlsaParams {
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    /// Shuffled token width → hidden width.
    pub w1: Matrix,
    /// Hidden width → prompt embedding width.
    pub w2: Matrix,
    pub alpha: f64,
    pub beta: f64,
    pub shuffle_ratio: ShuffleRatio,
}

impl VlsaParams {
    /// Identity norm, `alpha = 1`, `beta = 0`, ratio 1/2, hidden width equal to the
    /// shuffled token width.
    pub fn identity_init(token_width: usize, prompt_dim: usize, w1: impl Fn(usize, usize) -> f64, w2: impl Fn(usize, usize) -> f64) -> Self {
        let ratio = ShuffleRatio::HALF;
        let width = token_width * ratio.den * ratio.den / (ratio.num * ratio.num);
        Self {
            norm_gain: vec![1.0; width],
            norm_bias: vec![0.0; width],
            w1: Matrix::from_fn(width, width, w1),
            w2: Matrix::from_fn(width, prompt_dim, w2),
            alpha: 1.0,
            beta: 0.0,
            shuffle_ratio: ratio,
        }
    }
}

/// Grid of per-cell prompt vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEmbed {
    pub grid: (usize, usize),
    pub dim: usize,
    pub vectors: Vec<f64>,
}

impl DenseEmbed {
    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let i = r * self.grid.1 + c;
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Separates visual tokens, reshuffles them onto the prompt grid, normalises,
/// projects through two layers, then applies `alpha · (·) + beta`.
pub fn vlsa_forward(hidden: &TokenSequence, params: &VlsaParams) -> Result<DenseEmbed, VlsaError> {
    let visual = split_visual_tokens(hidden)?;
    let shuffled = pixel_shuffle(&visual.to_tensor()?, params.shuffle_ratio)?;
    let tokens = layer_norm(&TokenSequence::visual(&shuffled)?, &params.norm_gain, &params.norm_bias)?;
    if params.w1.rows != tokens.width() {
        return Err(VlsaError::WidthMismatch { left: params.w1.rows, right: tokens.width() });
    }
    if params.w2.rows != params.w1.cols {
        return Err(VlsaError::WidthMismatch { left: params.w2.rows, right: params.w1.cols });
    }
    let mut vectors = Vec::with_capacity(tokens.len() * params.w2.cols);
    for t in tokens.tokens() {
        let hidden: Vec<f64> = params.w1.apply(t).into_iter().map(silu).collect();
        vectors.extend(params.w2.apply(&hidden).into_iter().map(|v| params.alpha * v + params.beta));
    }
    Ok(DenseEmbed { grid: tokens.layout().grid, dim: params.w2.cols, vectors })
}

/// The learned constant broadcast to every cell, used when no vision-language
/// features are injected.
pub fn baseline_dense_embed(grid: (usize, usize), embedding: &[f64]) -> DenseEmbed {
    let vectors = std::iter::repeat_n(embedding, grid.0 * grid.1).flatten().copied().collect();
    DenseEmbed { grid, dim: embedding.len(), vectors }
}
