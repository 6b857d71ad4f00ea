//! Dataset ingestion: volumes are sliced to 2D, two-channel images composed
//! into RGB, everything zero-padded to a square and resized to the canonical
//! 1024×1024 grid. Label maps are stored as 16-bit single-channel images.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::mask::{InstanceLabelMap, MaskError};
use crate::sbr::stable_hash;

/// Side length of canonical samples.
pub const CANONICAL_SIDE: usize = 1024;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("expected 2 channels, got {0}")]
    ChannelCount(usize),
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),
    #[error("sample is {0}x{1}, expected a square")]
    NotSquare(usize, usize),
    #[error("image is {image:?} but labels are {labels:?}")]
    ShapeMismatch { image: (usize, usize), labels: (usize, usize) },
    #[error("instance id {0} does not fit in 16 bits")]
    IdOverflow(u32),
    #[error("no samples found under {0}")]
    EmptyDataset(PathBuf),
    #[error("duplicate sample path {0}")]
    DuplicatePath(PathBuf),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("invalid split rules: {0}")]
    InvalidRules(String),
    #[error("manifest line {line}: {reason}")]
    ManifestFormat { line: usize, reason: String },
    #[error("unsupported label image layout {0:?}")]
    LabelFormat(image::ColorType),
    #[error(transparent)]
    Grid(#[from] MaskError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interleaved (row-major, channel-last) intensity array.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * channels, "intensity buffer size");
        Self { width, height, channels, data }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let deep = matches!(
            img,
            DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
        );
        let scale = if deep { 1.0 / 257.0 } else { 1.0 };
        match img.color().channel_count() {
            1 => Self::new(w, h, 1, img.to_luma32f().into_raw().into_iter().map(|v| v * 255.0).collect()),
            2 => {
                let data = if deep {
                    img.to_luma_alpha16().into_raw().into_iter().map(|v| v as f32 * scale).collect()
                } else {
                    img.to_luma_alpha8().into_raw().into_iter().map(f32::from).collect()
                };
                Self::new(w, h, 2, data)
            }
            _ => Self::new(w, h, 3, img.to_rgb32f().into_raw().into_iter().map(|v| v * 255.0).collect()),
        }
    }
}

/// Record of the transforms applied between a raw file and a canonical sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    /// Raw dimensions before padding.
    pub original: (usize, usize),
    /// Columns appended on the right and rows appended at the bottom.
    pub pad: (usize, usize),
    /// Canonical side divided by the padded side.
    pub scale: f64,
    pub composed_channels: bool,
    /// Ids present before resizing that vanished after it.
    pub dropped_ids: Vec<u32>,
}

impl Provenance {
    fn new(source_id: &str, width: usize, height: usize) -> Self {
        Self {
            source_id: source_id.to_owned(),
            original: (width, height),
            pad: (0, 0),
            scale: 1.0,
            composed_channels: false,
            dropped_ids: Vec::new(),
        }
    }

    /// Maps a canonical pixel back to raw coordinates; `None` inside padding.
    pub fn canonical_to_raw(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        let map = |v: usize| ((v as f64 + 0.5) / self.scale - 0.5).round().max(0.0) as usize;
        let (rx, ry) = (map(x), map(y));
        (rx < self.original.0 && ry < self.original.1).then_some((rx, ry))
    }

    pub fn raw_to_canonical(&self, x: usize, y: usize) -> (usize, usize) {
        let map = |v: usize| ((v as f64 + 0.5) * self.scale - 0.5).round().max(0.0) as usize;
        (map(x), map(y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub image: IntensityImage,
    pub labels: InstanceLabelMap,
    pub source_id: String,
    /// Set when the labels contain no instance.
    pub empty_labels: bool,
    pub provenance: Provenance,
}

impl RawSample {
    pub fn new(image: IntensityImage, labels: InstanceLabelMap, source_id: &str) -> Result<Self, IngestError> {
        if (image.width, image.height) != labels.dims() {
            return Err(IngestError::ShapeMismatch { image: (image.width, image.height), labels: labels.dims() });
        }
        let provenance = Provenance::new(source_id, image.width, image.height);
        let empty_labels = labels.labels().iter().all(|&l| l == 0);
        Ok(Self { image, labels, source_id: source_id.to_owned(), empty_labels, provenance })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalSample {
    pub image: RgbImage,
    pub labels: InstanceLabelMap,
    pub provenance: Provenance,
}

/// A labeled stack of 2D planes, stored plane after plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u32>,
    pub source_id: String,
}

/// One raw sample per z-plane, with `_z<index>` appended to the source id.
pub fn slice_volume(volume: &Volume) -> Result<Vec<RawSample>, IngestError> {
    let plane = volume.width * volume.height;
    (0..volume.depth)
        .map(|z| {
            let data = volume.data[z * plane * volume.channels..(z + 1) * plane * volume.channels].to_vec();
            let labels = volume.labels[z * plane..(z + 1) * plane].to_vec();
            let image = IntensityImage::new(volume.width, volume.height, volume.channels, data);
            let labels = InstanceLabelMap::from_labels(volume.width, volume.height, labels)?;
            RawSample::new(image, labels, &format!("{}_z{:04}", volume.source_id, z))
        })
        .collect()
}

fn normalize_channel(img: &IntensityImage, c: usize) -> Vec<u8> {
    let values: Vec<f32> = (0..img.width * img.height).map(|i| img.data[i * img.channels + c]).collect();
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Channel 0 to red, channel 1 to green, blue zero; each min-max scaled to 0..=255.
pub fn compose_channels(sample: &RawSample) -> Result<RawSample, IngestError> {
    if sample.image.channels != 2 {
        return Err(IngestError::ChannelCount(sample.image.channels));
    }
    let r = normalize_channel(&sample.image, 0);
    let g = normalize_channel(&sample.image, 1);
    let data = r.iter().zip(&g).flat_map(|(&r, &g)| [f32::from(r), f32::from(g), 0.0]).collect();
    let mut out = sample.clone();
    out.image = IntensityImage::new(sample.image.width, sample.image.height, 3, data);
    out.provenance.composed_channels = true;
    Ok(out)
}

/// Zero-pads right and bottom up to `max(width, height)`.
pub fn pad_to_square(sample: &RawSample) -> RawSample {
    let (w, h) = sample.labels.dims();
    let side = w.max(h);
    if side == w && side == h {
        return sample.clone();
    }
    let c = sample.image.channels;
    let mut data = vec![0.0f32; side * side * c];
    for y in 0..h {
        let src = &sample.image.data[y * w * c..(y + 1) * w * c];
        data[y * side * c..y * side * c + w * c].copy_from_slice(src);
    }
    let labels = InstanceLabelMap::from_fn(side, side, |x, y| if x < w && y < h { sample.labels.get(x, y) } else { 0 });
    let mut out = sample.clone();
    out.image = IntensityImage::new(side, side, c, data);
    out.labels = labels;
    out.provenance.pad = (sample.provenance.pad.0 + side - w, sample.provenance.pad.1 + side - h);
    out
}

fn to_rgb_intensity(sample: &RawSample) -> Result<(IntensityImage, bool), IngestError> {
    match sample.image.channels {
        1 => {
            let data = sample.image.data.iter().flat_map(|&v| [v, v, v]).collect();
            Ok((IntensityImage::new(sample.image.width, sample.image.height, 3, data), false))
        }
        2 => Ok((compose_channels(sample)?.image, true)),
        3 => Ok((sample.image.clone(), false)),
        n => Err(IngestError::UnsupportedChannels(n)),
    }
}

// Pixel-center sample position in the source for destination index `d`.
#[inline]
fn source_coord(d: usize, inv_scale: f64) -> f64 {
    (d as f64 + 0.5) * inv_scale - 0.5
}

fn bilinear(img: &IntensityImage, side: usize) -> RgbImage {
    let n = img.width;
    let inv = n as f64 / side as f64;
    let axis: Vec<(usize, usize, f64)> = (0..side)
        .map(|d| {
            let s = source_coord(d, inv).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect();
    let mut out = RgbImage::new(side as u32, side as u32);
    for (y, &(y0, y1, fy)) in axis.iter().enumerate() {
        for (x, &(x0, x1, fx)) in axis.iter().enumerate() {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let top = img.at(x0, y0, c) as f64 * (1.0 - fx) + img.at(x1, y0, c) as f64 * fx;
                let bottom = img.at(x0, y1, c) as f64 * (1.0 - fx) + img.at(x1, y1, c) as f64 * fx;
                *v = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

/// Nearest-neighbour resize of a square label map to `side`.
pub fn resize_labels_nearest(labels: &InstanceLabelMap, side: usize) -> InstanceLabelMap {
    let n = labels.width();
    let inv = n as f64 / side as f64;
    let axis: Vec<usize> = (0..side).map(|d| (((d as f64 + 0.5) * inv).floor() as usize).min(n - 1)).collect();
    InstanceLabelMap::from_fn(side, side, |x, y| labels.get(axis[x], axis[y]))
}

/// Resizes a square sample to `side`: bilinear for the image, nearest-neighbour for labels.
pub fn resize_square(sample: &RawSample, side: usize) -> Result<CanonicalSample, IngestError> {
    let (w, h) = sample.labels.dims();
    if w != h {
        return Err(IngestError::NotSquare(w, h));
    }
    let (rgb, composed) = to_rgb_intensity(sample)?;
    let image = bilinear(&rgb, side);
    let labels = resize_labels_nearest(&sample.labels, side);
    let before: BTreeSet<u32> = sample.labels.instance_ids().into_iter().collect();
    let after: BTreeSet<u32> = labels.instance_ids().into_iter().collect();
    let mut provenance = sample.provenance.clone();
    provenance.scale = side as f64 / w as f64 * sample.provenance.scale;
    provenance.composed_channels |= composed;
    provenance.dropped_ids = before.difference(&after).copied().collect();
    Ok(CanonicalSample { image, labels, provenance })
}

pub fn resize_canonical(sample: &RawSample) -> Result<CanonicalSample, IngestError> {
    resize_square(sample, CANONICAL_SIDE)
}

/// Pads then resizes to the canonical grid.
pub fn canonicalize(sample: &RawSample) -> Result<CanonicalSample, IngestError> {
    resize_canonical(&pad_to_square(sample))
}

fn label_buffer(labels: &InstanceLabelMap) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>, IngestError> {
    let data = labels
        .labels()
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| IngestError::IdOverflow(l)))
        .collect::<Result<Vec<u16>, _>>()?;
    Ok(ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, data).expect("buffer sized from map"))
}

/// Encodes a label map as a 16-bit single-channel image (TIFF or PNG).
pub fn encode_label_map(labels: &InstanceLabelMap, format: ImageFormat) -> Result<Vec<u8>, IngestError> {
    let buf = label_buffer(labels)?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, format)?;
    Ok(out.into_inner())
}

pub fn decode_label_map(bytes: &[u8]) -> Result<InstanceLabelMap, IngestError> {
    let img = image::load_from_memory(bytes)?;
    labels_from_dynamic(img)
}

fn labels_from_dynamic(img: DynamicImage) -> Result<InstanceLabelMap, IngestError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels: Vec<u32> = match img {
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => return Err(IngestError::LabelFormat(other.color())),
    };
    Ok(InstanceLabelMap::from_labels(w, h, labels)?)
}

/// Writes a 16-bit label image; the container follows the extension (`.png`
/// or `.tif`, TIFF otherwise).
pub fn save_label_map(labels: &InstanceLabelMap, path: &Path) -> Result<(), IngestError> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
        _ => ImageFormat::Tiff,
    };
    fs::write(path, encode_label_map(labels, format)?)?;
    Ok(())
}

pub fn load_label_map(path: &Path) -> Result<InstanceLabelMap, IngestError> {
    decode_label_map(&fs::read(path)?)
}

pub fn load_raw_sample(image_path: &Path, labels_path: &Path, source_id: &str) -> Result<RawSample, IngestError> {
    let img = image::open(image_path)?;
    let labels = load_label_map(labels_path)?;
    RawSample::new(IntensityImage::from_dynamic(&img), labels, source_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "EM")]
    Em,
    #[serde(rename = "histopathology")]
    Histopathology,
    #[serde(rename = "medical")]
    Medical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest directory.
    pub path: PathBuf,
    pub split: Split,
    pub domain: Domain,
}

impl ManifestEntry {
    /// Stem of the image file.
    pub fn source_id(&self) -> String {
        self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRules {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub default_domain: Domain,
    /// Domain per dataset directory (first path component under the root).
    pub domains: BTreeMap<String, Domain>,
}

impl Default for SplitRules {
    fn default() -> Self {
        Self { train_fraction: 0.8, val_fraction: 0.0, seed: 0, default_domain: Domain::Lm, domains: BTreeMap::new() }
    }
}

impl SplitRules {
    fn assign(&self, source_id: &str) -> Split {
        let h = stable_hash(&[b"split", &self.seed.to_le_bytes(), source_id.as_bytes()]);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.train_fraction {
            Split::Train
        } else if u < self.train_fraction + self.val_fraction {
            Split::Val
        } else {
            Split::Test
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "tif", "tiff", "jpg", "jpeg"];

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Label file paired with an image under `.../images/<stem>.*`: `.../labels/<stem>.{tif,tiff,png}`.
pub fn label_path_for(image_path: &Path) -> Option<PathBuf> {
    let stem = image_path.file_stem()?;
    let labels_dir = image_path.parent()?.parent()?.join("labels");
    ["tif", "tiff", "png"].iter().map(|ext| labels_dir.join(stem).with_extension(ext)).find(|p| p.is_file())
}

impl Manifest {
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Result<Self, IngestError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.with_extension("")) {
                return Err(IngestError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Self { root, entries })
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn labels_path(&self, entry: &ManifestEntry) -> Result<PathBuf, IngestError> {
        let img = self.image_path(entry);
        label_path_for(&img).ok_or(IngestError::MissingFile(img))
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("entry serializes") + "\n").collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Reads a manifest; paths resolve against the manifest's directory and must exist.
    pub fn read(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| IngestError::ManifestFormat { line: i + 1, reason: e.to_string() })?;
            entries.push(entry);
        }
        let manifest = Self::new(root, entries)?;
        for e in &manifest.entries {
            let p = manifest.image_path(e);
            if !p.is_file() {
                return Err(IngestError::MissingFile(p));
            }
            manifest.labels_path(e)?;
        }
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Enumerates every image under an `images/` directory that has a matching
/// label file, in lexicographic path order, and assigns splits by a seeded
/// hash of the source id.
pub fn build_manifest(root: &Path, rules: &SplitRules) -> Result<Manifest, IngestError> {
    if !(0.0..=1.0).contains(&rules.train_fraction)
        || !(0.0..=1.0).contains(&rules.val_fraction)
        || rules.train_fraction + rules.val_fraction > 1.0
    {
        return Err(IngestError::InvalidRules(format!(
            "train {} + val {} must lie in [0, 1]",
            rules.train_fraction, rules.val_fraction
        )));
    }
    if !root.is_dir() {
        return Err(IngestError::MissingFile(root.to_path_buf()));
    }
    let mut images: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| has_image_extension(p))
        .filter(|p| p.parent().and_then(Path::file_name).is_some_and(|n| n == "images"))
        .filter(|p| label_path_for(p).is_some())
        .collect();
    images.sort();
    let entries = images
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(root).expect("walked under root").to_path_buf();
            let dataset = rel.components().next().map(|c| c.as_os_str().to_string_lossy().into_owned());
            let domain = dataset.and_then(|d| rules.domains.get(&d).copied()).unwrap_or(rules.default_domain);
            let source_id = rel.file_stem().unwrap().to_string_lossy().into_owned();
            ManifestEntry { split: rules.assign(&source_id), domain, path: rel }
        })
        .collect::<Vec<_>>();
    if entries.is_empty() {
        return Err(IngestError::EmptyDataset(root.to_path_buf()));
    }
    Manifest::new(root.to_path_buf(), entries)
}
