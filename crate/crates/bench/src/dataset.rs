use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use promptseg_core::ingest::{
    canonicalize, load_raw_sample, pad_to_square, resize_square, save_label_map, Domain, IngestError, Manifest,
    ManifestEntry, Split,
};
use promptseg_core::mask::InstanceLabelMap;
use promptseg_core::sbr::stable_hash;
use promptseg_core::segmenter::synth::{synth_generate, SynthSpec};

use crate::run::BenchError;

/// One image ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub image_id: String,
    pub image: RgbImage,
    pub labels: InstanceLabelMap,
}

/// Manifest-relative path without extension, with `/` separators.
pub fn image_id_for(entry: &ManifestEntry) -> String {
    let p = entry.path.with_extension("");
    p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Pads to square; resizes to the canonical side when `canonical`, otherwise
/// keeps the padded resolution.
pub fn load_sample(manifest: &Manifest, entry: &ManifestEntry, canonical: bool) -> Result<EvalSample, IngestError> {
    let image_id = image_id_for(entry);
    let raw = load_raw_sample(&manifest.image_path(entry), &manifest.labels_path(entry)?, &image_id)?;
    let sample = if canonical {
        canonicalize(&raw)?
    } else {
        let padded = pad_to_square(&raw);
        let side = padded.labels.width();
        resize_square(&padded, side)?
    };
    Ok(EvalSample { image_id, image: sample.image, labels: sample.labels })
}

/// Writes `n_images` synthetic images under `dir/images`, labels under
/// `dir/labels`, and `dir/manifest.jsonl`. Image `i` uses a seed derived from
/// `spec.seed` and `i`.
pub fn write_synth_dataset(dir: &Path, spec: &SynthSpec, n_images: usize) -> Result<PathBuf, BenchError> {
    if n_images == 0 {
        return Err(BenchError::InvalidConfig("synthetic dataset needs at least one image".into()));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let seed = stable_hash(&[b"synth", &spec.seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
        let (image, labels) = synth_generate(&SynthSpec { seed, ..*spec })?;
        let stem = format!("synth_{i:04}");
        let rel = PathBuf::from("images").join(format!("{stem}.png"));
        image.save(dir.join(&rel)).map_err(IngestError::from)?;
        save_label_map(&labels, &dir.join("labels").join(format!("{stem}.tif")))?;
        entries.push(ManifestEntry { path: rel, split: Split::Test, domain: Domain::Lm });
    }
    let manifest = Manifest::new(dir.to_path_buf(), entries)?;
    let path = dir.join("manifest.jsonl");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { side: 128, n_instances: 2, radius_max: 16.0, seed: 4, ..Default::default() };
        let path = write_synth_dataset(dir.path(), &spec, 3).unwrap();
        let manifest = Manifest::read(&path).unwrap();
        assert_eq!(manifest.len(), 3);
        let s = load_sample(&manifest, &manifest.entries[1], false).unwrap();
        assert_eq!(s.image_id, "images/synth_0001");
        assert_eq!(s.labels.dims(), (128, 128));
        assert_eq!(s.labels.instance_ids(), vec![1, 2]);
        let seed = stable_hash(&[b"synth", &4u64.to_le_bytes(), &1u64.to_le_bytes()]);
        let (img, labels) = synth_generate(&SynthSpec { seed, ..spec }).unwrap();
        assert_eq!(s.labels, labels);
        assert_eq!(s.image, img);
        let c = load_sample(&manifest, &manifest.entries[0], true).unwrap();
        assert_eq!(c.labels.dims(), (1024, 1024));
    }
}
