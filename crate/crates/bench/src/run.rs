use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use promptseg_core::ingest::{IngestError, Manifest};
use promptseg_core::mask::InstanceLabelMap;
use promptseg_core::metrics::{aggregate, evaluate_image, EvalReport, ImageEval, ImageFailure, MetricsError, DEFAULT_IOU_THRESHOLD};
use promptseg_core::sbr::{generate_prompts, PromptRecord, PromptSet, SbrConfig, SbrError};
use promptseg_core::segmenter::synth::SynthError;
use promptseg_core::segmenter::{RegionCompete, RemoteSegmenter, SegmentRequest, Segmentation, Segmenter, Strict};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{load_sample, EvalSample};

pub const REMOTE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Sbr(#[from] SbrError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("every image failed; first: {0}")]
    AllFailed(String),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Baseline,
    Remote(String),
}

impl FromStr for BackendSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            _ => match s.strip_prefix("remote:") {
                Some(url) if !url.is_empty() => Ok(Self::Remote(url.to_owned())),
                _ => Err(BenchError::InvalidConfig(format!("backend must be baseline or remote:<url>, got {s:?}"))),
            },
        }
    }
}

impl BackendSpec {
    pub fn id(&self) -> String {
        match self {
            Self::Baseline => "baseline".into(),
            Self::Remote(url) => format!("remote:{url}"),
        }
    }

    pub fn build(&self, strict: bool) -> Box<dyn Segmenter> {
        let inner: Box<dyn Segmenter> = match self {
            Self::Baseline => Box::new(RegionCompete::default()),
            Self::Remote(url) => Box::new(RemoteSegmenter::new(url.clone(), REMOTE_TIMEOUT)),
        };
        if strict {
            Box::new(Strict(inner))
        } else {
            inner
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub backend: BackendSpec,
    pub sbr: SbrConfig,
    pub sweep: Vec<(usize, usize)>,
    pub out: Option<PathBuf>,
    pub workers: usize,
    /// Resize to the canonical grid instead of evaluating at padded native size.
    pub canonical: bool,
    /// Reject backend masks that break prompt containment.
    pub strict: bool,
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            backend: BackendSpec::Baseline,
            sbr: SbrConfig::default(),
            sweep: crate::sweep::DEFAULT_SWEEP.to_vec(),
            out: None,
            workers: 1,
            canonical: false,
            strict: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.sweep.is_empty() {
            return Err(BenchError::InvalidConfig("sweep must contain at least one pair".into()));
        }
        if let Some(&(p, n)) = self.sweep.iter().find(|(p, _)| *p == 0) {
            return Err(BenchError::InvalidConfig(format!("pair ({p},{n}) needs at least one positive point")));
        }
        if self.workers == 0 {
            return Err(BenchError::InvalidConfig("workers must be at least 1".into()));
        }
        self.sbr.validate()?;
        Ok(())
    }

    pub fn options(&self, pair: (usize, usize)) -> EvalOptions {
        EvalOptions { sbr: self.sbr.clone().with_points(pair.0, pair.1), workers: self.workers, canonical: self.canonical }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub sbr: SbrConfig,
    pub workers: usize,
    pub canonical: bool,
}

/// Each mask becomes predicted instance `k + 1` (prompt order). A pixel
/// claimed by several masks goes to the lowest cost, then the lowest index.
pub fn assemble_prediction(width: usize, height: usize, segs: &[Segmentation]) -> InstanceLabelMap {
    let mut labels = InstanceLabelMap::new(width, height);
    let mut best = vec![f64::INFINITY; width * height];
    for (k, seg) in segs.iter().enumerate() {
        let id = k as u32 + 1;
        for (i, &on) in seg.mask.bits().iter().enumerate() {
            if !on {
                continue;
            }
            let c = seg.cost.as_ref().map_or(0.0, |c| c[i]);
            if labels.labels()[i] == 0 || c < best[i] {
                best[i] = c;
                labels.labels_mut()[i] = id;
            }
        }
    }
    labels
}

fn evaluate_sample(sample: &EvalSample, segmenter: &dyn Segmenter, sbr: &SbrConfig) -> Result<ImageEval, String> {
    let prompts: Vec<PromptSet> = generate_prompts(&sample.labels, &sample.image_id, sbr).map_err(|e| e.to_string())?;
    let segs = prompts
        .iter()
        .map(|p| {
            let req = SegmentRequest { image_id: &sample.image_id, image: &sample.image, prompts: p };
            segmenter.segment(&req).map_err(|e| format!("instance {}: {e}", p.instance_id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (w, h) = sample.labels.dims();
    if let Some(bad) = segs.iter().find(|s| s.mask.dims() != (w, h)) {
        return Err(format!("backend returned a {:?} mask for a {w}x{h} image", bad.mask.dims()));
    }
    let pred = assemble_prediction(w, h, &segs);
    evaluate_image(&sample.image_id, &pred, &sample.labels, DEFAULT_IOU_THRESHOLD).map_err(|e| e.to_string())
}

/// Evaluates every manifest image; per-image failures are recorded in the
/// report, never dropped.
pub fn run_eval_with(manifest: &Manifest, segmenter: &dyn Segmenter, opts: &EvalOptions) -> Result<EvalReport, BenchError> {
    opts.sbr.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.workers.max(1)).build()?;
    let results: Vec<(String, Result<ImageEval, String>)> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|entry| {
                let id = crate::dataset::image_id_for(entry);
                let outcome = load_sample(manifest, entry, opts.canonical)
                    .map_err(|e| e.to_string())
                    .and_then(|s| evaluate_sample(&s, segmenter, &opts.sbr));
                (id, outcome)
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (image_id, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(reason) => failures.push(ImageFailure { image_id, reason }),
        }
    }
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    failures.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if rows.is_empty() {
        let first = failures.first().map_or_else(|| "empty manifest".to_owned(), |f| format!("{}: {}", f.image_id, f.reason));
        return Err(BenchError::AllFailed(first));
    }
    let mut report = aggregate(rows)?;
    report.failures = failures;
    Ok(report)
}

pub fn run_eval(cfg: &RunConfig, pair: (usize, usize)) -> Result<EvalReport, BenchError> {
    cfg.validate()?;
    if pair.0 == 0 {
        return Err(BenchError::InvalidConfig("pair needs at least one positive point".into()));
    }
    let manifest = Manifest::read(&cfg.manifest)?;
    let segmenter = cfg.backend.build(cfg.strict);
    run_eval_with(&manifest, segmenter.as_ref(), &cfg.options(pair))
}

/// Prompt records for every instance of every image, in manifest order.
/// Returns the records and the per-image failures.
pub fn generate_records(
    manifest: &Manifest,
    opts: &EvalOptions,
) -> Result<(Vec<PromptRecord>, Vec<ImageFailure>), BenchError> {
    opts.sbr.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.workers.max(1)).build()?;
    let results: Vec<(String, Result<Vec<PromptRecord>, String>)> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|entry| {
                let id = crate::dataset::image_id_for(entry);
                let out = load_sample(manifest, entry, opts.canonical).map_err(|e| e.to_string()).and_then(|s| {
                    generate_prompts(&s.labels, &s.image_id, &opts.sbr)
                        .map(|sets| sets.iter().map(|p| PromptRecord::new(&s.image_id, p)).collect())
                        .map_err(|e| e.to_string())
                });
                (id, out)
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (image_id, r) in results {
        match r {
            Ok(rs) => records.extend(rs),
            Err(reason) => failures.push(ImageFailure { image_id, reason }),
        }
    }
    Ok((records, failures))
}
