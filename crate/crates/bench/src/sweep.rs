use std::fmt::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use promptseg_core::ingest::Manifest;
use promptseg_core::metrics::fmt_ratio;
use promptseg_core::segmenter::Segmenter;
use serde::{Deserialize, Serialize};

use crate::run::{run_eval_with, BenchError, RunConfig};

/// The (P, N) grid of the inference ablation.
pub const DEFAULT_SWEEP: [(usize, usize); 6] = [(1, 0), (1, 3), (3, 0), (3, 3), (5, 0), (5, 3)];

pub const SWEEP_HEADER: &str = "n_positive,n_negative,dice,sa";

/// How per-instance prompt streams are keyed; changing N never moves positives.
pub const SEED_DERIVATION: &str = "positives: hash(seed, image, instance, P); negatives: hash(seed, image, instance, P, N)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_positive: usize,
    pub n_negative: usize,
    pub dice: f64,
    pub sa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub seed: u64,
    pub backend: String,
    pub seed_derivation: String,
    /// Seconds since the Unix epoch at completion.
    pub timestamp: u64,
    /// Evaluated and errored image counts, one entry per row.
    pub evaluated: Vec<usize>,
    pub errored: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub meta: SweepMeta,
}

impl SweepTable {
    pub fn total_errored(&self) -> usize {
        self.meta.errored.iter().sum()
    }

    /// Deterministic: the timestamp is kept out of the CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# seed={} backend={}", self.meta.seed, self.meta.backend).unwrap();
        writeln!(out, "{SWEEP_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.n_positive, r.n_negative, fmt_ratio(r.dice), fmt_ratio(r.sa)).unwrap();
        }
        out
    }

    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:>3}  {:>3}  {:>6}  {:>6}", "P", "N", "Dice", "SA").unwrap();
        for r in &self.rows {
            writeln!(out, "{:>3}  {:>3}  {:>6}  {:>6}", r.n_positive, r.n_negative, fmt_ratio(r.dice), fmt_ratio(r.sa))
                .unwrap();
        }
        out
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("meta serializes")
    }
}

/// Reads rows back from [`SweepTable::to_csv`] output, at printed precision.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>, BenchError> {
    let bad = |m: String| BenchError::InvalidConfig(format!("sweep csv: {m}"));
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some(SWEEP_HEADER) => {}
        other => return Err(bad(format!("expected header, got {other:?}"))),
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields in {l:?}")));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad count {s:?}")));
            let ratio = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad ratio {s:?}")));
            Ok(SweepRow { n_positive: num(f[0])?, n_negative: num(f[1])?, dice: ratio(f[2])?, sa: ratio(f[3])? })
        })
        .collect()
}

/// Parses `"P,N;P,N;..."`.
pub fn parse_pairs(s: &str) -> Result<Vec<(usize, usize)>, BenchError> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (p, n) = pair
                .split_once(',')
                .ok_or_else(|| BenchError::InvalidConfig(format!("pair {pair:?} is not P,N")))?;
            let parse = |v: &str| {
                v.trim().parse::<usize>().map_err(|_| BenchError::InvalidConfig(format!("bad count {v:?} in {pair:?}")))
            };
            Ok((parse(p)?, parse(n)?))
        })
        .collect()
}

pub fn ablation_sweep_with(manifest: &Manifest, segmenter: &dyn Segmenter, cfg: &RunConfig) -> Result<SweepTable, BenchError> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.sweep.len());
    let mut evaluated = Vec::with_capacity(cfg.sweep.len());
    let mut errored = Vec::with_capacity(cfg.sweep.len());
    for &(p, n) in &cfg.sweep {
        let report = run_eval_with(manifest, segmenter, &cfg.options((p, n)))?;
        rows.push(SweepRow { n_positive: p, n_negative: n, dice: report.dataset_dice, sa: report.dataset_sa });
        evaluated.push(report.per_image.len());
        errored.push(report.failures.len());
    }
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    Ok(SweepTable {
        rows,
        meta: SweepMeta {
            seed: cfg.sbr.seed,
            backend: segmenter.id().to_owned(),
            seed_derivation: SEED_DERIVATION.to_owned(),
            timestamp,
            evaluated,
            errored,
        },
    })
}

pub fn ablation_sweep(cfg: &RunConfig) -> Result<SweepTable, BenchError> {
    cfg.validate()?;
    let manifest = Manifest::read(&cfg.manifest)?;
    let segmenter = cfg.backend.build(cfg.strict);
    ablation_sweep_with(&manifest, segmenter.as_ref(), cfg)
}
