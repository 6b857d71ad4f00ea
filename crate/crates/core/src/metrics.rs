//! Dice, IoU and segmentation accuracy at an IoU threshold, with one-to-one
//! instance matching and dataset-level aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, InstanceLabelMap};

/// IoU threshold used throughout the evaluation protocol.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("threshold {0} outside [0.5, 1)")]
    InvalidThreshold(f64),
    #[error("no rows to aggregate")]
    EmptyInput,
    #[error("malformed report: {0}")]
    Parse(String),
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::DimensionMismatch(a, b));
    }
    Ok(())
}

fn overlap_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize, usize), MetricsError> {
    check_dims(pred.dims(), gt.dims())?;
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    Ok((inter, np, ng))
}

fn dice_from_counts(inter: usize, np: usize, ng: usize) -> f64 {
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

fn iou_from_counts(inter: usize, np: usize, ng: usize) -> f64 {
    let union = np + ng - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `2|P ∩ G| / (|P| + |G|)`; 1.0 when both are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    Ok(dice_from_counts(i, p, g))
}

/// `|P ∩ G| / |P ∪ G|`; 1.0 when both are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    Ok(iou_from_counts(i, p, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMatch {
    pub gt_id: u32,
    pub pred_id: u32,
    pub iou: f64,
}

/// Pixel areas of each instance and of each (gt, pred) intersection.
#[derive(Debug, Clone, Default)]
struct Overlaps {
    gt_area: BTreeMap<u32, usize>,
    pred_area: BTreeMap<u32, usize>,
    inter: HashMap<(u32, u32), usize>,
}

impl Overlaps {
    fn compute(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<Self, MetricsError> {
        check_dims(pred.dims(), gt.dims())?;
        let mut o = Self::default();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g != 0 {
                *o.gt_area.entry(g).or_default() += 1;
            }
            if p != 0 {
                *o.pred_area.entry(p).or_default() += 1;
            }
            if g != 0 && p != 0 {
                *o.inter.entry((g, p)).or_default() += 1;
            }
        }
        Ok(o)
    }

    fn pair(&self, gt: u32, pred: u32) -> (usize, usize, usize) {
        (
            self.inter.get(&(gt, pred)).copied().unwrap_or(0),
            self.pred_area[&pred],
            self.gt_area[&gt],
        )
    }

    fn matches(&self, threshold: f64) -> Vec<InstanceMatch> {
        let mut candidates: Vec<InstanceMatch> = self
            .inter
            .keys()
            .map(|&(gt_id, pred_id)| {
                let (i, p, g) = self.pair(gt_id, pred_id);
                InstanceMatch { gt_id, pred_id, iou: iou_from_counts(i, p, g) }
            })
            .filter(|m| m.iou > threshold)
            .collect();
        candidates.sort_by(|a, b| {
            b.iou.total_cmp(&a.iou).then(a.gt_id.cmp(&b.gt_id)).then(a.pred_id.cmp(&b.pred_id))
        });
        let mut used_gt = HashSet::new();
        let mut used_pred = HashSet::new();
        candidates
            .into_iter()
            .filter(|m| {
                if used_gt.contains(&m.gt_id) || used_pred.contains(&m.pred_id) {
                    return false;
                }
                used_gt.insert(m.gt_id);
                used_pred.insert(m.pred_id);
                true
            })
            .collect()
    }
}

fn check_threshold(threshold: f64) -> Result<(), MetricsError> {
    if !(0.5..1.0).contains(&threshold) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    Ok(())
}

/// Greedy one-to-one matching by descending IoU over pairs with IoU strictly
/// above `threshold`. At thresholds of 0.5 or more each instance has at most
/// one candidate partner, so the greedy result is also a maximum matching.
pub fn match_instances(
    pred: &InstanceLabelMap,
    gt: &InstanceLabelMap,
    threshold: f64,
) -> Result<Vec<InstanceMatch>, MetricsError> {
    check_threshold(threshold)?;
    Ok(Overlaps::compute(pred, gt)?.matches(threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationAccuracy {
    pub sa: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl SegmentationAccuracy {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let denom = tp + fp + fn_;
        let sa = if denom == 0 { 1.0 } else { tp as f64 / denom as f64 };
        Self { sa, tp, fp, fn_ }
    }
}

/// `TP / (TP + FP + FN)` over matched instances; 1.0 when both maps are empty.
pub fn segmentation_accuracy(
    pred: &InstanceLabelMap,
    gt: &InstanceLabelMap,
    threshold: f64,
) -> Result<SegmentationAccuracy, MetricsError> {
    check_threshold(threshold)?;
    let o = Overlaps::compute(pred, gt)?;
    let tp = o.matches(threshold).len();
    Ok(SegmentationAccuracy::from_counts(tp, o.pred_area.len() - tp, o.gt_area.len() - tp))
}

/// Evaluation of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: String,
    pub n_gt: usize,
    pub n_pred: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Mean over ground-truth instances of the Dice against the matched prediction.
    pub dice: f64,
    pub sa: f64,
    /// `(gt_id, dice)`, ascending id; unmatched instances score 0.
    pub instance_dice: Vec<(u32, f64)>,
}

/// Scores one image. Each GT instance is compared with its matched prediction;
/// an image without GT instances scores Dice 1.0 only if nothing was predicted.
pub fn evaluate_image(
    image_id: &str,
    pred: &InstanceLabelMap,
    gt: &InstanceLabelMap,
    threshold: f64,
) -> Result<ImageEval, MetricsError> {
    check_threshold(threshold)?;
    let o = Overlaps::compute(pred, gt)?;
    let matches = o.matches(threshold);
    let partner: HashMap<u32, u32> = matches.iter().map(|m| (m.gt_id, m.pred_id)).collect();
    let instance_dice: Vec<(u32, f64)> = o
        .gt_area
        .keys()
        .map(|&g| {
            let d = partner.get(&g).map_or(0.0, |&p| {
                let (i, np, ng) = o.pair(g, p);
                dice_from_counts(i, np, ng)
            });
            (g, d)
        })
        .collect();
    let tp = matches.len();
    let sa = SegmentationAccuracy::from_counts(tp, o.pred_area.len() - tp, o.gt_area.len() - tp);
    let dice = if instance_dice.is_empty() {
        if o.pred_area.is_empty() { 1.0 } else { 0.0 }
    } else {
        instance_dice.iter().map(|(_, d)| d).sum::<f64>() / instance_dice.len() as f64
    };
    Ok(ImageEval {
        image_id: image_id.to_owned(),
        n_gt: o.gt_area.len(),
        n_pred: o.pred_area.len(),
        tp,
        fp: sa.fp,
        fn_: sa.fn_,
        dice,
        sa: sa.sa,
        instance_dice,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDice {
    pub image_id: String,
    pub gt_id: u32,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_instance: Vec<InstanceDice>,
    pub per_image: Vec<ImageEval>,
    /// Unweighted mean of per-image Dice.
    pub dataset_dice: f64,
    /// Unweighted mean of per-image SA.
    pub dataset_sa: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Images that could not be evaluated; excluded from every aggregate.
    pub failures: Vec<ImageFailure>,
}

pub const AGGREGATION_NOTE: &str = "aggregation=unweighted-mean-over-images";

/// Folds per-image rows into dataset aggregates.
pub fn aggregate(rows: Vec<ImageEval>) -> Result<EvalReport, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = rows.len() as f64;
    let dataset_dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
    let dataset_sa = rows.iter().map(|r| r.sa).sum::<f64>() / n;
    let per_instance = rows
        .iter()
        .flat_map(|r| {
            r.instance_dice.iter().map(|&(gt_id, dice)| InstanceDice { image_id: r.image_id.clone(), gt_id, dice })
        })
        .collect();
    Ok(EvalReport {
        per_instance,
        tp: rows.iter().map(|r| r.tp).sum(),
        fp: rows.iter().map(|r| r.fp).sum(),
        fn_: rows.iter().map(|r| r.fn_).sum(),
        per_image: rows,
        dataset_dice,
        dataset_sa,
        failures: Vec::new(),
    })
}

/// Ratios are printed with three decimals.
pub fn fmt_ratio(r: f64) -> String {
    format!("{r:.3}")
}

pub const CSV_HEADER: &str = "image_id,n_gt,n_pred,tp,fp,fn,dice,sa";

impl EvalReport {
    /// One row per image followed by a `# dataset` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# {AGGREGATION_NOTE}").unwrap();
        writeln!(out, "{CSV_HEADER}").unwrap();
        for r in &self.per_image {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.image_id,
                r.n_gt,
                r.n_pred,
                r.tp,
                r.fp,
                r.fn_,
                fmt_ratio(r.dice),
                fmt_ratio(r.sa)
            )
            .unwrap();
        }
        writeln!(
            out,
            "# dataset images={} errored={} tp={} fp={} fn={} dice={} sa={}",
            self.per_image.len(),
            self.failures.len(),
            self.tp,
            self.fp,
            self.fn_,
            fmt_ratio(self.dataset_dice),
            fmt_ratio(self.dataset_sa)
        )
        .unwrap();
        out
    }

    pub fn to_text_table(&self) -> String {
        let id_width = self.per_image.iter().map(|r| r.image_id.len()).chain([8]).max().unwrap_or(8);
        let mut out = String::new();
        writeln!(
            out,
            "{:<id_width$}  {:>5}  {:>6}  {:>4}  {:>4}  {:>4}  {:>6}  {:>6}",
            "image", "n_gt", "n_pred", "tp", "fp", "fn", "Dice", "SA"
        )
        .unwrap();
        for r in &self.per_image {
            writeln!(
                out,
                "{:<id_width$}  {:>5}  {:>6}  {:>4}  {:>4}  {:>4}  {:>6}  {:>6}",
                r.image_id,
                r.n_gt,
                r.n_pred,
                r.tp,
                r.fp,
                r.fn_,
                fmt_ratio(r.dice),
                fmt_ratio(r.sa)
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<id_width$}  {:>5}  {:>6}  {:>4}  {:>4}  {:>4}  {:>6}  {:>6}",
            "dataset",
            self.per_image.iter().map(|r| r.n_gt).sum::<usize>(),
            self.per_image.iter().map(|r| r.n_pred).sum::<usize>(),
            self.tp,
            self.fp,
            self.fn_,
            fmt_ratio(self.dataset_dice),
            fmt_ratio(self.dataset_sa)
        )
        .unwrap();
        if !self.failures.is_empty() {
            writeln!(out, "errored images: {}", self.failures.len()).unwrap();
            for f in &self.failures {
                writeln!(out, "  {}: {}", f.image_id, f.reason).unwrap();
            }
        }
        out
    }
}

/// Values read back from [`EvalReport::to_csv`] output, at printed precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub rows: Vec<ParsedRow>,
    pub images: usize,
    pub errored: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub dice: f64,
    pub sa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRow {
    pub image_id: String,
    pub n_gt: usize,
    pub n_pred: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub dice: f64,
    pub sa: f64,
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, MetricsError> {
    s.trim().parse().map_err(|_| MetricsError::Parse(format!("bad {what}: {s:?}")))
}

pub fn parse_csv(text: &str) -> Result<ParsedReport, MetricsError> {
    let mut rows = Vec::new();
    let mut summary: Option<HashMap<String, String>> = None;
    let mut saw_header = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# dataset ") {
            summary = Some(
                rest.split_whitespace()
                    .filter_map(|kv| kv.split_once('='))
                    .map(|(k, v)| (k.to_owned(), v.to_owned()))
                    .collect(),
            );
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            if line != CSV_HEADER {
                return Err(MetricsError::Parse(format!("unexpected header {line:?}")));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(MetricsError::Parse(format!("expected 8 fields: {line:?}")));
        }
        rows.push(ParsedRow {
            image_id: f[0].to_owned(),
            n_gt: parse_field(f[1], "n_gt")?,
            n_pred: parse_field(f[2], "n_pred")?,
            tp: parse_field(f[3], "tp")?,
            fp: parse_field(f[4], "fp")?,
            fn_: parse_field(f[5], "fn")?,
            dice: parse_field(f[6], "dice")?,
            sa: parse_field(f[7], "sa")?,
        });
    }
    let s = summary.ok_or_else(|| MetricsError::Parse("missing dataset summary".into()))?;
    let get = |k: &str| s.get(k).map(String::as_str).ok_or_else(|| MetricsError::Parse(format!("summary lacks {k}")));
    Ok(ParsedReport {
        rows,
        images: parse_field(get("images")?, "images")?,
        errored: parse_field(get("errored")?, "errored")?,
        tp: parse_field(get("tp")?, "tp")?,
        fp: parse_field(get("fp")?, "fp")?,
        fn_: parse_field(get("fn")?, "fn")?,
        dice: parse_field(get("dice")?, "dice")?,
        sa: parse_field(get("sa")?, "sa")?,
    })
}
