//! Evaluation: confusion-matrix mIoU, keypoint PCK and heatmap L2, and
//! five-fold checkpoint selection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpreter::{Heatmap, LabelSchema};
use crate::keypoints::Keypoint;
use crate::raster::LabelMask;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{count} pixels carry labels outside the {labels}-label schema")]
    Schema { labels: usize, count: usize },
    #[error("keypoint `{0}` has no counterpart")]
    Unmatched(String),
    #[error("no ground-truth keypoints")]
    EmptyTruth,
    #[error("thresholds must be positive and finite")]
    Threshold,
    #[error("five-fold selection needs at least 5 items, got {0}")]
    TooFewItems(usize),
    #[error("no checkpoints to select from")]
    NoCheckpoints,
    #[error("metrics record: {0}")]
    Record(String),
}

/// Rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: usize) -> Self {
        Self {
            labels,
            counts: vec![0; labels * labels],
        }
    }

    pub fn from_masks(pred: &LabelMask, truth: &LabelMask, labels: usize) -> Result<Self, MetricsError> {
        let mut m = Self::new(labels);
        m.accumulate(pred, truth)?;
        Ok(m)
    }

    pub fn accumulate(&mut self, pred: &LabelMask, truth: &LabelMask) -> Result<(), MetricsError> {
        if (pred.width, pred.height) != (truth.width, truth.height) {
            return Err(MetricsError::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.width, pred.height, truth.width, truth.height
            )));
        }
        let bad = pred.out_of_schema(self.labels) + truth.out_of_schema(self.labels);
        if bad > 0 {
            return Err(MetricsError::Schema {
                labels: self.labels,
                count: bad,
            });
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            self.counts[t as usize * self.labels + p as usize] += 1;
        }
        Ok(())
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.labels + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU of label `c`, or `None` when it appears in neither mask.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let row: u64 = (0..self.labels).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.labels).map(|t| self.get(t, c)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Per-label IoU and their mean over labels present in either mask.
    pub fn miou(&self, ignore_background: bool) -> MiouReport {
        let per_label: Vec<Option<f64>> = (0..self.labels)
            .map(|c| if ignore_background && c == 0 { None } else { self.iou(c) })
            .collect();
        let present: Vec<f64> = per_label.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        };
        MiouReport { per_label, mean }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for labels excluded from the mean.
    pub per_label: Vec<Option<f64>>,
    /// `None` when no label qualifies.
    pub mean: Option<f64>,
}

pub fn miou(
    pred: &LabelMask,
    truth: &LabelMask,
    schema: &LabelSchema,
    ignore_background: bool,
) -> Result<MiouReport, MetricsError> {
    Ok(ConfusionMatrix::from_masks(pred, truth, schema.num_labels())?.miou(ignore_background))
}

/// Thresholds in percent of the longer image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckConfig {
    pub thresholds: Vec<f64>,
}

impl Default for PckConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![5.0, 10.0, 15.0, 25.0],
        }
    }
}

/// Percentage of truth keypoints within each threshold, in `config` order.
pub fn pck(
    pred: &[Keypoint],
    truth: &[Keypoint],
    height: usize,
    width: usize,
    config: &PckConfig,
) -> Result<Vec<f64>, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    if config.thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(MetricsError::Threshold);
    }
    let by_name: HashMap<&str, &Keypoint> = pred.iter().map(|k| (k.name.as_str(), k)).collect();
    if let Some(extra) = pred.iter().find(|p| !truth.iter().any(|t| t.name == p.name)) {
        return Err(MetricsError::Unmatched(extra.name.clone()));
    }
    let distances = truth
        .iter()
        .map(|t| {
            let p = by_name
                .get(t.name.as_str())
                .ok_or_else(|| MetricsError::Unmatched(t.name.clone()))?;
            Ok((p.x - t.x).hypot(p.y - t.y))
        })
        .collect::<Result<Vec<f64>, MetricsError>>()?;
    let side = height.max(width) as f64;
    Ok(config
        .thresholds
        .iter()
        .map(|t| {
            let limit = t / 100.0 * side;
            let hits = distances.iter().filter(|&&d| d <= limit).count();
            100.0 * hits as f64 / distances.len() as f64
        })
        .collect())
}

/// Mean squared difference over every pixel of every keypoint map.
pub fn l2_heatmap(pred: &[Heatmap], truth: &[Heatmap]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::Shape(format!("{} vs {} heatmaps", pred.len(), truth.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if (p.width, p.height) != (t.width, t.height) || p.data.len() != t.data.len() {
            return Err(MetricsError::Shape(format!(
                "{}x{} vs {}x{}",
                p.width, p.height, t.width, t.height
            )));
        }
        sum += p.data.iter().zip(&t.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += p.data.len();
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    /// Checkpoint picked on each validation fold.
    pub selected: Vec<usize>,
    /// Metric of the picked checkpoint on the other four folds.
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over the five folds.
    pub std: f64,
}

/// Contiguous fold `f` of `n` items: `[f*n/5, (f+1)*n/5)`.
pub fn fold_range(n: usize, f: usize) -> std::ops::Range<usize> {
    f * n / 5..(f + 1) * n / 5
}

/// Five-fold checkpoint selection. `metric(checkpoint, items)` evaluates a
/// checkpoint on a subset of item indices; higher is better and ties go to the
/// lower checkpoint index.
pub fn five_fold_select<F>(items: usize, checkpoints: usize, mut metric: F) -> Result<FoldResult, MetricsError>
where
    F: FnMut(usize, &[usize]) -> f64,
{
    if items < 5 {
        return Err(MetricsError::TooFewItems(items));
    }
    if checkpoints == 0 {
        return Err(MetricsError::NoCheckpoints);
    }
    let mut selected = Vec::with_capacity(5);
    let mut scores = Vec::with_capacity(5);
    for f in 0..5 {
        let fold: Vec<usize> = fold_range(items, f).collect();
        let rest: Vec<usize> = (0..items).filter(|i| !fold.contains(i)).collect();
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..checkpoints {
            let v = metric(c, &fold);
            if v > best.1 {
                best = (c, v);
            }
        }
        selected.push(best.0);
        scores.push(metric(best.0, &rest));
    }
    let mean = scores.iter().sum::<f64>() / 5.0;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    Ok(FoldResult {
        selected,
        scores,
        mean,
        std,
    })
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
}

pub const METRICS_HEADER: &str = "# metrics v1\tdataset\tmetric\tvalue\tstd";

pub fn write_metric_records(records: &[MetricRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let std = r.std.map_or_else(|| "-".to_string(), |s| format!("{s:?}"));
        out.push_str(&format!("{}\t{}\t{:?}\t{}\n", r.dataset, r.metric, r.value, std));
    }
    out
}

pub fn parse_metric_records(text: &str) -> Result<Vec<MetricRecord>, MetricsError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(METRICS_HEADER) {
        return Err(MetricsError::Record("missing header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || MetricsError::Record(format!("line {}", i + 2));
            if f.len() != 4 || f[0].is_empty() || f[1].is_empty() {
                return Err(bad());
            }
            let value = f[2].parse::<f64>().map_err(|_| bad())?;
            let std = match f[3] {
                "-" => None,
                s => Some(s.parse::<f64>().map_err(|_| bad())?),
            };
            Ok(MetricRecord {
                dataset: f[0].into(),
                metric: f[1].into(),
                value,
                std,
            })
        })
        .collect()
}
