//! Ensemble inference over a whole feature volume. Rows are processed in
//! blocks; blocks are independent, so the pixel loop is data-parallel and the
//! result does not depend on the worker count.

use rayon::prelude::*;

use super::heatmap::Heatmap;
use super::mlp::{Head, InferenceMlp, InferenceScratch};
use super::train::InterpreterEnsemble;
use super::{InterpreterError, Task};
use crate::feature_volume::{FeatureVolume, UpsampleMode};
use crate::raster::LabelMask;
use crate::uncertainty::argmax;

/// Pixels per inference block (whole rows are grouped up to this size).
const BLOCK_PIXELS: usize = 2048;

/// Softmax outputs of every member at every pixel, laid out
/// `[pixel][member][class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberDistributions {
    pub width: usize,
    pub height: usize,
    pub members: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl MemberDistributions {
    /// The `members x classes` block of pixel `i`.
    pub fn pixel(&self, i: usize) -> &[f64] {
        let stride = self.members * self.classes;
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// Most frequent entry of `votes` (labels `< classes`); ties go to the
/// lowest label.
pub fn majority_vote(votes: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (label, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = label;
        }
    }
    best
}

fn check_dim(ensemble: &InterpreterEnsemble, volume: &FeatureVolume) -> Result<(), InterpreterError> {
    if volume.dim() != ensemble.feature_dim() {
        return Err(InterpreterError::Dimension {
            expected: ensemble.feature_dim(),
            got: volume.dim(),
        });
    }
    Ok(())
}

/// Runs every member over row blocks, handing `(first_pixel, rows, outputs)`
/// to `consume`, where `outputs[m]` holds member `m`'s raw head values for
/// the block. Returns the per-block results in row order.
fn run_blocks<T, F>(
    ensemble: &InterpreterEnsemble,
    volume: &FeatureVolume,
    mode: UpsampleMode,
    consume: F,
) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &[Vec<f32>]) -> T + Sync,
{
    let nets: Vec<InferenceMlp> = ensemble.members().iter().map(|m| m.to_inference()).collect();
    let (w, h, d) = (volume.width(), volume.height(), volume.dim());
    let rows_per_block = (BLOCK_PIXELS / w).max(1);
    let starts: Vec<usize> = (0..h).step_by(rows_per_block).collect();
    starts
        .into_par_iter()
        .map_init(
            || (InferenceScratch::default(), Vec::new()),
            |(scratch, x), y0| {
                let y1 = (y0 + rows_per_block).min(h);
                let pixels = (y1 - y0) * w;
                x.resize(pixels * d, 0.0);
                for y in y0..y1 {
                    let off = (y - y0) * w * d;
                    volume.fill_row(y, mode, &mut x[off..off + w * d]);
                }
                let outputs: Vec<Vec<f32>> = nets
                    .iter()
                    .map(|net| net.forward_rows(x, pixels, scratch).to_vec())
                    .collect();
                consume(pixels, &outputs)
            },
        )
        .collect()
}

/// Majority-vote label mask plus every member's distribution at every pixel.
pub fn predict_segmentation(
    ensemble: &InterpreterEnsemble,
    volume: &FeatureVolume,
) -> Result<(LabelMask, MemberDistributions), InterpreterError> {
    predict_segmentation_with(ensemble, volume, ensemble.config().upsample)
}

pub fn predict_segmentation_with(
    ensemble: &InterpreterEnsemble,
    volume: &FeatureVolume,
    mode: UpsampleMode,
) -> Result<(LabelMask, MemberDistributions), InterpreterError> {
    if ensemble.schema().task() != Task::Segmentation {
        return Err(InterpreterError::Task("keypoint ensemble passed to segmentation".into()));
    }
    check_dim(ensemble, volume)?;
    let n = ensemble.len();
    let c = ensemble.schema().output_dim();
    let blocks = run_blocks(ensemble, volume, mode, |pixels, outputs| {
        let mut labels = Vec::with_capacity(pixels);
        let mut probs = Vec::with_capacity(pixels * n * c);
        let mut votes = vec![0usize; n];
        for p in 0..pixels {
            for (m, out) in outputs.iter().enumerate() {
                let logits = &out[p * c..(p + 1) * c];
                let start = probs.len();
                let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let mut sum = 0.0;
                for &l in logits {
                    let e = (l as f64 - max).exp();
                    sum += e;
                    probs.push(e);
                }
                let row = &mut probs[start..];
                row.iter_mut().for_each(|v| *v /= sum);
                votes[m] = argmax(row);
            }
            labels.push(majority_vote(&votes, c) as u8);
        }
        (labels, probs)
    });
    let (w, h) = (volume.width(), volume.height());
    let mut labels = Vec::with_capacity(w * h);
    let mut data = Vec::with_capacity(w * h * n * c);
    for (l, p) in blocks {
        labels.extend_from_slice(&l);
        data.extend_from_slice(&p);
    }
    let mask = LabelMask::new(w, h, labels).expect("one label per pixel");
    Ok((
        mask,
        MemberDistributions {
            width: w,
            height: h,
            members: n,
            classes: c,
            data,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointPrediction {
    /// Ensemble-mean heat per keypoint, schema order.
    pub heatmaps: Vec<Heatmap>,
    /// Argmax pixel and peak value per keypoint.
    pub locations: Vec<(usize, usize, f64)>,
    /// `member_heats[m]` is member `m`'s clamped heat, `[pixel][keypoint]`.
    pub member_heats: Vec<Vec<f64>>,
}

/// Mean of clamped member heats, split into one map per keypoint.
pub(crate) fn average_heat(member_heats: &[Vec<f64>], width: usize, height: usize, k: usize) -> KeypointPrediction {
    let n = member_heats.len() as f64;
    let heatmaps: Vec<Heatmap> = (0..k)
        .map(|j| Heatmap {
            width,
            height,
            data: (0..width * height)
                .map(|p| member_heats.iter().map(|m| m[p * k + j]).sum::<f64>() / n)
                .collect(),
        })
        .collect();
    let locations = heatmaps.iter().map(Heatmap::argmax).collect();
    KeypointPrediction {
        heatmaps,
        locations,
        member_heats: member_heats.to_vec(),
    }
}

pub fn predict_keypoints(
    ensemble: &InterpreterEnsemble,
    volume: &FeatureVolume,
) -> Result<KeypointPrediction, InterpreterError> {
    if ensemble.schema().task() != Task::Keypoints || ensemble.members()[0].head() != Head::Heat {
        return Err(InterpreterError::Task("segmentation ensemble passed to keypoint prediction".into()));
    }
    check_dim(ensemble, volume)?;
    let n = ensemble.len();
    let blocks = run_blocks(ensemble, volume, ensemble.config().upsample, |_, outputs| {
        outputs
            .iter()
            .map(|o| o.iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    });
    let mut member_heats = vec![Vec::new(); n];
    for block in blocks {
        for (m, heat) in block.into_iter().enumerate() {
            member_heats[m].extend_from_slice(&heat);
        }
    }
    let k = ensemble.schema().output_dim();
    Ok(average_heat(&member_heats, volume.width(), volume.height(), k))
}
