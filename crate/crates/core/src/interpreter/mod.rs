//! The per-pixel interpreter: an ensemble of shallow MLPs trained on a few
//! annotated samples, mapping concatenated backbone features to labels or
//! keypoint heat.

mod checkpoint;
mod heatmap;
mod mlp;
mod predict;
mod sampling;
mod schema;
mod train;

use thiserror::Error;

use crate::backbone::GeneratedSample;
use crate::keypoints::Keypoint;
use crate::raster::LabelMask;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use heatmap::{default_sigma, gaussian_heatmap, Heatmap};
pub use mlp::{param_count, softmax, BatchTargets, Head, InferenceMlp, InferenceScratch, MlpClassifier, MlpOutput};
pub use predict::{
    majority_vote, predict_keypoints, predict_segmentation, predict_segmentation_with, KeypointPrediction,
    MemberDistributions,
};
pub use sampling::{labeled_regions, sample_pixels, PixelSampling, Target};
pub use schema::{default_palette, LabelSchema, SchemaError, Task};
pub use train::{train_ensemble, InterpreterEnsemble, TrainConfig};

#[derive(Debug, Error)]
pub enum InterpreterError {
    #[error("feature dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in features or parameters")]
    NonFinite,
    #[error("no annotated samples")]
    NoAnnotations,
    #[error("sample {sample}: batch of {batch} cannot cover {regions} labeled regions")]
    BatchTooSmall {
        sample: usize,
        batch: usize,
        regions: usize,
    },
    #[error("sample {sample} has no labeled pixels")]
    NoLabeledPixels { sample: usize },
    #[error("member {member} diverged at step {step} (loss {loss})")]
    Diverged { member: usize, step: usize, loss: f64 },
    #[error("task mismatch: {0}")]
    Task(String),
    #[error("annotation does not fit the schema: {0}")]
    Schema(String),
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("keypoint ({x}, {y}) outside {width}x{height}")]
    KeypointBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// The human-provided side of a training sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    Mask(LabelMask),
    Keypoints(Vec<Keypoint>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub sample: GeneratedSample,
    pub annotation: Annotation,
}

impl AnnotatedSample {
    pub fn with_mask(sample: GeneratedSample, mask: LabelMask) -> Self {
        Self {
            sample,
            annotation: Annotation::Mask(mask),
        }
    }

    pub fn with_keypoints(sample: GeneratedSample, keypoints: Vec<Keypoint>) -> Self {
        Self {
            sample,
            annotation: Annotation::Keypoints(keypoints),
        }
    }

    /// Uses the backbone's ground truth as the annotation (toy backbone only).
    pub fn from_truth(sample: GeneratedSample, task: Task) -> Option<Self> {
        let truth = sample.truth.clone()?;
        Some(match task {
            Task::Segmentation => Self::with_mask(sample, truth.mask),
            Task::Keypoints => Self::with_keypoints(sample, truth.keypoints),
        })
    }
}
