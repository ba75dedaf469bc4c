//! The dataset factory: generate samples from consecutive seeds, label them
//! with the ensemble, score their uncertainty, filter, and write everything to
//! disk with a manifest. Runs are chunked so an interrupted run leaves a
//! partial manifest that [`resume`] completes.

mod manifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, GeneratedSample};
use crate::hash::sha256_hex;
use crate::interpreter::{
    encode_checkpoint, predict_keypoints, predict_segmentation, InterpreterEnsemble, InterpreterError, Task,
};
use crate::keypoints::{write_keypoint_records, KeypointRecord};
use crate::lock::{DirLock, LockError};
use crate::raster::RasterError;
use crate::uncertainty::{
    filter_by_uncertainty, heat_variance_score, score_image, write_uncertainty_log, AuditEntry, ImageScore,
    UncertaintyError,
};

pub use manifest::{
    validate_manifest, BackboneInfo, DatasetManifest, PairRecord, ResumeToken, Timing, ValidationReport, Violation,
    MANIFEST_FILE, MANIFEST_VERSION, UNCERTAINTY_LOG,
};

#[derive(Debug, Error)]
pub enum FactoryError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Interpreter(#[from] InterpreterError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error("backbone features have dimension {backbone}, ensemble expects {ensemble}")]
    Dimension { backbone: usize, ensemble: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(serde_json::Error),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("keypoint filtering needs the heat-variance score enabled (filter ratio {0})")]
    KeypointFilter(f64),
    #[error("invalid request: {0}")]
    Request(String),
    /// A failure after some pairs were written; the partial manifest on disk
    /// carries `token`.
    #[error("run stopped after {} pairs (resume token saved): {source}", token.next_index)]
    Partial {
        token: ResumeToken,
        #[source]
        source: Box<FactoryError>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOptions {
    pub count: usize,
    pub filter_ratio: f64,
    pub seed: u64,
    /// Pairs generated between manifest checkpoints.
    pub chunk_size: usize,
    /// Stop (with a partial manifest) once this many pairs exist.
    pub stop_after: Option<usize>,
    /// Score keypoint images by member heat variance.
    pub heat_variance: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            count: 10_000,
            filter_ratio: 0.1,
            seed: 0,
            chunk_size: 64,
            stop_after: None,
            heat_variance: false,
        }
    }
}

pub fn ensemble_hash(ensemble: &InterpreterEnsemble) -> String {
    sha256_hex(&encode_checkpoint(ensemble))
}

pub fn image_path(id: u64) -> String {
    format!("images/{id:06}.png")
}

pub fn mask_path(id: u64) -> String {
    format!("masks/{id:06}.png")
}

pub fn keypoint_path(id: u64) -> String {
    format!("keypoints/{id:06}.txt")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FactoryError + '_ {
    move |source| FactoryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<String, FactoryError> {
    let path = dir.join(rel);
    std::fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(sha256_hex(bytes))
}

/// Labels and scores one generated sample.
pub struct LabeledSample {
    pub sample: GeneratedSample,
    pub annotation: Annotated,
    pub image_score: f64,
}

pub enum Annotated {
    Mask(crate::raster::LabelMask),
    Keypoints(Vec<KeypointRecord>),
}

pub fn label_sample(
    sample: GeneratedSample,
    ensemble: &InterpreterEnsemble,
    heat_variance: bool,
) -> Result<LabeledSample, FactoryError> {
    if sample.features.dim() != ensemble.feature_dim() {
        return Err(FactoryError::Dimension {
            backbone: sample.features.dim(),
            ensemble: ensemble.feature_dim(),
        });
    }
    let id = sample.latent.identity();
    match ensemble.schema().task() {
        Task::Segmentation => {
            let (mask, dists) = predict_segmentation(ensemble, &sample.features)?;
            let report = score_image(id, &dists)?;
            Ok(LabeledSample {
                sample,
                annotation: Annotated::Mask(mask),
                image_score: report.image_score,
            })
        }
        Task::Keypoints => {
            let pred = predict_keypoints(ensemble, &sample.features)?;
            let score = if heat_variance {
                heat_variance_score(&pred.member_heats)
            } else {
                0.0
            };
            let records = ensemble
                .schema()
                .keypoint_names()
                .iter()
                .zip(&pred.locations)
                .map(|(name, &(x, y, peak))| KeypointRecord {
                    name: name.clone(),
                    x: x as f64,
                    y: y as f64,
                    peak,
                })
                .collect();
            Ok(LabeledSample {
                sample,
                annotation: Annotated::Keypoints(records),
                image_score: score,
            })
        }
    }
}

fn produce_pair(
    dir: &Path,
    backbone: &dyn Backbone,
    ensemble: &InterpreterEnsemble,
    seed: u64,
    heat_variance: bool,
) -> Result<PairRecord, FactoryError> {
    let latent = backbone.latent_for_seed(seed);
    let sample = backbone.generate(&latent)?;
    let labeled = label_sample(sample, ensemble, heat_variance)?;
    let (image, image_hash) = match &labeled.sample.image {
        Some(img) => {
            let rel = image_path(seed);
            let hash = write_file(dir, &rel, &img.to_png()?)?;
            (Some(rel), Some(hash))
        }
        None => (None, None),
    };
    let (annotation, annotation_hash) = match &labeled.annotation {
        Annotated::Mask(mask) => {
            let rel = mask_path(seed);
            let hash = write_file(dir, &rel, &mask.to_indexed_png(ensemble.schema().palette())?)?;
            (rel, hash)
        }
        Annotated::Keypoints(recs) => {
            let rel = keypoint_path(seed);
            let hash = write_file(dir, &rel, write_keypoint_records(recs).as_bytes())?;
            (rel, hash)
        }
    };
    Ok(PairRecord {
        id: seed,
        seed,
        image,
        image_hash,
        annotation,
        annotation_hash,
        image_score: labeled.image_score,
        kept: None,
    })
}

/// Generates `options.count` pairs from seeds `seed..seed + count` into
/// `out_dir`, writing kept and dropped pairs alike.
pub fn synthesize(
    backbone: &dyn Backbone,
    ensemble: &InterpreterEnsemble,
    options: &SynthesisOptions,
    out_dir: &Path,
) -> Result<DatasetManifest, FactoryError> {
    if options.count == 0 || options.chunk_size == 0 {
        return Err(FactoryError::Request("count and chunk size must be positive".into()));
    }
    if !(0.0..1.0).contains(&options.filter_ratio) {
        return Err(UncertaintyError::Ratio(options.filter_ratio).into());
    }
    if options.seed.checked_add(options.count as u64 - 1).is_none() {
        return Err(FactoryError::Request("seed range overflows".into()));
    }
    if ensemble.schema().task() == Task::Keypoints && options.filter_ratio > 0.0 && !options.heat_variance {
        return Err(FactoryError::KeypointFilter(options.filter_ratio));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let _lock = DirLock::acquire(out_dir, "synthesize")?;
    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        schema: ensemble.schema().clone(),
        backbone: BackboneInfo {
            descriptor: backbone.descriptor(),
            config_hash: backbone.config_hash(),
        },
        ensemble_hash: ensemble_hash(ensemble),
        requested: options.count,
        filter_ratio: options.filter_ratio,
        seed: options.seed,
        heat_variance: options.heat_variance,
        complete: false,
        kept_count: 0,
        dropped_count: 0,
        resume: None,
        pairs: Vec::new(),
        timing: Timing::default(),
    };
    manifest.resume = Some(ResumeToken {
        next_index: 0,
        provenance: manifest.provenance(),
    });
    run(backbone, ensemble, &mut manifest, options.chunk_size, options.stop_after, out_dir)?;
    Ok(manifest)
}

/// Completes a partial run in `out_dir`. The backbone and ensemble must match
/// the ones recorded in the manifest; a complete manifest is returned as is.
pub fn resume(
    backbone: &dyn Backbone,
    ensemble: &InterpreterEnsemble,
    out_dir: &Path,
    chunk_size: usize,
) -> Result<DatasetManifest, FactoryError> {
    let _lock = DirLock::acquire(out_dir, "resume")?;
    let mut manifest = DatasetManifest::load(out_dir)?;
    if manifest.complete {
        return Ok(manifest);
    }
    let token = manifest
        .resume
        .clone()
        .ok_or_else(|| FactoryError::Resume("partial manifest without a resume token".into()))?;
    if ensemble_hash(ensemble) != manifest.ensemble_hash {
        return Err(FactoryError::Resume("ensemble checkpoint differs from the recorded one".into()));
    }
    if backbone.config_hash() != manifest.backbone.config_hash {
        return Err(FactoryError::Resume("backbone configuration differs from the recorded one".into()));
    }
    if token.provenance != manifest.provenance() || token.next_index != manifest.pairs.len() {
        return Err(FactoryError::Resume("resume token does not match the manifest".into()));
    }
    run(backbone, ensemble, &mut manifest, chunk_size.max(1), None, out_dir)?;
    Ok(manifest)
}

fn run(
    backbone: &dyn Backbone,
    ensemble: &InterpreterEnsemble,
    manifest: &mut DatasetManifest,
    chunk_size: usize,
    stop_after: Option<usize>,
    dir: &Path,
) -> Result<(), FactoryError> {
    let task = manifest.schema.task();
    for sub in ["images", if task == Task::Segmentation { "masks" } else { "keypoints" }] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let started = Instant::now();
    let prior = manifest.timing.elapsed_seconds;
    let limit = stop_after.unwrap_or(manifest.requested).min(manifest.requested);
    while manifest.pairs.len() < limit {
        let start = manifest.pairs.len();
        let end = (start + chunk_size).min(limit);
        let results: Vec<Result<PairRecord, FactoryError>> = (start..end)
            .into_par_iter()
            .map(|i| produce_pair(dir, backbone, ensemble, manifest.seed + i as u64, manifest.heat_variance))
            .collect();
        let mut failure = None;
        for r in results {
            match r {
                Ok(p) if failure.is_none() => manifest.pairs.push(p),
                Ok(_) => {}
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        manifest.resume = Some(ResumeToken {
            next_index: manifest.pairs.len(),
            provenance: manifest.provenance(),
        });
        update_timing(manifest, prior, started);
        let saved = manifest.save(dir);
        if let Some(e) = failure {
            return Err(FactoryError::Partial {
                token: manifest.resume.clone().expect("token just set"),
                source: Box::new(e),
            });
        }
        saved?;
    }
    if manifest.pairs.len() < manifest.requested {
        return Ok(());
    }
    let scores: Vec<ImageScore> = manifest
        .pairs
        .iter()
        .map(|p| ImageScore {
            id: p.id,
            score: p.image_score,
        })
        .collect();
    let (kept, dropped) = filter_by_uncertainty(&scores, manifest.filter_ratio)?;
    for p in &mut manifest.pairs {
        p.kept = Some(kept.binary_search(&p.id).is_ok());
    }
    manifest.kept_count = kept.len();
    manifest.dropped_count = dropped.len();
    manifest.complete = true;
    manifest.resume = None;
    let log: Vec<AuditEntry> = manifest
        .pairs
        .iter()
        .map(|p| AuditEntry {
            id: p.id,
            image_score: p.image_score,
            kept: p.kept == Some(true),
        })
        .collect();
    let log_path = dir.join(UNCERTAINTY_LOG);
    std::fs::write(&log_path, write_uncertainty_log(&log)).map_err(io_err(&log_path))?;
    update_timing(manifest, prior, started);
    manifest.save(dir)
}

fn update_timing(m: &mut DatasetManifest, prior: f64, started: Instant) {
    let elapsed = prior + started.elapsed().as_secs_f64();
    m.timing = Timing {
        elapsed_seconds: elapsed,
        seconds_per_pair: if m.pairs.is_empty() {
            0.0
        } else {
            elapsed / m.pairs.len() as f64
        },
    };
}
