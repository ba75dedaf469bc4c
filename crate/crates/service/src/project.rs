//! On-disk project owned by the service: configuration, one state file per
//! round, human annotations, per-round ensembles and the metrics history.
//!
//! ```text
//! project.json
//! rounds/round-0001.json
//! ensembles/round-0002.slen     ensemble that scored round 2's pool
//! annotations/000123.json       record, with the server-side mask hash
//! annotations/000123.png        server rasterization
//! metrics.json
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use labelsynth::annotation::{
    mask_hash, rasterize, record_keypoints, AnnotationError, AnnotationRecord, CandidateStatus, Lineage,
    RoundError, RoundState,
};
use labelsynth::backbone::{Backbone, BackboneError, BackboneSpec, GeneratedSample};
use labelsynth::factory::{ensemble_hash, label_sample, FactoryError};
use labelsynth::interpreter::{
    predict_keypoints, predict_segmentation, train_ensemble, AnnotatedSample, CheckpointError, InterpreterEnsemble,
    InterpreterError, LabelSchema, Task, TrainConfig,
};
use labelsynth::lock::{DirLock, LockError};
use labelsynth::metrics::ConfusionMatrix;
use labelsynth::raster::{LabelMask, RasterError, RgbImage};
use labelsynth::selection::{first_round_seed, kcenter_greedy, propose_batch, BandParams, PoolEntry, SelectionError, SelectionRound};
use labelsynth::uncertainty::{score_image, UncertaintyError};

pub const PROJECT_FILE: &str = "project.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PROJECT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectConfig {
    pub version: u32,
    pub backbone: BackboneSpec,
    pub task: Task,
    /// Required for dump backbones; toy backbones bring their own.
    pub schema: Option<LabelSchema>,
    pub train: TrainConfig,
    /// Parameters for the next proposed round.
    pub selection: BandParams,
    /// Fresh latent seeds scored per round.
    pub pool_size: usize,
    pub pool_seed: u64,
    /// Held-out seeds scored against backbone ground truth after each retrain,
    /// when the backbone has any.
    pub holdout: usize,
    pub holdout_seed: u64,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            version: PROJECT_VERSION,
            backbone: BackboneSpec::default(),
            task: Task::Segmentation,
            schema: None,
            train: TrainConfig {
                hidden: [64, 32],
                steps: 300,
                batch_pixels: 1024,
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
            selection: BandParams::default(),
            pool_size: 200,
            pool_seed: 1_000_000,
            holdout: 8,
            holdout_seed: 900_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("invalid project config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error("round {0} does not exist")]
    UnknownRound(u32),
    #[error("round {round} is closed; only round {current} accepts changes")]
    RoundClosed { round: u32, current: u32 },
    #[error("candidate {id} is not in round {round}")]
    UnknownCandidate { round: u32, id: u64 },
    #[error("candidate {0} has no annotation")]
    NoAnnotation(u64),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("record is for sample {record}, submitted to candidate {candidate}")]
    SampleMismatch { record: u64, candidate: u64 },
    #[error("no annotated samples yet; accept and annotate candidates before retraining")]
    NoAnnotations,
    #[error("round {0} has no annotated candidates; retraining would not grow the annotated set")]
    RoundNotGrown(u32),
    #[error("round {0} was proposed without an ensemble, so there is no prediction to show")]
    NoEnsemble(u32),
    #[error("sample {0} has no image")]
    NoImage(u64),
    #[error("{0} is not available for {1:?} projects")]
    UnsupportedTask(&'static str, Task),
    #[error("round state changed while retraining (expected round {expected}, found {found})")]
    Stale { expected: u32, found: u32 },
    #[error(transparent)]
    Interpreter(#[from] InterpreterError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Factory(#[from] FactoryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

impl ProjectError {
    /// Stable machine-readable reason for API clients.
    pub fn code(&self) -> &'static str {
        match self {
            ProjectError::Config(_) => "invalid_config",
            ProjectError::Io { .. } => "io",
            ProjectError::Json { .. } => "corrupt_state",
            ProjectError::Lock(_) => "locked",
            ProjectError::Backbone(_) => "backbone",
            ProjectError::Round(e) => e.code(),
            ProjectError::UnknownRound(_) => "unknown_round",
            ProjectError::RoundClosed { .. } => "round_closed",
            ProjectError::UnknownCandidate { .. } => "unknown_candidate",
            ProjectError::NoAnnotation(_) => "no_annotation",
            ProjectError::Annotation(_) => "invalid_annotation",
            ProjectError::SampleMismatch { .. } => "sample_mismatch",
            ProjectError::NoAnnotations => "no_annotations",
            ProjectError::RoundNotGrown(_) => "round_not_grown",
            ProjectError::NoEnsemble(_) => "no_ensemble",
            ProjectError::NoImage(_) => "no_image",
            ProjectError::UnsupportedTask(..) => "unsupported_task",
            ProjectError::Stale { .. } => "stale_round",
            ProjectError::Interpreter(InterpreterError::Diverged { .. }) => "training_diverged",
            ProjectError::Interpreter(_) => "training_failed",
            ProjectError::Checkpoint(_) => "corrupt_checkpoint",
            ProjectError::Selection(_) => "selection_failed",
            ProjectError::Uncertainty(_) => "uncertainty_failed",
            ProjectError::Factory(_) => "labeling_failed",
            ProjectError::Raster(_) => "raster",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ProjectError + '_ {
    move |source| ProjectError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ProjectError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ProjectError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ProjectError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("project types serialize");
    s.push('\n');
    s.into_bytes()
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn round_path(dir: &Path, round: u32) -> PathBuf {
    dir.join("rounds").join(format!("round-{round:04}.json"))
}

pub fn ensemble_path(dir: &Path, round: u32) -> PathBuf {
    dir.join("ensembles").join(format!("round-{round:04}.slen"))
}

pub fn annotation_path(dir: &Path, id: u64) -> PathBuf {
    dir.join("annotations").join(format!("{id:06}.json"))
}

pub fn annotation_mask_path(dir: &Path, id: u64) -> PathBuf {
    dir.join("annotations").join(format!("{id:06}.png"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsEntry {
    /// Round proposed by the ensemble trained here.
    pub round: u32,
    pub trained_on: usize,
    pub ensemble_hash: String,
    /// Mean over members of the last recorded training loss.
    pub final_loss: f64,
    /// Mean image score over the new round's pool.
    pub pool_mean_score: f64,
    pub holdout_miou: Option<f64>,
    pub created_at: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsHistory {
    pub version: u32,
    pub entries: Vec<MetricsEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundSummary {
    pub round: u32,
    pub current: bool,
    pub proposed: usize,
    pub accepted: usize,
    pub annotated: usize,
    pub skipped: usize,
    pub lineage: Lineage,
}

/// Per-pixel uncertainty of one candidate under its round's ensemble.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyRaster {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub image_score: f64,
    /// Upper bound of the per-pixel values, `ln N`.
    pub max: f64,
    pub raster: Vec<f64>,
}

pub struct Project {
    dir: PathBuf,
    config: ProjectConfig,
    schema: LabelSchema,
    backbone: Arc<dyn Backbone>,
    rounds: Vec<RoundState>,
    ensembles: Mutex<HashMap<u32, Arc<InterpreterEnsemble>>>,
    _lock: DirLock,
}

impl std::fmt::Debug for Project {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Project")
            .field("dir", &self.dir)
            .field("rounds", &self.rounds.len())
            .finish()
    }
}

fn resolve_schema(config: &ProjectConfig) -> Result<LabelSchema, ProjectError> {
    if config.version != PROJECT_VERSION {
        return Err(ProjectError::Config(format!(
            "version {} is not supported (expected {PROJECT_VERSION})",
            config.version
        )));
    }
    let schema = match &config.schema {
        Some(s) => s.clone(),
        None => config
            .backbone
            .schema(config.task)
            .ok_or_else(|| ProjectError::Config("`schema` is required for this backbone".into()))?,
    };
    if schema.task() != config.task {
        return Err(ProjectError::Config("`schema` task differs from `task`".into()));
    }
    if config.pool_size == 0 {
        return Err(ProjectError::Config("`pool_size` must be positive".into()));
    }
    config.train.validate()?;
    Ok(schema)
}

impl Project {
    /// Creates a project in `dir` (which must not already hold one) and
    /// proposes the first round.
    pub fn init(dir: &Path, config: ProjectConfig) -> Result<Self, ProjectError> {
        let schema = resolve_schema(&config)?;
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let lock = DirLock::acquire(dir, "labelsynth-service")?;
        let file = dir.join(PROJECT_FILE);
        if file.exists() {
            return Err(ProjectError::Config(format!("{} already exists", file.display())));
        }
        for sub in ["rounds", "ensembles", "annotations"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let backbone: Arc<dyn Backbone> = Arc::from(config.backbone.open()?);
        let first = bootstrap_round(backbone.as_ref(), &config)?;
        write_atomic(&file, &pretty(&config))?;
        write_atomic(&dir.join(METRICS_FILE), &pretty(&MetricsHistory { version: 1, entries: Vec::new() }))?;
        first.save(&round_path(dir, 1))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            schema,
            backbone,
            rounds: vec![first],
            ensembles: Mutex::new(HashMap::new()),
            _lock: lock,
        })
    }

    /// Opens an existing project and takes its lock for the lifetime of the
    /// returned value.
    pub fn open(dir: &Path) -> Result<Self, ProjectError> {
        let lock = DirLock::acquire(dir, "labelsynth-service")?;
        let config: ProjectConfig = read_json(&dir.join(PROJECT_FILE))?;
        let schema = resolve_schema(&config)?;
        let backbone: Arc<dyn Backbone> = Arc::from(config.backbone.open()?);
        let mut rounds = Vec::new();
        loop {
            let path = round_path(dir, rounds.len() as u32 + 1);
            if !path.exists() {
                break;
            }
            let state = RoundState::load(&path)?;
            if state.round != rounds.len() as u32 + 1 {
                return Err(ProjectError::Config(format!(
                    "{} holds round {}",
                    path.display(),
                    state.round
                )));
            }
            rounds.push(state);
        }
        if rounds.is_empty() {
            return Err(ProjectError::Config(format!("{} has no rounds", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            schema,
            backbone,
            rounds,
            ensembles: Mutex::new(HashMap::new()),
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.config
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn current_round(&self) -> u32 {
        self.rounds.len() as u32
    }

    pub fn round(&self, round: u32) -> Result<&RoundState, ProjectError> {
        round
            .checked_sub(1)
            .and_then(|i| self.rounds.get(i as usize))
            .ok_or(ProjectError::UnknownRound(round))
    }

    pub fn summaries(&self) -> Vec<RoundSummary> {
        let current = self.current_round();
        self.rounds
            .iter()
            .map(|r| {
                let count = |s| r.candidates.iter().filter(|c| c.status == s).count();
                RoundSummary {
                    round: r.round,
                    current: r.round == current,
                    proposed: count(CandidateStatus::Proposed),
                    accepted: count(CandidateStatus::Accepted),
                    annotated: count(CandidateStatus::Annotated),
                    skipped: count(CandidateStatus::Skipped),
                    lineage: r.lineage.clone(),
                }
            })
            .collect()
    }

    /// Next-round parameters only; existing rounds keep what they were
    /// proposed with.
    pub fn set_selection(&mut self, params: BandParams) -> Result<(), ProjectError> {
        labelsynth::selection::band_bounds(self.config.pool_size, &params)?;
        if params.n_centers == 0 {
            return Err(ProjectError::Config("`n_centers` must be positive".into()));
        }
        self.config.selection = params;
        write_atomic(&self.dir.join(PROJECT_FILE), &pretty(&self.config))
    }

    fn candidate(&self, round: u32, id: u64) -> Result<&RoundState, ProjectError> {
        let state = self.round(round)?;
        if state.status(id).is_none() {
            return Err(ProjectError::UnknownCandidate { round, id });
        }
        Ok(state)
    }

    fn generate(&self, id: u64) -> Result<GeneratedSample, ProjectError> {
        Ok(self.backbone.generate(&self.backbone.latent_for_seed(id))?)
    }

    pub fn candidate_image(&self, round: u32, id: u64) -> Result<Vec<u8>, ProjectError> {
        self.candidate(round, id)?;
        let sample = self.generate(id)?;
        let image = sample.image.ok_or(ProjectError::NoImage(id))?;
        Ok(image.to_png()?)
    }

    pub fn ensemble(&self, round: u32) -> Result<Arc<InterpreterEnsemble>, ProjectError> {
        self.round(round)?;
        let mut cache = self.ensembles.lock().expect("ensemble cache poisoned");
        if let Some(e) = cache.get(&round) {
            return Ok(e.clone());
        }
        let path = ensemble_path(&self.dir, round);
        if !path.exists() {
            return Err(ProjectError::NoEnsemble(round));
        }
        let e = Arc::new(InterpreterEnsemble::load(&path)?);
        cache.insert(round, e.clone());
        Ok(e)
    }

    /// The round ensemble's prediction: a palette mask for segmentation, the
    /// strongest keypoint heat as grayscale otherwise.
    pub fn candidate_overlay(&self, round: u32, id: u64) -> Result<Vec<u8>, ProjectError> {
        self.candidate(round, id)?;
        let ensemble = self.ensemble(round)?;
        let sample = self.generate(id)?;
        match self.schema.task() {
            Task::Segmentation => {
                let (mask, _) = predict_segmentation(&ensemble, &sample.features)?;
                Ok(mask.to_indexed_png(self.schema.palette())?)
            }
            Task::Keypoints => {
                let pred = predict_keypoints(&ensemble, &sample.features)?;
                let (w, h) = (sample.width(), sample.height());
                let mut peak = vec![0.0f64; w * h];
                for hm in &pred.heatmaps {
                    for (p, v) in peak.iter_mut().zip(&hm.data) {
                        *p = p.max(*v);
                    }
                }
                Ok(grayscale(w, h, &peak, 1.0).to_png()?)
            }
        }
    }

    pub fn candidate_uncertainty(&self, round: u32, id: u64) -> Result<UncertaintyRaster, ProjectError> {
        self.candidate(round, id)?;
        if self.schema.task() != Task::Segmentation {
            return Err(ProjectError::UnsupportedTask("per-pixel uncertainty", self.schema.task()));
        }
        let ensemble = self.ensemble(round)?;
        let sample = self.generate(id)?;
        let (_, dists) = predict_segmentation(&ensemble, &sample.features)?;
        let report = score_image(id, &dists)?;
        Ok(UncertaintyRaster {
            id,
            width: report.width,
            height: report.height,
            image_score: report.image_score,
            max: (ensemble.len() as f64).ln(),
            raster: report.raster,
        })
    }

    pub fn annotation(&self, id: u64) -> Result<AnnotationRecord, ProjectError> {
        let path = annotation_path(&self.dir, id);
        if !path.exists() {
            return Err(ProjectError::NoAnnotation(id));
        }
        read_json(&path)
    }

    pub fn annotation_mask_png(&self, id: u64) -> Result<Vec<u8>, ProjectError> {
        let path = annotation_mask_path(&self.dir, id);
        if !path.exists() {
            return Err(ProjectError::NoAnnotation(id));
        }
        std::fs::read(&path).map_err(io_err(&path))
    }

    fn current_mut(&mut self, round: u32) -> Result<&mut RoundState, ProjectError> {
        let current = self.current_round();
        self.round(round)?;
        if round != current {
            return Err(ProjectError::RoundClosed { round, current });
        }
        Ok(self.rounds.last_mut().expect("at least one round"))
    }

    pub fn set_status(&mut self, round: u32, id: u64, to: CandidateStatus) -> Result<&RoundState, ProjectError> {
        let path = round_path(&self.dir, round);
        let state = self.current_mut(round)?;
        let mut next = state.clone();
        next.transition(id, to)?;
        next.save(&path)?;
        *state = next;
        Ok(state)
    }

    /// Rasterizes and stores a record for an accepted candidate, marking it
    /// annotated. Returns the stored record (with its mask hash).
    pub fn submit_annotation(
        &mut self,
        round: u32,
        id: u64,
        mut record: AnnotationRecord,
    ) -> Result<AnnotationRecord, ProjectError> {
        if record.sample_id != id {
            return Err(ProjectError::SampleMismatch {
                record: record.sample_id,
                candidate: id,
            });
        }
        let state = self.current_mut(round)?;
        let from = state.status(id).ok_or(ProjectError::UnknownCandidate { round, id })?;
        if !from.can_become(CandidateStatus::Annotated) {
            return Err(RoundError::Transition {
                id,
                from,
                to: CandidateStatus::Annotated,
            }
            .into());
        }
        let sample = self.generate(id)?;
        let (h, w) = (sample.height(), sample.width());
        let mask_png = match self.schema.task() {
            Task::Segmentation => {
                let mask = rasterize(&record, h, w, &self.schema)?;
                record.mask_hash = Some(mask_hash(&mask));
                Some(mask.to_indexed_png(self.schema.palette())?)
            }
            Task::Keypoints => {
                record_keypoints(&record, h, w, &self.schema)?;
                record.mask_hash = None;
                None
            }
        };
        if record.created_at == 0 {
            record.created_at = now_unix();
        }
        if let Some(png) = mask_png {
            write_atomic(&annotation_mask_path(&self.dir, id), &png)?;
        }
        write_atomic(&annotation_path(&self.dir, id), &pretty(&record))?;
        self.set_status(round, id, CandidateStatus::Annotated)?;
        Ok(record)
    }

    /// Ids of every stored annotation, ascending.
    pub fn annotated_ids(&self) -> Result<Vec<u64>, ProjectError> {
        let dir = self.dir.join("annotations");
        let mut ids: Vec<u64> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(Result::ok)
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_suffix(".json")?.parse().ok()
            })
            .collect();
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn metrics(&self) -> Result<MetricsHistory, ProjectError> {
        read_json(&self.dir.join(METRICS_FILE))
    }

    /// Checks preconditions and gathers every accumulated annotation, so the
    /// expensive part can run without holding the project.
    pub fn prepare_retrain(&self) -> Result<RetrainPlan, ProjectError> {
        let ids = self.annotated_ids()?;
        if ids.is_empty() {
            return Err(ProjectError::NoAnnotations);
        }
        let current = self.rounds.last().expect("at least one round");
        if !current.candidates.iter().any(|c| c.status == CandidateStatus::Annotated) {
            return Err(ProjectError::RoundNotGrown(current.round));
        }
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            let record = self.annotation(id)?;
            let sample = self.generate(id)?;
            let (h, w) = (sample.height(), sample.width());
            samples.push(match self.schema.task() {
                Task::Segmentation => AnnotatedSample::with_mask(sample, rasterize(&record, h, w, &self.schema)?),
                Task::Keypoints => {
                    AnnotatedSample::with_keypoints(sample, record_keypoints(&record, h, w, &self.schema)?)
                }
            });
        }
        Ok(RetrainPlan {
            parent_round: current.round,
            samples,
            schema: self.schema.clone(),
            config: self.config.clone(),
            backbone: self.backbone.clone(),
        })
    }

    /// Persists a finished retrain as the next round.
    pub fn commit(&mut self, out: RetrainOutput) -> Result<&RoundState, ProjectError> {
        let current = self.current_round();
        if out.state.round != current + 1 {
            return Err(ProjectError::Stale {
                expected: current + 1,
                found: out.state.round,
            });
        }
        let round = out.state.round;
        out.ensemble.save(&ensemble_path(&self.dir, round))?;
        let mut history = self.metrics()?;
        history.entries.push(out.metrics);
        write_atomic(&self.dir.join(METRICS_FILE), &pretty(&history))?;
        out.state.save(&round_path(&self.dir, round))?;
        self.ensembles
            .lock()
            .expect("ensemble cache poisoned")
            .insert(round, Arc::new(out.ensemble));
        self.rounds.push(out.state);
        Ok(self.rounds.last().expect("just pushed"))
    }

    /// Retrain and commit in one call.
    pub fn retrain(&mut self) -> Result<&RoundState, ProjectError> {
        let out = self.prepare_retrain()?.run(&|_| {})?;
        self.commit(out)
    }
}

/// Every stored annotation of the project in `dir` as a training sample,
/// ascending by id. Read-only and lock-free, so it works on a served project.
pub fn export_annotations(dir: &Path) -> Result<(LabelSchema, Vec<AnnotatedSample>), ProjectError> {
    let config: ProjectConfig = read_json(&dir.join(PROJECT_FILE))?;
    let schema = resolve_schema(&config)?;
    let backbone = config.backbone.open()?;
    let ann = dir.join("annotations");
    let mut ids: Vec<u64> = std::fs::read_dir(&ann)
        .map_err(io_err(&ann))?
        .filter_map(Result::ok)
        .filter_map(|e| e.file_name().to_string_lossy().strip_suffix(".json")?.parse().ok())
        .collect();
    ids.sort_unstable();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let record: AnnotationRecord = read_json(&annotation_path(dir, id))?;
        let sample = backbone.generate(&backbone.latent_for_seed(id))?;
        let (h, w) = (sample.height(), sample.width());
        out.push(match schema.task() {
            Task::Segmentation => AnnotatedSample::with_mask(sample, rasterize(&record, h, w, &schema)?),
            Task::Keypoints => AnnotatedSample::with_keypoints(sample, record_keypoints(&record, h, w, &schema)?),
        });
    }
    Ok((schema, out))
}

fn grayscale(w: usize, h: usize, values: &[f64], max: f64) -> RgbImage {
    let mut img = RgbImage::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let v = if max > 0.0 { (values[y * w + x] / max).clamp(0.0, 1.0) } else { 0.0 };
            let g = (v * 255.0).round() as u8;
            img.set_pixel(x, y, [g, g, g]);
        }
    }
    img
}

pub fn uncertainty_png(u: &UncertaintyRaster) -> Result<Vec<u8>, RasterError> {
    grayscale(u.width, u.height, &u.raster, u.max).to_png()
}

fn pool_seeds(config: &ProjectConfig, round: u32) -> std::ops::Range<u64> {
    let start = config.pool_seed + (round as u64 - 1) * config.pool_size as u64;
    start..start + config.pool_size as u64
}

/// Round 1 has no ensemble to score with: every pool entry is equally
/// uncertain, so the whole pool is the band and coverage starts from the
/// entry closest to the sample of the mean latent.
fn bootstrap_round(backbone: &dyn Backbone, config: &ProjectConfig) -> Result<RoundState, ProjectError> {
    let mode = config.train.upsample;
    let pool = pool_seeds(config, 1)
        .map(|id| {
            let sample = backbone.generate(&backbone.latent_for_seed(id))?;
            Ok(PoolEntry::from_sample(id, &sample, 0.0, mode))
        })
        .collect::<Result<Vec<_>, ProjectError>>()?;
    let mean = backbone.generate(&first_round_seed(&pool)?)?;
    let target = mean.features.mean_feature(mode);
    let dist = |e: &PoolEntry| -> f64 { e.embedding.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum() };
    let seed_id = pool
        .iter()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.id.cmp(&b.id)))
        .expect("pool is non-empty")
        .id;
    let chosen = kcenter_greedy(&pool, config.selection.n_centers, seed_id)?;
    let selection = SelectionRound {
        params: config.selection,
        discarded: Vec::new(),
        band: pool.iter().map(|e| e.id).collect(),
        seed_id,
        chosen,
        embedding: "mean-pooled-pixel-feature".into(),
    };
    Ok(RoundState::new(1, selection, Lineage::default()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Scoring,
    Selecting,
    Evaluating,
}

pub struct RetrainPlan {
    parent_round: u32,
    samples: Vec<AnnotatedSample>,
    schema: LabelSchema,
    config: ProjectConfig,
    backbone: Arc<dyn Backbone>,
}

pub struct RetrainOutput {
    pub ensemble: InterpreterEnsemble,
    pub state: RoundState,
    pub metrics: MetricsEntry,
}

impl RetrainPlan {
    pub fn parent_round(&self) -> u32 {
        self.parent_round
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Trains on every annotation, scores a fresh pool and proposes the next
    /// round.
    pub fn run(self, progress: &(dyn Fn(Phase) + Sync)) -> Result<RetrainOutput, ProjectError> {
        use rayon::prelude::*;

        progress(Phase::Training);
        let ensemble = train_ensemble(&self.samples, &self.schema, &self.config.train)?;
        let hash = ensemble_hash(&ensemble);
        let round = self.parent_round + 1;

        progress(Phase::Scoring);
        let mode = self.config.train.upsample;
        let heat_variance = self.schema.task() == Task::Keypoints;
        let pool = pool_seeds(&self.config, round)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|id| {
                let sample = self.backbone.generate(&self.backbone.latent_for_seed(id))?;
                let labeled = label_sample(sample, &ensemble, heat_variance)?;
                Ok(PoolEntry::from_sample(id, &labeled.sample, labeled.image_score, mode))
            })
            .collect::<Result<Vec<_>, ProjectError>>()?;

        progress(Phase::Selecting);
        let selection = propose_batch(&pool, &self.config.selection)?;
        let state = RoundState::new(
            round,
            selection,
            Lineage {
                ensemble_hash: Some(hash.clone()),
                parent_round: Some(self.parent_round),
            },
        );

        progress(Phase::Evaluating);
        let holdout_miou = self.holdout_miou(&ensemble)?;
        let curves = ensemble.loss_curves();
        let final_loss = curves.iter().filter_map(|c| c.last()).sum::<f64>() / curves.len().max(1) as f64;
        let metrics = MetricsEntry {
            round,
            trained_on: self.samples.len(),
            ensemble_hash: hash,
            final_loss,
            pool_mean_score: pool.iter().map(|e| e.image_score).sum::<f64>() / pool.len() as f64,
            holdout_miou,
            created_at: now_unix(),
        };
        Ok(RetrainOutput {
            ensemble,
            state,
            metrics,
        })
    }

    fn holdout_miou(&self, ensemble: &InterpreterEnsemble) -> Result<Option<f64>, ProjectError> {
        if self.schema.task() != Task::Segmentation || self.config.holdout == 0 {
            return Ok(None);
        }
        let mut cm = ConfusionMatrix::new(self.schema.num_labels());
        for i in 0..self.config.holdout as u64 {
            let sample = self.backbone.generate(&self.backbone.latent_for_seed(self.config.holdout_seed + i))?;
            let Some(truth) = &sample.truth else {
                return Ok(None);
            };
            let (pred, _): (LabelMask, _) = predict_segmentation(ensemble, &sample.features)?;
            if cm.accumulate(&pred, &truth.mask).is_err() {
                return Ok(None);
            }
        }
        Ok(cm.miou(false).mean)
    }
}
