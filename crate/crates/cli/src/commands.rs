use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use labelsynth::backbone::{
    write_feature_dump, Backbone, BackboneError, DumpBackbone, DumpError, GeneratedSample,
    GroundTruth, ToyBackbone,
};
use labelsynth::factory::{
    self, ensemble_hash, label_sample, validate_manifest, DatasetManifest, FactoryError, SynthesisOptions,
    MANIFEST_FILE, UNCERTAINTY_LOG,
};
use labelsynth::hash::sha256_hex;
use labelsynth::interpreter::{
    predict_keypoints, predict_segmentation, train_ensemble, Annotation, AnnotatedSample, CheckpointError,
    InterpreterEnsemble, InterpreterError, LabelSchema, Task,
};
use labelsynth::keypoints::Keypoint;
use labelsynth::lock::{DirLock, LockError};
use labelsynth::metrics::{five_fold_select, pck, write_metric_records, ConfusionMatrix, MetricRecord, PckConfig};
use labelsynth::raster::LabelMask;
use labelsynth::selection::{propose_batch, PoolEntry};
use labelsynth::uncertainty::{filter_by_uncertainty, write_uncertainty_log, AuditEntry, ImageScore};
use labelsynth::annotation::{Lineage, RoundState};
use labelsynth_service::project::{export_annotations, PROJECT_FILE};
use labelsynth_service::{serve_blocking, Project, ProjectConfig, ProjectError};

use crate::{
    CliError, EvalSettings, ExportSettings, FilterSettings, Plan, Resolved, SelectSettings, ServeSettings,
    SynthesizeSettings, ToygenSettings, TrainSettings, ValidateSettings,
};

pub const SCHEMA_FILE: &str = "schema.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn interpreter_err(e: InterpreterError) -> CliError {
    match e {
        InterpreterError::Diverged { .. } | InterpreterError::NonFinite => CliError::Divergence(e.to_string()),
        InterpreterError::Config(_) | InterpreterError::BatchTooSmall { .. } | InterpreterError::Sigma(_) => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

fn backbone_err(e: BackboneError) -> CliError {
    match e {
        BackboneError::Config(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn factory_err(e: FactoryError) -> CliError {
    match e {
        FactoryError::Interpreter(e) => interpreter_err(e),
        FactoryError::Backbone(e) => backbone_err(e),
        FactoryError::Partial { source, token } => match factory_err(*source) {
            CliError::Divergence(m) => CliError::Divergence(format!("{m} (partial run saved at pair {})", token.next_index)),
            other => CliError::Data(format!("{other} (partial run saved at pair {}; rerun with --resume)", token.next_index)),
        },
        FactoryError::KeypointFilter(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn project_err(e: ProjectError) -> CliError {
    match e.code() {
        "invalid_config" | "unsupported_task" => CliError::Config(e.to_string()),
        "training_diverged" => CliError::Divergence(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn lock_err(e: LockError) -> CliError {
    CliError::Data(e.to_string())
}

fn dump_err(e: DumpError) -> CliError {
    CliError::Data(e.to_string())
}

fn checkpoint_err(path: &Path) -> impl FnOnce(CheckpointError) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Files written by a subcommand, by path relative to `out`, with hashes.
#[derive(Default)]
struct Outputs(BTreeMap<String, String>);

impl Outputs {
    fn write(&mut self, out: &Path, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = out.join(rel);
        std::fs::write(&path, bytes).map_err(io(&path))?;
        self.0.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn record(&mut self, out: &Path, rel: &str) -> Result<(), CliError> {
        let path = out.join(rel);
        let bytes = std::fs::read(&path).map_err(io(&path))?;
        self.0.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config_file: Option<&'a Path>,
    effective: serde_json::Value,
    overrides: &'a [String],
    workers: &'a crate::Workers,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn write_provenance(
    r: &Resolved,
    subcommand: &str,
    out: &Path,
    inputs: BTreeMap<String, String>,
    outputs: Outputs,
) -> Result<(), CliError> {
    let record = Provenance {
        tool: "labelsynth",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        config_file: r.config_file.as_deref(),
        effective: r.effective(),
        overrides: &r.overrides,
        workers: &r.workers,
        inputs,
        outputs: outputs.0,
    };
    let mut text = serde_json::to_string_pretty(&record).expect("provenance serializes");
    text.push('\n');
    let path = out.join(PROVENANCE_FILE);
    std::fs::write(&path, text).map_err(io(&path))
}

fn prepare_out(out: &Path, owner: &str) -> Result<DirLock, CliError> {
    std::fs::create_dir_all(out).map_err(io(out))?;
    DirLock::acquire(out, owner).map_err(lock_err)
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io(path))?))
}

fn input(path: &Path, hash: String) -> (String, String) {
    (path.display().to_string(), hash)
}

fn load_ensemble(path: &Path) -> Result<(InterpreterEnsemble, String), CliError> {
    let ensemble = InterpreterEnsemble::load(path).map_err(checkpoint_err(path))?;
    let hash = ensemble_hash(&ensemble);
    Ok((ensemble, hash))
}

/// A directory of `.fvd` samples carrying truth, plus `schema.json`.
struct SampleDir {
    schema: LabelSchema,
    samples: Vec<AnnotatedSample>,
    hash: String,
}

fn load_samples(dir: &Path) -> Result<SampleDir, CliError> {
    let schema_path = dir.join(SCHEMA_FILE);
    let text = std::fs::read_to_string(&schema_path).map_err(io(&schema_path))?;
    let schema: LabelSchema =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", schema_path.display())))?;
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(Result::ok)
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".fvd"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Data(format!("no .fvd samples in {}", dir.display())));
    }
    let mut listing = format!("{SCHEMA_FILE}:{}\n", sha256_hex(text.as_bytes()));
    let mut samples = Vec::with_capacity(names.len());
    for name in &names {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(io(&path))?;
        listing.push_str(&format!("{name}:{}\n", sha256_hex(&bytes)));
        let sample = labelsynth::backbone::decode_feature_dump(&bytes).map_err(dump_err)?;
        let annotated = AnnotatedSample::from_truth(sample, schema.task())
            .ok_or_else(|| CliError::Data(format!("{} has no annotation", path.display())))?;
        samples.push(annotated);
    }
    Ok(SampleDir {
        schema,
        samples,
        hash: sha256_hex(listing.as_bytes()),
    })
}

pub fn execute(r: &Resolved) -> Result<(), CliError> {
    if let Plan::Serve(s) = &r.plan {
        if let Some(n) = r.workers.count {
            // The service runs work on its own threads; size the global pool.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        return serve(s);
    }
    let go = || match &r.plan {
        Plan::Toygen(s) => toygen(r, s),
        Plan::AnnotateExport(s) => annotate_export(r, s),
        Plan::Train(s) => train(r, s),
        Plan::Synthesize(s) => synthesize(r, s),
        Plan::Filter(s) => filter(r, s),
        Plan::Select(s) => select(r, s),
        Plan::Eval(s) => eval(r, s),
        Plan::Validate(s) => validate(s),
        Plan::Serve(_) => unreachable!("handled above"),
    };
    match r.workers.count {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {n} workers: {e}")))?
            .install(go),
        None => go(),
    }
}

fn toygen(r: &Resolved, s: &ToygenSettings) -> Result<(), CliError> {
    let backbone = ToyBackbone::new(s.backbone.clone()).map_err(backbone_err)?;
    let schema = match s.task {
        Task::Segmentation => s.backbone.segmentation_schema(),
        Task::Keypoints => s.backbone.keypoint_schema(),
    };
    let _lock = prepare_out(&s.out, "toygen")?;
    let end = s
        .seed
        .checked_add(s.count as u64)
        .ok_or_else(|| CliError::Config("`seed + count` overflows".into()))?;
    let files: Vec<(String, String)> = (s.seed..end)
        .into_par_iter()
        .map(|seed| {
            let sample = backbone.generate(&backbone.latent_for_seed(seed)).map_err(backbone_err)?;
            let path = DumpBackbone::path_for_seed(&s.out, seed);
            write_feature_dump(&sample, &path).map_err(dump_err)?;
            let rel = path.file_name().expect("dump path has a name").to_string_lossy().into_owned();
            Ok((rel, hash_file(&path)?))
        })
        .collect::<Result<_, CliError>>()?;
    let mut outputs = Outputs::default();
    outputs.0.extend(files);
    outputs.write(&s.out, SCHEMA_FILE, &json_bytes(&schema))?;
    write_provenance(r, "toygen", &s.out, BTreeMap::new(), outputs)?;
    println!("toygen: {} samples ({:?}) in {}", s.count, s.task, s.out.display());
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    text.into_bytes()
}

fn annotate_export(r: &Resolved, s: &ExportSettings) -> Result<(), CliError> {
    if !s.project.join(PROJECT_FILE).is_file() {
        return Err(CliError::Data(format!("{} is not a project directory", s.project.display())));
    }
    let (schema, annotated) = export_annotations(&s.project).map_err(project_err)?;
    let _lock = prepare_out(&s.out, "annotate-export")?;
    let mut outputs = Outputs::default();
    for a in &annotated {
        let (h, w) = (a.sample.height(), a.sample.width());
        let truth = match &a.annotation {
            Annotation::Mask(mask) => GroundTruth {
                mask: mask.clone(),
                keypoints: Vec::new(),
            },
            Annotation::Keypoints(kps) => GroundTruth {
                mask: LabelMask::background(w, h),
                keypoints: kps.clone(),
            },
        };
        let sample = GeneratedSample {
            truth: Some(truth),
            ..a.sample.clone()
        };
        let path = DumpBackbone::path_for_seed(&s.out, sample.latent.identity());
        write_feature_dump(&sample, &path).map_err(dump_err)?;
        let rel = path.file_name().expect("dump path has a name").to_string_lossy().into_owned();
        outputs.record(&s.out, &rel)?;
    }
    outputs.write(&s.out, SCHEMA_FILE, &json_bytes(&schema))?;
    let inputs = BTreeMap::from([input(&s.project.join(PROJECT_FILE), hash_file(&s.project.join(PROJECT_FILE))?)]);
    write_provenance(r, "annotate-export", &s.out, inputs, outputs)?;
    println!("annotate-export: {} annotated samples to {}", annotated.len(), s.out.display());
    Ok(())
}

fn train(r: &Resolved, s: &TrainSettings) -> Result<(), CliError> {
    s.train.validate().map_err(interpreter_err)?;
    let data = load_samples(&s.samples)?;
    let _lock = prepare_out(&s.out, "train")?;
    let ensemble = train_ensemble(&data.samples, &data.schema, &s.train).map_err(interpreter_err)?;
    let mut outputs = Outputs::default();
    outputs.write(&s.out, "ensemble.slen", &labelsynth::interpreter::encode_checkpoint(&ensemble))?;
    let mut loss = String::from("# loss v1\tmember\tstep\tloss\n");
    for (m, curve) in ensemble.loss_curves().iter().enumerate() {
        for (step, l) in curve.iter().enumerate() {
            loss.push_str(&format!("{m}\t{step}\t{l:?}\n"));
        }
    }
    outputs.write(&s.out, "loss.tsv", loss.as_bytes())?;
    let inputs = BTreeMap::from([input(&s.samples, data.hash)]);
    write_provenance(r, "train", &s.out, inputs, outputs)?;
    let finals: Vec<String> = ensemble
        .loss_curves()
        .iter()
        .map(|c| c.last().map_or("-".into(), |l| format!("{l:.4}")))
        .collect();
    println!(
        "train: {} members on {} samples, final losses [{}], checkpoint {}",
        ensemble.len(),
        data.samples.len(),
        finals.join(", "),
        s.out.join("ensemble.slen").display()
    );
    Ok(())
}

fn synthesize(r: &Resolved, s: &SynthesizeSettings) -> Result<(), CliError> {
    let (ensemble, hash) = load_ensemble(&s.ensemble)?;
    let backbone = s.backbone.open().map_err(backbone_err)?;
    let manifest = if s.resume {
        if !s.out.join(MANIFEST_FILE).is_file() {
            return Err(CliError::Data(format!("nothing to resume in {}", s.out.display())));
        }
        factory::resume(backbone.as_ref(), &ensemble, &s.out, s.chunk_size).map_err(factory_err)?
    } else {
        let options = SynthesisOptions {
            count: s.count,
            filter_ratio: s.filter,
            seed: s.seed,
            chunk_size: s.chunk_size,
            stop_after: s.stop_after,
            heat_variance: s.heat_variance,
        };
        if !(0.0..1.0).contains(&s.filter) {
            return Err(CliError::Config(format!("`synthesize.filter` must be in [0, 1), got {}", s.filter)));
        }
        if s.out.join(MANIFEST_FILE).is_file() {
            return Err(CliError::Data(format!(
                "{} already holds a dataset; pass --resume or choose another --out",
                s.out.display()
            )));
        }
        factory::synthesize(backbone.as_ref(), &ensemble, &options, &s.out).map_err(factory_err)?
    };
    let _lock = DirLock::acquire(&s.out, "synthesize").map_err(lock_err)?;
    let mut outputs = Outputs::default();
    outputs.record(&s.out, MANIFEST_FILE)?;
    if manifest.complete {
        outputs.record(&s.out, UNCERTAINTY_LOG)?;
    }
    let inputs = BTreeMap::from([input(&s.ensemble, hash)]);
    write_provenance(r, "synthesize", &s.out, inputs, outputs)?;
    if manifest.complete {
        println!(
            "synthesize: {} pairs, kept {}, dropped {} ({:.4} s/pair)",
            manifest.pairs.len(),
            manifest.kept_count,
            manifest.dropped_count,
            manifest.timing.seconds_per_pair
        );
    } else {
        println!(
            "synthesize: stopped after {} of {} pairs; rerun with --resume",
            manifest.pairs.len(),
            manifest.requested
        );
    }
    Ok(())
}

fn filter(r: &Resolved, s: &FilterSettings) -> Result<(), CliError> {
    if !s.dataset.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Data(format!("no {MANIFEST_FILE} in {}", s.dataset.display())));
    }
    let manifest = DatasetManifest::load(&s.dataset).map_err(factory_err)?;
    if !manifest.complete {
        return Err(CliError::Data("dataset is incomplete; finish it with synthesize --resume".into()));
    }
    let scores: Vec<ImageScore> = manifest
        .pairs
        .iter()
        .map(|p| ImageScore {
            id: p.id,
            score: p.image_score,
        })
        .collect();
    let (kept, dropped) = filter_by_uncertainty(&scores, s.ratio).map_err(|e| CliError::Config(e.to_string()))?;
    let _lock = prepare_out(&s.out, "filter")?;
    let log: Vec<AuditEntry> = manifest
        .pairs
        .iter()
        .map(|p| AuditEntry {
            id: p.id,
            image_score: p.image_score,
            kept: kept.binary_search(&p.id).is_ok(),
        })
        .collect();
    let mut outputs = Outputs::default();
    outputs.write(&s.out, UNCERTAINTY_LOG, write_uncertainty_log(&log).as_bytes())?;
    let list: String = kept.iter().map(|id| format!("{id}\n")).collect();
    outputs.write(&s.out, "kept.txt", list.as_bytes())?;
    let manifest_path = s.dataset.join(MANIFEST_FILE);
    let inputs = BTreeMap::from([input(&manifest_path, hash_file(&manifest_path)?)]);
    write_provenance(r, "filter", &s.out, inputs, outputs)?;
    println!("filter: ratio {} over {} pairs, kept {}, dropped {}", s.ratio, scores.len(), kept.len(), dropped.len());
    Ok(())
}

fn select(r: &Resolved, s: &SelectSettings) -> Result<(), CliError> {
    let (ensemble, hash) = load_ensemble(&s.ensemble)?;
    let backbone = s.backbone.open().map_err(backbone_err)?;
    let end = s
        .pool_seed
        .checked_add(s.pool_size as u64)
        .ok_or_else(|| CliError::Config("`seed + pool_size` overflows".into()))?;
    labelsynth::selection::band_bounds(s.pool_size, &s.selection).map_err(|e| CliError::Config(e.to_string()))?;
    let heat = ensemble.schema().task() == Task::Keypoints;
    let mode = ensemble.config().upsample;
    let pool: Vec<PoolEntry> = (s.pool_seed..end)
        .into_par_iter()
        .map(|seed| {
            let sample = backbone.generate(&backbone.latent_for_seed(seed)).map_err(backbone_err)?;
            let mut entry = PoolEntry::from_sample(seed, &sample, 0.0, mode);
            entry.image_score = label_sample(sample, &ensemble, heat).map_err(factory_err)?.image_score;
            Ok(entry)
        })
        .collect::<Result<_, CliError>>()?;
    let round = propose_batch(&pool, &s.selection).map_err(|e| CliError::Config(e.to_string()))?;
    let _lock = prepare_out(&s.out, "select")?;
    let state = RoundState::new(
        1,
        round,
        Lineage {
            ensemble_hash: Some(hash.clone()),
            parent_round: None,
        },
    );
    let mut outputs = Outputs::default();
    outputs.write(&s.out, "round-0001.json", state.to_json().as_bytes())?;
    let mut table = String::from("# pool v1\tid\timage_score\tstatus\n");
    for e in &pool {
        let status = if state.selection.chosen.contains(&e.id) {
            "chosen"
        } else if state.selection.band.contains(&e.id) {
            "band"
        } else if state.selection.discarded.contains(&e.id) {
            "discarded"
        } else {
            "pool"
        };
        table.push_str(&format!("{}\t{:?}\t{status}\n", e.id, e.image_score));
    }
    outputs.write(&s.out, "pool.tsv", table.as_bytes())?;
    let inputs = BTreeMap::from([input(&s.ensemble, hash)]);
    write_provenance(r, "select", &s.out, inputs, outputs)?;
    println!(
        "select: pool {}, band {}, {} candidates: {:?}",
        pool.len(),
        state.selection.band.len(),
        state.selection.chosen.len(),
        state.selection.chosen
    );
    Ok(())
}

enum Predictions {
    Masks(Vec<LabelMask>),
    Keypoints(Vec<Vec<Keypoint>>),
}

fn eval(r: &Resolved, s: &EvalSettings) -> Result<(), CliError> {
    let data = load_samples(&s.samples)?;
    let pck_config = PckConfig {
        thresholds: s.thresholds.clone(),
    };
    if pck_config.thresholds.is_empty() || pck_config.thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(CliError::Config("`eval.thresholds` must be positive percentages".into()));
    }
    if s.ensembles.len() > 1 && data.samples.len() < 5 {
        return Err(CliError::Data(format!(
            "five-fold selection needs at least 5 samples, {} has {}",
            s.samples.display(),
            data.samples.len()
        )));
    }
    let mut inputs = BTreeMap::from([input(&s.samples, data.hash.clone())]);
    let mut names = Vec::new();
    let mut predictions = Vec::new();
    for path in &s.ensembles {
        let (ensemble, hash) = load_ensemble(path)?;
        if ensemble.schema() != &data.schema {
            return Err(CliError::Data(format!("{}: schema differs from the samples'", path.display())));
        }
        inputs.insert(path.display().to_string(), hash);
        names.push(path.file_name().map_or("ensemble".into(), |n| n.to_string_lossy().replace('\t', " ")));
        predictions.push(match data.schema.task() {
            Task::Segmentation => Predictions::Masks(
                data.samples
                    .par_iter()
                    .map(|a| Ok(predict_segmentation(&ensemble, &a.sample.features).map_err(interpreter_err)?.0))
                    .collect::<Result<_, CliError>>()?,
            ),
            Task::Keypoints => Predictions::Keypoints(
                data.samples
                    .par_iter()
                    .map(|a| {
                        let p = predict_keypoints(&ensemble, &a.sample.features).map_err(interpreter_err)?;
                        Ok(data
                            .schema
                            .keypoint_names()
                            .iter()
                            .zip(&p.locations)
                            .map(|(n, &(x, y, _))| Keypoint::new(n.clone(), x as f64, y as f64))
                            .collect())
                    })
                    .collect::<Result<_, CliError>>()?,
            ),
        });
    }
    let labels = data.schema.num_labels();
    // Per-checkpoint metric over a subset of samples: dataset-level mIoU, or
    // mean PCK per threshold.
    let score = |c: usize, items: &[usize]| -> Result<Vec<f64>, CliError> {
        match &predictions[c] {
            Predictions::Masks(masks) => {
                let mut cm = ConfusionMatrix::new(labels);
                for &i in items {
                    let Annotation::Mask(truth) = &data.samples[i].annotation else {
                        unreachable!("segmentation samples carry masks")
                    };
                    cm.accumulate(&masks[i], truth).map_err(|e| CliError::Data(e.to_string()))?;
                }
                let report = cm.miou(s.ignore_background);
                let mut v = vec![report.mean.unwrap_or(0.0)];
                v.extend(report.per_label.iter().map(|x| x.unwrap_or(f64::NAN)));
                Ok(v)
            }
            Predictions::Keypoints(kps) => {
                let mut sums = vec![0.0; pck_config.thresholds.len()];
                for &i in items {
                    let Annotation::Keypoints(truth) = &data.samples[i].annotation else {
                        unreachable!("keypoint samples carry keypoints")
                    };
                    let a = &data.samples[i].sample;
                    let row = pck(&kps[i], truth, a.height(), a.width(), &pck_config)
                        .map_err(|e| CliError::Data(e.to_string()))?;
                    sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                Ok(sums.into_iter().map(|s| s / items.len() as f64).collect())
            }
        }
    };
    let metric_names: Vec<String> = match data.schema.task() {
        Task::Segmentation => std::iter::once("miou".to_string())
            .chain(data.schema.names().iter().map(|n| format!("iou:{n}")))
            .collect(),
        Task::Keypoints => pck_config.thresholds.iter().map(|t| format!("pck@{t}")).collect(),
    };
    let all: Vec<usize> = (0..data.samples.len()).collect();
    let mut records = Vec::new();
    for (c, name) in names.iter().enumerate() {
        for (metric, value) in metric_names.iter().zip(score(c, &all)?) {
            if value.is_nan() {
                continue;
            }
            records.push(MetricRecord {
                dataset: name.clone(),
                metric: metric.clone(),
                value,
                std: None,
            });
        }
    }
    if s.ensembles.len() > 1 {
        let mut failure = None;
        let folds = five_fold_select(all.len(), s.ensembles.len(), |c, items| match score(c, items) {
            Ok(v) => v[0],
            Err(e) => {
                failure.get_or_insert(e);
                f64::NEG_INFINITY
            }
        })
        .map_err(|e| CliError::Data(e.to_string()))?;
        if let Some(e) = failure {
            return Err(e);
        }
        records.push(MetricRecord {
            dataset: "five-fold".into(),
            metric: metric_names[0].clone(),
            value: folds.mean,
            std: Some(folds.std),
        });
        let picked: Vec<&str> = folds.selected.iter().map(|&c| names[c].as_str()).collect();
        println!("eval: five-fold picks {picked:?}, {} {:.4} ± {:.4}", metric_names[0], folds.mean, folds.std);
    }
    let _lock = prepare_out(&s.out, "eval")?;
    let mut outputs = Outputs::default();
    outputs.write(&s.out, "metrics.tsv", write_metric_records(&records).as_bytes())?;
    write_provenance(r, "eval", &s.out, inputs, outputs)?;
    for rec in &records {
        println!("{}\t{}\t{:.4}", rec.dataset, rec.metric, rec.value);
    }
    Ok(())
}

fn serve(s: &ServeSettings) -> Result<(), CliError> {
    let project = if s.project.join(PROJECT_FILE).is_file() {
        Project::open(&s.project)
    } else {
        let d = ProjectConfig::default();
        Project::init(
            &s.project,
            ProjectConfig {
                backbone: s.backbone.clone(),
                pool_size: s.pool_size,
                pool_seed: s.seed.unwrap_or(d.pool_seed),
                ..d
            },
        )
    }
    .map_err(project_err)?;
    println!("serving {} on http://{}/api/v1", s.project.display(), s.addr);
    serve_blocking(project, s.addr).map_err(|e| CliError::Data(format!("{}: {e}", s.addr)))
}

fn validate(s: &ValidateSettings) -> Result<(), CliError> {
    if !s.dataset.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Data(format!("no {MANIFEST_FILE} in {}", s.dataset.display())));
    }
    let report = validate_manifest(&s.dataset).map_err(factory_err)?;
    for v in &report.violations {
        println!("violation: {v}");
    }
    if report.is_clean() {
        println!("validate: {} pairs, no violations", report.pairs);
        Ok(())
    } else {
        Err(CliError::Data(format!("{} violations in {} pairs", report.violations.len(), report.pairs)))
    }
}
