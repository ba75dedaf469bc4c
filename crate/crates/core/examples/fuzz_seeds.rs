//! Writes the checked-in fuzz corpus seeds: `cargo run --example fuzz_seeds -- fuzz/corpus`.

use std::path::{Path, PathBuf};

use labelsynth::annotation::{AnnotationRecord, Lineage, Polygon, RoundState};
use labelsynth::backbone::{encode_feature_dump, Backbone, ToyBackbone, ToyBackboneConfig};
use labelsynth::factory::{synthesize, SynthesisOptions, MANIFEST_FILE};
use labelsynth::interpreter::{encode_checkpoint, train_ensemble, AnnotatedSample, Task, TrainConfig};
use labelsynth::keypoints::{write_keypoint_records, Keypoint, KeypointRecord};
use labelsynth::metrics::{write_metric_records, MetricRecord};
use labelsynth::selection::{propose_batch, BandParams, PoolEntry};
use labelsynth::uncertainty::{write_uncertainty_log, AuditEntry};

fn put(root: &Path, target: &str, name: &str, bytes: &[u8]) {
    let dir = root.join(target);
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let root: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".into()).into();
    let toy = ToyBackbone::new(ToyBackboneConfig::with_shape(16, 2, 8)).unwrap();
    let samples: Vec<_> = (0..6).map(|s| toy.generate(&toy.latent_for_seed(s)).unwrap()).collect();

    put(&root, "feature_dump", "with_truth.fvd", &encode_feature_dump(&samples[0]));
    let mut bare = samples[1].clone();
    bare.image = None;
    bare.truth = None;
    put(&root, "feature_dump", "features_only.fvd", &encode_feature_dump(&bare));

    let small = TrainConfig {
        members: 2,
        hidden: [4, 4],
        steps: 5,
        batch_pixels: 256,
        ..TrainConfig::default()
    };
    let mut seg = None;
    for task in [Task::Segmentation, Task::Keypoints] {
        let schema = match task {
            Task::Segmentation => toy.config().segmentation_schema(),
            Task::Keypoints => toy.config().keypoint_schema(),
        };
        let data: Vec<_> =
            samples[..2].iter().map(|s| AnnotatedSample::from_truth(s.clone(), task).unwrap()).collect();
        let ensemble = train_ensemble(&data, &schema, &small).unwrap();
        put(&root, "checkpoint", &format!("{task:?}.slen").to_lowercase(), &encode_checkpoint(&ensemble));
        if task == Task::Segmentation {
            seg = Some(ensemble);
        }
    }
    let seg = seg.unwrap();

    let pool: Vec<PoolEntry> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| PoolEntry::from_sample(i as u64, s, i as f64 * 0.1, labelsynth::feature_volume::UpsampleMode::Bilinear))
        .collect();
    let params = BandParams {
        k_percent: 20.0,
        band_percent: 60.0,
        n_centers: 2,
    };
    let mut state = RoundState::new(1, propose_batch(&pool, &params).unwrap(), Lineage::default());
    put(&root, "round_state", "proposed.json", state.to_json().as_bytes());
    let first = state.candidates[0].id;
    state.transition(first, labelsynth::annotation::CandidateStatus::Accepted).unwrap();
    put(&root, "round_state", "accepted.json", state.to_json().as_bytes());

    let tmp = tempfile::tempdir().unwrap();
    for (name, stop_after) in [("complete.json", None), ("partial.json", Some(5))] {
        let dir = tmp.path().join(name);
        let options = SynthesisOptions {
            count: 12,
            chunk_size: 4,
            stop_after,
            ..SynthesisOptions::default()
        };
        synthesize(&toy, &seg, &options, &dir).unwrap();
        put(&root, "manifest", name, &std::fs::read(dir.join(MANIFEST_FILE)).unwrap());
        if stop_after.is_none() {
            let log = std::fs::read(dir.join(labelsynth::factory::UNCERTAINTY_LOG)).unwrap();
            put(&root, "uncertainty_log", "synthesized.log", &log);
            let image = std::fs::read(dir.join(labelsynth::factory::image_path(0))).unwrap();
            put(&root, "png_raster", "image.png", &image);
            let mask = std::fs::read(dir.join(labelsynth::factory::mask_path(0))).unwrap();
            put(&root, "png_raster", "mask.png", &mask);
        }
    }
    let log = write_uncertainty_log(&[
        AuditEntry {
            id: 3,
            image_score: 0.25,
            kept: true,
        },
        AuditEntry {
            id: 9,
            image_score: 1.5,
            kept: false,
        },
    ]);
    put(&root, "uncertainty_log", "two.log", log.as_bytes());

    let mut record = AnnotationRecord::new(42);
    record.annotator = "seed".into();
    record.polygons = vec![
        Polygon {
            label: "body".into(),
            vertices: vec![[2.0, 2.0], [20.0, 3.0], [18.0, 25.0], [4.0, 22.0]],
        },
        Polygon {
            label: "part".into(),
            vertices: vec![[8.0, 8.0], [12.0, 8.0], [12.0, 12.0], [8.0, 12.0]],
        },
    ];
    put(&root, "annotation", "polygons.json", serde_json::to_string_pretty(&record).unwrap().as_bytes());
    let mut kp = AnnotationRecord::new(7);
    kp.keypoints = vec![Keypoint::new("head", 1.5, 2.0), Keypoint::new("tail", 4.0, 3.0)];
    put(&root, "annotation", "keypoints.json", serde_json::to_string(&kp).unwrap().as_bytes());
    put(&root, "annotation", "band_params.json", serde_json::to_string(&params).unwrap().as_bytes());

    let records = write_keypoint_records(&[
        KeypointRecord {
            name: "head".into(),
            x: 3.0,
            y: 4.0,
            peak: 0.75,
        },
        KeypointRecord {
            name: "tail".into(),
            x: 10.0,
            y: 0.0,
            peak: 0.125,
        },
    ]);
    put(&root, "keypoint_records", "two.txt", records.as_bytes());

    let metrics = write_metric_records(&[
        MetricRecord {
            dataset: "ensemble.slen".into(),
            metric: "miou".into(),
            value: 0.8125,
            std: None,
        },
        MetricRecord {
            dataset: "five-fold".into(),
            metric: "miou".into(),
            value: 0.79,
            std: Some(0.02),
        },
    ]);
    put(&root, "metric_records", "report.tsv", metrics.as_bytes());

    let configs = [
        ("minimal.toml", "version = 1\n"),
        (
            "full.toml",
            "version = 1\nseed = 7\nout = \"runs/a\"\nworkers = 2\n\n[backbone]\nkind = \"toy\"\nresolutions = [8, 16]\n\
             channels = [8, 8]\ncorruption_fraction = 0.1\n\n[train]\nmembers = 3\nhidden = [16, 16]\nsteps = 100\n\
             learning_rate = 0.003\n\n[synthesize]\nensemble = \"runs/a/ensemble.slen\"\ncount = 100\nfilter = 0.1\n\n\
             [select]\nk = 10.0\nband = 10.0\ncenters = 12\n",
        ),
        ("dumps.toml", "version = 1\n\n[backbone]\nkind = \"dump\"\ndir = \"dumps\"\n\n[eval]\nthresholds = [5.0, 10.0]\n"),
    ];
    for (name, text) in configs {
        put(&root, "run_config", name, text.as_bytes());
    }
    println!("seeds written to {}", root.display());
}
