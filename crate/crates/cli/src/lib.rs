//! The `labelsynth` command line: one binary, one subcommand per pipeline
//! operation, a shared TOML config loader and a provenance record beside
//! every artifact.
//!
//! Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 numeric divergence.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use serde::Serialize;

use labelsynth::backbone::{BackboneSpec, ToyBackboneConfig};
use labelsynth::interpreter::{Task, TrainConfig};
use labelsynth::selection::BandParams;

use config::{overlay, resolve_workers, Cli, Command, FileConfig, GlobalArgs, Workers, WORKERS_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Divergence(_) => 5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ToygenSettings {
    pub out: PathBuf,
    pub seed: u64,
    pub count: usize,
    pub task: Task,
    pub backbone: ToyBackboneConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExportSettings {
    pub out: PathBuf,
    pub project: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSettings {
    pub out: PathBuf,
    pub samples: PathBuf,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthesizeSettings {
    pub out: PathBuf,
    pub ensemble: PathBuf,
    pub backbone: BackboneSpec,
    pub seed: u64,
    pub count: usize,
    pub filter: f64,
    pub chunk_size: usize,
    pub heat_variance: bool,
    pub stop_after: Option<usize>,
    pub resume: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FilterSettings {
    pub out: PathBuf,
    pub dataset: PathBuf,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectSettings {
    pub out: PathBuf,
    pub ensemble: PathBuf,
    pub backbone: BackboneSpec,
    pub pool_seed: u64,
    pub pool_size: usize,
    pub selection: BandParams,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSettings {
    pub out: PathBuf,
    pub ensembles: Vec<PathBuf>,
    pub samples: PathBuf,
    pub ignore_background: bool,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ServeSettings {
    pub project: PathBuf,
    pub addr: SocketAddr,
    pub backbone: BackboneSpec,
    pub pool_size: usize,
    /// First pool seed of a newly created project.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidateSettings {
    pub dataset: PathBuf,
}

/// Fully resolved invocation: every setting has its effective value.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Plan {
    Toygen(ToygenSettings),
    AnnotateExport(ExportSettings),
    Train(TrainSettings),
    Synthesize(SynthesizeSettings),
    Filter(FilterSettings),
    Select(SelectSettings),
    Eval(EvalSettings),
    Serve(ServeSettings),
    Validate(ValidateSettings),
}

#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub plan: Plan,
    /// Dotted keys set by flags rather than the file or defaults.
    pub overrides: Vec<String>,
    pub config_file: Option<PathBuf>,
    pub workers: Workers,
}

impl Resolved {
    /// The effective configuration recorded in provenance.
    pub fn effective(&self) -> serde_json::Value {
        serde_json::to_value(&self.plan).expect("settings serialize")
    }
}

fn required<T>(value: Option<T>, section: &str, key: &str, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing `{section}.{key}`: pass --{flag} or set `{key}` under [{section}]")))
}

fn out_dir(global: &GlobalArgs, section: &str) -> Result<PathBuf, CliError> {
    global
        .out
        .clone()
        .ok_or_else(|| CliError::Usage(format!("missing `out` for {section}: pass --out or set top-level `out`")))
}

fn backbone_for(dumps: Option<PathBuf>, file: &FileConfig) -> BackboneSpec {
    match dumps {
        Some(dir) => BackboneSpec::Dump { dir },
        None => file.backbone.clone().unwrap_or_default(),
    }
}

/// Parses `argv`, loads the config file it names and resolves every setting.
/// `env_workers` is the value of `SYNTHLABEL_WORKERS`, if set.
pub fn resolve(cli: Cli, env_workers: Option<String>) -> Result<Resolved, CliError> {
    let file = match &cli.config {
        Some(path) => config::load_file(path)?,
        None => FileConfig {
            version: config::CONFIG_VERSION,
            ..FileConfig::default()
        },
    };
    let (global, mut overrides) = overlay("", Some(&file.global()), &cli.global)?;
    let workers = resolve_workers(cli.global.workers, env_workers, file.workers)?;
    let seed = global.seed.unwrap_or(0);
    let plan = match cli.command {
        Command::Toygen(flags) => {
            let (a, keys) = overlay("toygen", file.toygen.as_ref(), &flags)?;
            overrides.extend(keys);
            let mut backbone = match &file.backbone {
                None => ToyBackboneConfig::default(),
                Some(BackboneSpec::Toy(cfg)) => cfg.clone(),
                Some(BackboneSpec::Dump { .. }) => {
                    return Err(CliError::Config("toygen needs a toy [backbone], not a dump".into()))
                }
            };
            if let Some(c) = a.corruption {
                backbone.corruption_fraction = c;
            }
            Plan::Toygen(ToygenSettings {
                out: out_dir(&global, "toygen")?,
                seed,
                count: a.count.unwrap_or(16),
                task: a.task.unwrap_or(Task::Segmentation),
                backbone,
            })
        }
        Command::AnnotateExport(flags) => {
            let (a, keys) = overlay("annotate-export", file.annotate_export.as_ref(), &flags)?;
            overrides.extend(keys);
            Plan::AnnotateExport(ExportSettings {
                out: out_dir(&global, "annotate-export")?,
                project: required(a.project, "annotate-export", "project", "project")?,
            })
        }
        Command::Train(flags) => {
            let (a, keys) = overlay("train", file.train.as_ref(), &flags)?;
            overrides.extend(keys);
            let d = TrainConfig::default();
            let hidden = match a.hidden {
                None => d.hidden,
                Some(h) => <[usize; 2]>::try_from(h.as_slice())
                    .map_err(|_| CliError::Config(format!("`train.hidden` needs two widths, got {h:?}")))?,
            };
            Plan::Train(TrainSettings {
                out: out_dir(&global, "train")?,
                samples: required(a.samples, "train", "samples", "samples")?,
                train: TrainConfig {
                    members: a.members.unwrap_or(d.members),
                    hidden,
                    steps: a.steps.unwrap_or(d.steps),
                    batch_pixels: a.batch_pixels.unwrap_or(d.batch_pixels),
                    learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
                    include_background: a.include_background.unwrap_or(d.include_background),
                    heat_sigma: a.heat_sigma.or(d.heat_sigma),
                    seed,
                    ..d
                },
            })
        }
        Command::Synthesize(flags) => {
            let (a, keys) = overlay("synthesize", file.synthesize.as_ref(), &flags)?;
            overrides.extend(keys);
            Plan::Synthesize(SynthesizeSettings {
                out: out_dir(&global, "synthesize")?,
                ensemble: required(a.ensemble, "synthesize", "ensemble", "ensemble")?,
                backbone: backbone_for(a.dumps, &file),
                seed,
                count: a.count.unwrap_or(10_000),
                filter: a.filter.unwrap_or(0.10),
                chunk_size: a.chunk_size.unwrap_or(64),
                heat_variance: a.heat_variance.unwrap_or(false),
                stop_after: a.stop_after,
                resume: a.resume.unwrap_or(false),
            })
        }
        Command::Filter(flags) => {
            let (a, keys) = overlay("filter", file.filter.as_ref(), &flags)?;
            overrides.extend(keys);
            Plan::Filter(FilterSettings {
                out: out_dir(&global, "filter")?,
                dataset: required(a.dataset, "filter", "dataset", "dataset")?,
                ratio: a.ratio.unwrap_or(0.10),
            })
        }
        Command::Select(flags) => {
            let (a, keys) = overlay("select", file.select.as_ref(), &flags)?;
            overrides.extend(keys);
            let d = BandParams::default();
            Plan::Select(SelectSettings {
                out: out_dir(&global, "select")?,
                ensemble: required(a.ensemble, "select", "ensemble", "ensemble")?,
                backbone: backbone_for(a.dumps, &file),
                pool_seed: seed,
                pool_size: a.pool_size.unwrap_or(200),
                selection: BandParams {
                    k_percent: a.k.unwrap_or(d.k_percent),
                    band_percent: a.band.unwrap_or(d.band_percent),
                    n_centers: a.centers.unwrap_or(d.n_centers),
                },
            })
        }
        Command::Eval(flags) => {
            let (a, keys) = overlay("eval", file.eval.as_ref(), &flags)?;
            overrides.extend(keys);
            let ensembles = required(a.ensembles, "eval", "ensembles", "ensemble")?;
            if ensembles.is_empty() {
                return Err(CliError::Usage("`eval.ensembles` is empty".into()));
            }
            Plan::Eval(EvalSettings {
                out: out_dir(&global, "eval")?,
                ensembles,
                samples: required(a.samples, "eval", "samples", "samples")?,
                ignore_background: a.ignore_background.unwrap_or(false),
                thresholds: a
                    .thresholds
                    .unwrap_or_else(|| labelsynth::metrics::PckConfig::default().thresholds),
            })
        }
        Command::Serve(flags) => {
            let (a, keys) = overlay("serve", file.serve.as_ref(), &flags)?;
            overrides.extend(keys);
            let addr = a.addr.unwrap_or_else(|| "127.0.0.1:8080".into());
            Plan::Serve(ServeSettings {
                project: required(a.project, "serve", "project", "project")?,
                addr: addr
                    .parse()
                    .map_err(|_| CliError::Usage(format!("`serve.addr`: `{addr}` is not a socket address")))?,
                backbone: file.backbone.clone().unwrap_or_default(),
                pool_size: a.pool_size.unwrap_or(200),
                seed: global.seed,
            })
        }
        Command::Validate(flags) => {
            let (a, keys) = overlay("validate", file.validate.as_ref(), &flags)?;
            overrides.extend(keys);
            Plan::Validate(ValidateSettings {
                dataset: required(a.dataset, "validate", "dataset", "dataset")?,
            })
        }
    };
    overrides.retain(|k| k != "workers");
    Ok(Resolved {
        plan,
        overrides,
        config_file: cli.config,
        workers,
    })
}

/// Parses and resolves without running anything.
pub fn resolve_args<I, T>(args: I, env_workers: Option<String>) -> Result<Resolved, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    resolve(cli, env_workers)
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = resolve(cli, std::env::var(WORKERS_ENV).ok()).and_then(|r| commands::execute(&r));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
