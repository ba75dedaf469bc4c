//! Flags, the TOML config file, and their merge. Every flag has a key of the
//! same name in the subcommand's table; a flag beats the file, the file
//! beats the built-in default.

use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use labelsynth::backbone::BackboneSpec;
use labelsynth::interpreter::Task;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const WORKERS_ENV: &str = "SYNTHLABEL_WORKERS";

fn parse_task(s: &str) -> Result<Task, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown task `{s}` (expected segmentation or keypoints)"))
}

#[derive(Parser, Debug)]
#[command(name = "labelsynth", version, about = "Synthesize labeled datasets from a generator's features")]
pub struct Cli {
    /// TOML config file (`version = 1`).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalArgs {
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory; the only place a subcommand writes.
    #[arg(long, global = true, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads (also `SYNTHLABEL_WORKERS`).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate toy samples as `.fvd` dumps with ground truth.
    Toygen(ToygenArgs),
    /// Export a project's human annotations as `.fvd` training samples.
    AnnotateExport(ExportArgs),
    /// Train an interpreter ensemble on annotated samples.
    Train(TrainArgs),
    /// Generate, label, score and filter a synthetic dataset.
    Synthesize(SynthesizeArgs),
    /// Re-run the uncertainty filter on a finished dataset.
    Filter(FilterArgs),
    /// Propose an active-learning round from a fresh pool.
    Select(SelectArgs),
    /// Score ensembles on held-out annotated samples.
    Eval(EvalArgs),
    /// Run the annotation service over a project directory.
    Serve(ServeArgs),
    /// Check a synthesized dataset against its manifest.
    Validate(ValidateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Toygen(_) => "toygen",
            Command::AnnotateExport(_) => "annotate-export",
            Command::Train(_) => "train",
            Command::Synthesize(_) => "synthesize",
            Command::Filter(_) => "filter",
            Command::Select(_) => "select",
            Command::Eval(_) => "eval",
            Command::Serve(_) => "serve",
            Command::Validate(_) => "validate",
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToygenArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[arg(long, value_parser = parse_task)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    /// Overrides `[backbone] corruption_fraction`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<f64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportArgs {
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub project: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Directory of `.fvd` samples with truth and a `schema.json`.
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<PathBuf>,
    /// Ensemble size.
    #[arg(long = "n", visible_alias = "members")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub members: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_pixels: Option<usize>,
    #[arg(long, visible_alias = "lr")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_background: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heat_sigma: Option<f64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Fraction of most uncertain pairs to drop.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<usize>,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heat_variance: Option<bool>,
    /// Stop with a partial manifest after this many pairs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_after: Option<usize>,
    /// Continue a partial run in the output directory.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<bool>,
    /// Serve features from `.fvd` dumps instead of the `[backbone]` table.
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dumps: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterArgs {
    /// Synthesized dataset directory.
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    /// Percent of most uncertain pool entries discarded.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    /// Percent width of the candidate band.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centers: Option<usize>,
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dumps: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// Checkpoint to score; repeat to run five-fold checkpoint selection.
    #[arg(long = "ensemble", value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensembles: Option<Vec<PathBuf>>,
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<PathBuf>,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ignore_background: Option<bool>,
    /// PCK thresholds in percent of the longer image side.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeArgs {
    /// Project directory; created with a first round when empty.
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub project: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub addr: Option<String>,
    /// Pool size for a newly created project.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateArgs {
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub backbone: Option<BackboneSpec>,
    #[serde(default)]
    pub toygen: Option<ToygenArgs>,
    #[serde(default, rename = "annotate-export")]
    pub annotate_export: Option<ExportArgs>,
    #[serde(default)]
    pub train: Option<TrainArgs>,
    #[serde(default)]
    pub synthesize: Option<SynthesizeArgs>,
    #[serde(default)]
    pub filter: Option<FilterArgs>,
    #[serde(default)]
    pub select: Option<SelectArgs>,
    #[serde(default)]
    pub eval: Option<EvalArgs>,
    #[serde(default)]
    pub serve: Option<ServeArgs>,
    #[serde(default)]
    pub validate: Option<ValidateArgs>,
}

impl FileConfig {
    pub fn global(&self) -> GlobalArgs {
        GlobalArgs {
            seed: self.seed,
            out: self.out.clone(),
            workers: self.workers,
        }
    }
}

pub fn load_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_file(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn parse_file(text: &str) -> Result<FileConfig, String> {
    let file: FileConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    if file.version != CONFIG_VERSION {
        return Err(format!("key `version`: {} is not supported (expected {CONFIG_VERSION})", file.version));
    }
    Ok(file)
}

/// `flags` laid over `file`, plus the dotted keys the flags set.
pub fn overlay<T>(section: &str, file: Option<&T>, flags: &T) -> Result<(T, Vec<String>), CliError>
where
    T: Serialize + DeserializeOwned,
{
    let to_map = |v: serde_json::Value| match v {
        serde_json::Value::Object(m) => m,
        _ => serde_json::Map::new(),
    };
    let mut merged = to_map(serde_json::to_value(file).expect("args serialize"));
    let set = to_map(serde_json::to_value(flags).expect("args serialize"));
    let keys = set
        .keys()
        .map(|k| if section.is_empty() { k.clone() } else { format!("{section}.{k}") })
        .collect();
    merged.extend(set);
    let value = serde_json::from_value(serde_json::Value::Object(merged))
        .map_err(|e| CliError::Config(format!("[{section}]: {e}")))?;
    Ok((value, keys))
}

/// Where the worker count came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Workers {
    pub count: Option<usize>,
    pub source: &'static str,
}

pub fn resolve_workers(flag: Option<usize>, env: Option<String>, file: Option<usize>) -> Result<Workers, CliError> {
    let env = match env {
        Some(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer")))?,
        ),
        None => None,
    };
    let (count, source) = match (flag, env, file) {
        (Some(n), _, _) => (Some(n), "flag"),
        (None, Some(n), _) => (Some(n), "env"),
        (None, None, Some(n)) => (Some(n), "file"),
        _ => (None, "default"),
    };
    if count == Some(0) {
        return Err(CliError::Usage("`workers` must be positive".into()));
    }
    Ok(Workers { count, source })
}
