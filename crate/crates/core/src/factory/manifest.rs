//! The dataset manifest and its validator.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FactoryError;
use crate::hash::{json_hash, sha256_hex};
use crate::interpreter::{LabelSchema, Task};
use crate::keypoints::parse_keypoint_records;
use crate::raster::LabelMask;
use crate::uncertainty::{drop_count, filter_by_uncertainty, ImageScore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const UNCERTAINTY_LOG: &str = "uncertainty.log";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneInfo {
    pub descriptor: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: u64,
    pub seed: u64,
    /// Paths are relative to the dataset directory.
    pub image: Option<String>,
    pub image_hash: Option<String>,
    pub annotation: String,
    pub annotation_hash: String,
    pub image_score: f64,
    /// Unset until the whole run has been scored.
    pub kept: Option<bool>,
}

/// Where an interrupted run continues and what it must match.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeToken {
    pub next_index: usize,
    pub provenance: String,
}

/// Informational only; excluded from determinism comparisons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub elapsed_seconds: f64,
    pub seconds_per_pair: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub schema: LabelSchema,
    pub backbone: BackboneInfo,
    pub ensemble_hash: String,
    pub requested: usize,
    pub filter_ratio: f64,
    pub seed: u64,
    /// Keypoint runs: score images by member heat variance.
    pub heat_variance: bool,
    pub complete: bool,
    pub kept_count: usize,
    pub dropped_count: usize,
    pub resume: Option<ResumeToken>,
    pub pairs: Vec<PairRecord>,
    pub timing: Timing,
}

#[derive(Serialize)]
struct Provenance<'a> {
    version: u32,
    schema: &'a LabelSchema,
    backbone: &'a BackboneInfo,
    ensemble_hash: &'a str,
    requested: usize,
    filter_ratio: f64,
    seed: u64,
    heat_variance: bool,
}

impl DatasetManifest {
    /// Hash of everything that determines the run's output.
    pub fn provenance(&self) -> String {
        json_hash(&Provenance {
            version: self.version,
            schema: &self.schema,
            backbone: &self.backbone,
            ensemble_hash: &self.ensemble_hash,
            requested: self.requested,
            filter_ratio: self.filter_ratio,
            seed: self.seed,
            heat_variance: self.heat_variance,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// The manifest text with timing zeroed, for byte comparisons across runs.
    pub fn to_json_without_timing(&self) -> String {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
        .to_json()
    }

    pub fn from_json(text: &str) -> Result<Self, FactoryError> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(FactoryError::Manifest)?;
        if m.version != MANIFEST_VERSION {
            return Err(FactoryError::Resume(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self, FactoryError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| FactoryError::Io { path, source })?;
        Self::from_json(&text)
    }

    pub fn save(&self, dir: &Path) -> Result<(), FactoryError> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, self.to_json()).map_err(|source| FactoryError::Io {
            path: tmp.clone(),
            source,
        })?;
        std::fs::rename(&tmp, &path).map_err(|source| FactoryError::Io { path, source })
    }

    pub fn kept_ids(&self) -> Vec<u64> {
        self.pairs.iter().filter(|p| p.kept == Some(true)).map(|p| p.id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Incomplete { pairs: usize, requested: usize },
    PairCount { expected: usize, found: usize },
    DuplicateId(u64),
    KeptCount { expected: usize, found: usize },
    /// Kept flags disagree with re-running the filter on the recorded scores.
    FilterMismatch { id: u64 },
    MissingFile { id: u64, path: String },
    HashMismatch { id: u64, path: String },
    Palette { id: u64, pixels: usize },
    MaskShape { id: u64, detail: String },
    Unreadable { id: u64, path: String, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Incomplete { pairs, requested } => {
                write!(f, "manifest is partial: {pairs} of {requested} pairs")
            }
            Violation::PairCount { expected, found } => write!(f, "{found} pair records, expected {expected}"),
            Violation::DuplicateId(id) => write!(f, "pair id {id} appears more than once"),
            Violation::KeptCount { expected, found } => write!(f, "{found} kept pairs, expected {expected}"),
            Violation::FilterMismatch { id } => write!(f, "pair {id}: kept flag disagrees with its score"),
            Violation::MissingFile { id, path } => write!(f, "pair {id}: missing file {path}"),
            Violation::HashMismatch { id, path } => write!(f, "pair {id}: content hash mismatch for {path}"),
            Violation::Palette { id, pixels } => write!(f, "pair {id}: {pixels} mask pixels outside the schema"),
            Violation::MaskShape { id, detail } => write!(f, "pair {id}: {detail}"),
            Violation::Unreadable { id, path, reason } => write!(f, "pair {id}: cannot read {path}: {reason}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub pairs: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_file(dir: &Path, id: u64, rel: &str, hash: &str, out: &mut Vec<Violation>) -> Option<Vec<u8>> {
    match std::fs::read(dir.join(rel)) {
        Ok(bytes) => {
            if sha256_hex(&bytes) != hash {
                out.push(Violation::HashMismatch {
                    id,
                    path: rel.to_string(),
                });
            }
            Some(bytes)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            out.push(Violation::MissingFile {
                id,
                path: rel.to_string(),
            });
            None
        }
        Err(e) => {
            out.push(Violation::Unreadable {
                id,
                path: rel.to_string(),
                reason: e.to_string(),
            });
            None
        }
    }
}

/// Checks every manifest invariant and every referenced file. Only an
/// unreadable manifest is an error; everything else is itemized.
pub fn validate_manifest(dir: &Path) -> Result<ValidationReport, FactoryError> {
    let m = DatasetManifest::load(dir)?;
    let mut v = Vec::new();
    if !m.complete {
        v.push(Violation::Incomplete {
            pairs: m.pairs.len(),
            requested: m.requested,
        });
    } else {
        if m.pairs.len() != m.requested {
            v.push(Violation::PairCount {
                expected: m.requested,
                found: m.pairs.len(),
            });
        }
        let expected = m.requested - drop_count(m.requested, m.filter_ratio);
        let found = m.pairs.iter().filter(|p| p.kept == Some(true)).count();
        if found != expected || m.kept_count != found {
            v.push(Violation::KeptCount { expected, found });
        }
        let scores: Vec<ImageScore> = m
            .pairs
            .iter()
            .map(|p| ImageScore {
                id: p.id,
                score: p.image_score,
            })
            .collect();
        if let Ok((kept, _)) = filter_by_uncertainty(&scores, m.filter_ratio) {
            let kept: HashSet<u64> = kept.into_iter().collect();
            for p in &m.pairs {
                if p.kept != Some(kept.contains(&p.id)) {
                    v.push(Violation::FilterMismatch { id: p.id });
                }
            }
        }
    }
    let mut seen = HashSet::new();
    for p in &m.pairs {
        if !seen.insert(p.id) {
            v.push(Violation::DuplicateId(p.id));
        }
        if let (Some(img), Some(hash)) = (&p.image, &p.image_hash) {
            check_file(dir, p.id, img, hash, &mut v);
        }
        let Some(bytes) = check_file(dir, p.id, &p.annotation, &p.annotation_hash, &mut v) else {
            continue;
        };
        match m.schema.task() {
            Task::Segmentation => match LabelMask::from_png(&bytes) {
                Ok(mask) => {
                    let bad = mask.out_of_schema(m.schema.num_labels());
                    if bad > 0 {
                        v.push(Violation::Palette { id: p.id, pixels: bad });
                    }
                }
                Err(e) => v.push(Violation::Unreadable {
                    id: p.id,
                    path: p.annotation.clone(),
                    reason: e.to_string(),
                }),
            },
            Task::Keypoints => {
                let parsed = std::str::from_utf8(&bytes)
                    .map_err(|e| e.to_string())
                    .and_then(|t| parse_keypoint_records(t).map_err(|e| e.to_string()));
                match parsed {
                    Ok(recs) => {
                        let names: Vec<&String> = recs.iter().map(|r| &r.name).collect();
                        if names != m.schema.keypoint_names().iter().collect::<Vec<_>>() {
                            v.push(Violation::MaskShape {
                                id: p.id,
                                detail: "keypoint names differ from the schema".into(),
                            });
                        }
                    }
                    Err(reason) => v.push(Violation::Unreadable {
                        id: p.id,
                        path: p.annotation.clone(),
                        reason,
                    }),
                }
            }
        }
    }
    Ok(ValidationReport {
        pairs: m.pairs.len(),
        violations: v,
    })
}
