//! Human annotations and round bookkeeping: polygon records, their
//! rasterization into label masks, and the per-round candidate state machine.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::sha256_hex;
use crate::interpreter::{LabelSchema, Task};
use crate::keypoints::Keypoint;
use crate::raster::LabelMask;
use crate::selection::SelectionRound;

/// Vertex coordinates are snapped to this many steps per pixel before filling.
pub const SNAP: i64 = 256;
/// Accepted candidates allowed per round.
pub const MAX_ACCEPTED: usize = 6;
pub const ROUND_STATE_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationError {
    #[error("label `{0}` is not in the schema")]
    UnknownLabel(String),
    #[error("polygon {index} has {count} vertices; at least 3 required")]
    TooFewVertices { index: usize, count: usize },
    #[error("polygon {index} vertex ({x}, {y}) lies outside {width}x{height}")]
    VertexBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("keypoint `{name}` at ({x}, {y}) is invalid: {reason}")]
    Keypoint {
        name: String,
        x: f64,
        y: f64,
        reason: &'static str,
    },
    #[error("record task does not match the {0:?} schema")]
    Task(Task),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polygon {
    pub label: String,
    /// `(x, y)` in pixel units; pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
    pub vertices: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub sample_id: u64,
    #[serde(default)]
    pub annotator: String,
    /// Painted in order; later polygons overpaint earlier ones.
    #[serde(default)]
    pub polygons: Vec<Polygon>,
    #[serde(default)]
    pub keypoints: Vec<Keypoint>,
    /// Seconds since the Unix epoch.
    #[serde(default)]
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_hash: Option<String>,
}

impl AnnotationRecord {
    pub fn new(sample_id: u64) -> Self {
        Self {
            sample_id,
            annotator: String::new(),
            polygons: Vec::new(),
            keypoints: Vec::new(),
            created_at: 0,
            mask_hash: None,
        }
    }
}

pub fn mask_hash(mask: &LabelMask) -> String {
    let mut bytes = Vec::with_capacity(16 + mask.data.len());
    bytes.extend_from_slice(&(mask.width as u64).to_le_bytes());
    bytes.extend_from_slice(&(mask.height as u64).to_le_bytes());
    bytes.extend_from_slice(&mask.data);
    sha256_hex(&bytes)
}

fn snap(v: f64) -> i64 {
    (v * SNAP as f64).round() as i64
}

/// Rational `num / den` with `den > 0`.
#[derive(Clone, Copy)]
struct Crossing {
    num: i128,
    den: i128,
}

/// Number of pixel centers `(i + 0.5)` strictly left of `c`, clamped to
/// `[0, len]`.
fn centers_before(c: Crossing, len: usize) -> usize {
    // Smallest i with (2i + 1) * SNAP/2 * den >= num.
    let half = (SNAP / 2) as i128;
    let step = SNAP as i128 * c.den;
    let i_min = (c.num - half * c.den + step - 1).div_euclid(step);
    i_min.clamp(0, len as i128) as usize
}

/// Paints one polygon with the even-odd rule, sampling pixel centers, using
/// exact integer arithmetic on snapped vertices.
fn fill_polygon(mask: &mut LabelMask, vertices: &[(i64, i64)], label: u8) {
    let (w, h) = (mask.width, mask.height);
    let ys = vertices.iter().map(|v| v.1);
    let (ymin, ymax) = (ys.clone().min().unwrap_or(0), ys.max().unwrap_or(0));
    let mut xs: Vec<Crossing> = Vec::new();
    for j in 0..h {
        let py = (2 * j as i64 + 1) * SNAP / 2;
        if py < ymin || py >= ymax {
            continue;
        }
        xs.clear();
        for k in 0..vertices.len() {
            let (x0, y0) = vertices[k];
            let (x1, y1) = vertices[(k + 1) % vertices.len()];
            if (y0 > py) == (y1 > py) {
                continue;
            }
            let (x0, y0, x1, y1, py) = (x0 as i128, y0 as i128, x1 as i128, y1 as i128, py as i128);
            let (mut num, mut den) = (x0 * (y1 - y0) + (py - y0) * (x1 - x0), y1 - y0);
            if den < 0 {
                num = -num;
                den = -den;
            }
            xs.push(Crossing { num, den });
        }
        xs.sort_by(|a, b| (a.num * b.den).cmp(&(b.num * a.den)));
        for pair in xs.chunks_exact(2) {
            let (a, b) = (centers_before(pair[0], w), centers_before(pair[1], w));
            for i in a..b {
                mask.set(i, j, label);
            }
        }
    }
}

/// Label mask of a record: background everywhere, then each polygon painted
/// in record order.
pub fn rasterize(
    record: &AnnotationRecord,
    height: usize,
    width: usize,
    schema: &LabelSchema,
) -> Result<LabelMask, AnnotationError> {
    let mut mask = LabelMask::background(width, height);
    let mut prepared = Vec::with_capacity(record.polygons.len());
    for (index, poly) in record.polygons.iter().enumerate() {
        let label = schema
            .index_of(&poly.label)
            .filter(|_| schema.task() == Task::Segmentation)
            .ok_or_else(|| AnnotationError::UnknownLabel(poly.label.clone()))?;
        if poly.vertices.len() < 3 {
            return Err(AnnotationError::TooFewVertices {
                index,
                count: poly.vertices.len(),
            });
        }
        let mut snapped = Vec::with_capacity(poly.vertices.len());
        for &[x, y] in &poly.vertices {
            if !(x >= 0.0 && y >= 0.0 && x <= width as f64 && y <= height as f64) {
                return Err(AnnotationError::VertexBounds {
                    index,
                    x,
                    y,
                    width,
                    height,
                });
            }
            snapped.push((snap(x), snap(y)));
        }
        prepared.push((snapped, label as u8));
    }
    for (vertices, label) in &prepared {
        fill_polygon(&mut mask, vertices, *label);
    }
    Ok(mask)
}

/// Keypoints of a record in schema order, validated against the image.
pub fn record_keypoints(
    record: &AnnotationRecord,
    height: usize,
    width: usize,
    schema: &LabelSchema,
) -> Result<Vec<Keypoint>, AnnotationError> {
    if schema.task() != Task::Keypoints {
        return Err(AnnotationError::Task(schema.task()));
    }
    let bad = |k: &Keypoint, reason| AnnotationError::Keypoint {
        name: k.name.clone(),
        x: k.x,
        y: k.y,
        reason,
    };
    for k in &record.keypoints {
        if !schema.keypoint_names().iter().any(|n| n == &k.name) {
            return Err(bad(k, "not in schema"));
        }
        if !(k.x >= 0.0 && k.y >= 0.0 && k.x <= (width - 1) as f64 && k.y <= (height - 1) as f64) {
            return Err(bad(k, "out of bounds"));
        }
    }
    schema
        .keypoint_names()
        .iter()
        .map(|name| {
            record.keypoints.iter().rev().find(|k| &k.name == name).cloned().ok_or_else(|| {
                AnnotationError::Keypoint {
                    name: name.clone(),
                    x: f64::NAN,
                    y: f64::NAN,
                    reason: "missing",
                }
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateStatus {
    Proposed,
    Accepted,
    Annotated,
    Skipped,
}

impl CandidateStatus {
    /// Forward-only: proposed -> accepted -> annotated, with skipping allowed
    /// until a candidate is annotated.
    pub fn can_become(self, next: CandidateStatus) -> bool {
        use CandidateStatus::*;
        matches!(
            (self, next),
            (Proposed, Accepted) | (Proposed, Skipped) | (Accepted, Annotated) | (Accepted, Skipped)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub id: u64,
    pub status: CandidateStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lineage {
    /// Checkpoint hash of the ensemble that scored this round's pool.
    pub ensemble_hash: Option<String>,
    pub parent_round: Option<u32>,
}

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("candidate {0} is not in this round")]
    UnknownCandidate(u64),
    #[error("candidate {id}: cannot go from {from:?} to {to:?}")]
    Transition {
        id: u64,
        from: CandidateStatus,
        to: CandidateStatus,
    },
    #[error("round already has {MAX_ACCEPTED} accepted candidates")]
    AcceptLimit,
    #[error("unsupported round state version {0}")]
    Version(u32),
    #[error("round state: {0}")]
    Invalid(String),
    #[error("round state json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RoundError {
    /// Stable machine-readable reason.
    pub fn code(&self) -> &'static str {
        match self {
            RoundError::UnknownCandidate(_) => "unknown_candidate",
            RoundError::Transition { .. } => "invalid_transition",
            RoundError::AcceptLimit => "accept_limit",
            RoundError::Version(_) => "version",
            RoundError::Invalid(_) | RoundError::Json(_) => "invalid_state",
            RoundError::Io(_) => "io",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundState {
    pub version: u32,
    pub round: u32,
    pub selection: SelectionRound,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub lineage: Lineage,
}

impl RoundState {
    pub fn new(round: u32, selection: SelectionRound, lineage: Lineage) -> Self {
        let candidates = selection
            .chosen
            .iter()
            .map(|&id| Candidate {
                id,
                status: CandidateStatus::Proposed,
            })
            .collect();
        Self {
            version: ROUND_STATE_VERSION,
            round,
            selection,
            candidates,
            lineage,
        }
    }

    pub fn status(&self, id: u64) -> Option<CandidateStatus> {
        self.candidates.iter().find(|c| c.id == id).map(|c| c.status)
    }

    pub fn accepted_count(&self) -> usize {
        self.candidates
            .iter()
            .filter(|c| matches!(c.status, CandidateStatus::Accepted | CandidateStatus::Annotated))
            .count()
    }

    pub fn transition(&mut self, id: u64, to: CandidateStatus) -> Result<(), RoundError> {
        let accepted = self.accepted_count();
        let c = self
            .candidates
            .iter_mut()
            .find(|c| c.id == id)
            .ok_or(RoundError::UnknownCandidate(id))?;
        if !c.status.can_become(to) {
            return Err(RoundError::Transition {
                id,
                from: c.status,
                to,
            });
        }
        if to == CandidateStatus::Accepted && accepted >= MAX_ACCEPTED {
            return Err(RoundError::AcceptLimit);
        }
        c.status = to;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RoundError> {
        if self.version != ROUND_STATE_VERSION {
            return Err(RoundError::Version(self.version));
        }
        let ids: Vec<u64> = self.candidates.iter().map(|c| c.id).collect();
        if ids != self.selection.chosen {
            return Err(RoundError::Invalid("candidates differ from the chosen ids".into()));
        }
        if self.accepted_count() > MAX_ACCEPTED {
            return Err(RoundError::AcceptLimit);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("round state serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, RoundError> {
        let state: RoundState = serde_json::from_str(text)?;
        state.validate()?;
        Ok(state)
    }

    /// Writes via a temporary file and rename so readers never see a torn file.
    pub fn save(&self, path: &Path) -> Result<(), RoundError> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RoundError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
