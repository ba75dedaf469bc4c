use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Keypoints,
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("schema needs at least {min} names, got {got}")]
    TooFew { min: usize, got: usize },
    #[error("schema supports at most 256 labels, got {0}")]
    TooMany(usize),
    #[error("duplicate label name `{0}`")]
    Duplicate(String),
    #[error("palette has {palette} entries for {names} names")]
    Palette { names: usize, palette: usize },
}

/// Ordered label names (index 0 is background) with a display palette.
///
/// For keypoint schemas the names after index 0 are the keypoint names, one
/// heat output each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct LabelSchema {
    names: Vec<String>,
    palette: Vec<[u8; 3]>,
    task: Task,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    names: Vec<String>,
    palette: Vec<[u8; 3]>,
    task: Task,
}

impl TryFrom<RawSchema> for LabelSchema {
    type Error = SchemaError;
    fn try_from(r: RawSchema) -> Result<Self, SchemaError> {
        LabelSchema::new(r.names, r.palette, r.task)
    }
}

impl From<LabelSchema> for RawSchema {
    fn from(s: LabelSchema) -> Self {
        RawSchema {
            names: s.names,
            palette: s.palette,
            task: s.task,
        }
    }
}

impl LabelSchema {
    pub fn new(names: Vec<String>, palette: Vec<[u8; 3]>, task: Task) -> Result<Self, SchemaError> {
        let min = match task {
            Task::Segmentation => 2,
            Task::Keypoints => 2,
        };
        if names.len() < min {
            return Err(SchemaError::TooFew {
                min,
                got: names.len(),
            });
        }
        if names.len() > 256 {
            return Err(SchemaError::TooMany(names.len()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(SchemaError::Duplicate(n.clone()));
            }
        }
        if palette.len() != names.len() {
            return Err(SchemaError::Palette {
                names: names.len(),
                palette: palette.len(),
            });
        }
        Ok(Self {
            names,
            palette,
            task,
        })
    }

    /// Segmentation schema with an automatically generated palette.
    pub fn segmentation<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, SchemaError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let palette = default_palette(names.len());
        Self::new(names, palette, Task::Segmentation)
    }

    /// Keypoint schema; `background` is prepended as index 0.
    pub fn keypoints<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, SchemaError> {
        let mut all = vec!["background".to_string()];
        all.extend(names.into_iter().map(Into::into));
        let palette = default_palette(all.len());
        Self::new(all, palette, Task::Keypoints)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn palette(&self) -> &[[u8; 3]] {
        &self.palette
    }
    pub fn task(&self) -> Task {
        self.task
    }
    pub fn num_labels(&self) -> usize {
        self.names.len()
    }

    /// Width of the interpreter head: one logit per label, or one heat value
    /// per keypoint.
    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Segmentation => self.names.len(),
            Task::Keypoints => self.names.len() - 1,
        }
    }

    pub fn keypoint_names(&self) -> &[String] {
        &self.names[1..]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Black background followed by well-separated hues.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 12] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
    ];
    (0..n)
        .map(|i| {
            if i < BASE.len() {
                BASE[i]
            } else {
                // Deterministic spread for large schemas.
                let h = (i as u32).wrapping_mul(2_654_435_761);
                [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
            }
        })
        .collect()
}
