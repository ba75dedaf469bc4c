//! Keypoint locations and their line-delimited record format.
//!
//! A keypoint file starts with the line `# keypoints v1`, followed by one
//! tab-separated record per keypoint: `name x y peak`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A named location in pixel-index coordinates (pixel `(i, j)` sits at `x = i`, `y = j`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub fn new(name: impl Into<String>, x: f64, y: f64) -> Self {
        Self {
            name: name.into(),
            x,
            y,
        }
    }
}

/// A predicted keypoint with the heat value at its location.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointRecord {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub peak: f64,
}

pub const KEYPOINT_HEADER: &str = "# keypoints v1";

#[derive(Debug, Error, PartialEq)]
pub enum KeypointParseError {
    #[error("missing or unknown header (expected `{KEYPOINT_HEADER}`)")]
    Header,
    #[error("line {line}: expected 4 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: field `{field}` is not a finite number")]
    Number { line: usize, field: &'static str },
    #[error("line {line}: keypoint name must be non-empty and free of whitespace")]
    Name { line: usize },
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.chars().any(char::is_whitespace)
}

pub fn write_keypoint_records(records: &[KeypointRecord]) -> String {
    let mut out = String::from(KEYPOINT_HEADER);
    out.push('\n');
    for r in records {
        debug_assert!(valid_name(&r.name));
        // `{:?}` on f64 prints the shortest round-trippable form.
        let _ = writeln!(out, "{}\t{:?}\t{:?}\t{:?}", r.name, r.x, r.y, r.peak);
    }
    out
}

pub fn parse_keypoint_records(text: &str) -> Result<Vec<KeypointRecord>, KeypointParseError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == KEYPOINT_HEADER => {}
        _ => return Err(KeypointParseError::Header),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(KeypointParseError::FieldCount {
                line,
                found: fields.len(),
            });
        }
        if !valid_name(fields[0]) {
            return Err(KeypointParseError::Name { line });
        }
        let num = |s: &str, field| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or(KeypointParseError::Number { line, field })
        };
        out.push(KeypointRecord {
            name: fields[0].to_string(),
            x: num(fields[1], "x")?,
            y: num(fields[2], "y")?,
            peak: num(fields[3], "peak")?,
        });
    }
    Ok(out)
}
