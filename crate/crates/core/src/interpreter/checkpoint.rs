//! Ensemble checkpoint: `SLEN`, u32 version, u64 metadata length, JSON
//! metadata (schema, config, shapes), then every member's parameters and
//! every loss curve as little-endian f64. Decoding re-validates everything.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::mlp::{Head, MlpClassifier};
use super::train::{head_for, InterpreterEnsemble, TrainConfig};
use super::LabelSchema;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SLEN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on the metadata block; anything larger is not ours.
const MAX_METADATA: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not an ensemble checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated in {0}")]
    Truncated(&'static str),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    schema: LabelSchema,
    config: TrainConfig,
    widths: [usize; 4],
    head: Head,
    members: usize,
    curve_lengths: Vec<usize>,
}

pub fn encode_checkpoint(ensemble: &InterpreterEnsemble) -> Vec<u8> {
    let meta = Metadata {
        schema: ensemble.schema().clone(),
        config: ensemble.config().clone(),
        widths: ensemble.members()[0].widths(),
        head: ensemble.members()[0].head(),
        members: ensemble.len(),
        curve_lengths: ensemble.loss_curves().iter().map(Vec::len).collect(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata is always serializable");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in ensemble.members() {
        for p in m.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    for curve in ensemble.loss_curves() {
        for v in curve {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(data: &'a [u8], pos: &mut usize, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= data.len())
        .ok_or(CheckpointError::Truncated(what))?;
    let s = &data[*pos..end];
    *pos = end;
    Ok(s)
}

fn f64s(data: &[u8], pos: &mut usize, n: usize, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
    let bytes = n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?;
    let raw = take(data, pos, bytes, what)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn checked_param_count(w: [usize; 4]) -> Option<usize> {
    (0..3).try_fold(0usize, |acc, l| {
        w[l].checked_mul(w[l + 1])?.checked_add(w[l + 1])?.checked_add(acc)
    })
}

pub fn decode_checkpoint(data: &[u8]) -> Result<InterpreterEnsemble, CheckpointError> {
    let mut pos = 0;
    if take(data, &mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(data, &mut pos, 4, "header")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = u64::from_le_bytes(take(data, &mut pos, 8, "header")?.try_into().unwrap());
    if meta_len > MAX_METADATA {
        return Err(CheckpointError::Invalid(format!("metadata length {meta_len}")));
    }
    let meta: Metadata = serde_json::from_slice(take(data, &mut pos, meta_len as usize, "metadata")?)?;
    if meta.widths.contains(&0) || meta.members == 0 || meta.curve_lengths.len() != meta.members {
        return Err(CheckpointError::Invalid("empty shapes or member count".into()));
    }
    if meta.head != head_for(meta.schema.task()) || meta.widths[3] != meta.schema.output_dim() {
        return Err(CheckpointError::Invalid("head does not match the schema".into()));
    }
    // Bound every allocation by the bytes actually present.
    let remaining = (data.len() - pos) / 8;
    let count = checked_param_count(meta.widths)
        .filter(|&c| c.checked_mul(meta.members).is_some_and(|t| t <= remaining))
        .ok_or(CheckpointError::Truncated("parameters"))?;
    let members = (0..meta.members)
        .map(|_| {
            let params = f64s(data, &mut pos, count, "parameters")?;
            MlpClassifier::from_params(meta.widths, meta.head, params)
                .map_err(|e| CheckpointError::Invalid(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let curves = meta
        .curve_lengths
        .iter()
        .map(|&n| f64s(data, &mut pos, n, "loss curves"))
        .collect::<Result<Vec<_>, _>>()?;
    if pos != data.len() {
        return Err(CheckpointError::TrailingBytes(data.len() - pos));
    }
    meta.config
        .validate()
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    InterpreterEnsemble::new(members, meta.schema, meta.config, curves)
        .map_err(|e| CheckpointError::Invalid(e.to_string()))
}

impl InterpreterEnsemble {
    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, encode_checkpoint(self))?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        decode_checkpoint(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ensemble() -> InterpreterEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let schema = LabelSchema::segmentation(["bg", "a", "b"]).unwrap();
        let members = (0..3)
            .map(|_| MlpClassifier::init([4, 3, 2, 3], Head::Softmax, &mut rng))
            .collect();
        let config = TrainConfig {
            members: 3,
            learning_rate: 0.1 + 0.2,
            heat_sigma: Some(1.0 / 3.0),
            ..TrainConfig::default()
        };
        InterpreterEnsemble::new(members, schema, config, vec![vec![1.5, f64::MIN_POSITIVE], vec![], vec![0.1]]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let e = ensemble();
        let bytes = encode_checkpoint(&e);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, e);
        assert_eq!(encode_checkpoint(&back), bytes);
        for (a, b) in back.members().iter().zip(e.members()) {
            assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = encode_checkpoint(&ensemble());
        assert!(matches!(decode_checkpoint(&bytes[..3]), Err(CheckpointError::Truncated("magic"))));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated("loss curves"))
        ));
        bytes.push(0);
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::TrailingBytes(1))));
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Version(9))));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        let e = ensemble();
        e.save(&path).unwrap();
        assert_eq!(InterpreterEnsemble::load(&path).unwrap(), e);
    }

    proptest! {
        #[test]
        fn decoder_never_panics(data in proptest::collection::vec(any::<u8>(), 0..512)) {
            let _ = decode_checkpoint(&data);
        }

        #[test]
        fn corrupted_bytes_never_panic(i in 0usize..1000, b in any::<u8>()) {
            let mut bytes = encode_checkpoint(&ensemble());
            let i = i % bytes.len();
            bytes[i] = b;
            let _ = decode_checkpoint(&bytes);
        }
    }
}
