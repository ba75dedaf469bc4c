//! Ensemble disagreement: Jensen-Shannon divergence per pixel, summed per
//! image, and the top-fraction filter built on it.
//!
//! Entropies are natural-log (nats) unless a [`LogBase`] says otherwise.

use std::fmt::Write as _;

use thiserror::Error;

use crate::interpreter::MemberDistributions;

/// Tolerance on a distribution's total mass.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("probabilities must be finite and non-negative (entry {index} is {value})")]
    Negative { index: usize, value: f64 },
    #[error("probabilities sum to {0}, not 1")]
    Mass(f64),
    #[error("empty distribution")]
    Empty,
    #[error("need at least one distribution")]
    NoMembers,
    #[error("distribution {index} has {got} classes, expected {expected}")]
    Arity {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("member distributions cover {got} pixels, image has {expected}")]
    MissingPixels { expected: usize, got: usize },
    #[error("filter ratio {0} outside [0, 1)")]
    Ratio(f64),
    #[error("image score for sample {0} is not finite")]
    NonFiniteScore(u64),
    #[error("uncertainty log line {line}: {reason}")]
    Log { line: usize, reason: String },
}

/// A probability vector over the label set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self, UncertaintyError> {
        validate(&probabilities)?;
        Ok(Self(probabilities))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut p = vec![0.0; n];
        p[index] = 1.0;
        Self(p)
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Lowest index among the maximal entries.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn validate(p: &[f64]) -> Result<(), UncertaintyError> {
    if p.is_empty() {
        return Err(UncertaintyError::Empty);
    }
    if let Some((index, &value)) = p.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(UncertaintyError::Negative { index, value });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > MASS_TOLERANCE {
        return Err(UncertaintyError::Mass(sum));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogBase {
    Nats,
    Bits,
}

#[inline]
fn plogp(p: f64, base: LogBase) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        match base {
            LogBase::Nats => p * p.ln(),
            LogBase::Bits => p * p.log2(),
        }
    }
}

fn entropy_raw(p: &[f64], base: LogBase) -> f64 {
    -p.iter().map(|&v| plogp(v, base)).sum::<f64>()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(d: &ClassDistribution) -> f64 {
    entropy_raw(&d.0, LogBase::Nats)
}

/// Entropy of the member mean minus the mean member entropy, in nats.
pub fn js_divergence(dists: &[ClassDistribution]) -> Result<f64, UncertaintyError> {
    js_divergence_in(dists, LogBase::Nats)
}

pub fn js_divergence_in(dists: &[ClassDistribution], base: LogBase) -> Result<f64, UncertaintyError> {
    let first = dists.first().ok_or(UncertaintyError::NoMembers)?;
    let classes = first.len();
    let mut flat = Vec::with_capacity(dists.len() * classes);
    for (index, d) in dists.iter().enumerate() {
        if d.len() != classes {
            return Err(UncertaintyError::Arity {
                index,
                expected: classes,
                got: d.len(),
            });
        }
        flat.extend_from_slice(&d.0);
    }
    let mut scratch = vec![0.0; classes];
    Ok(js_rows(&flat, dists.len(), classes, base, &mut scratch))
}

/// JS over `members` consecutive rows of `classes` probabilities, clamped to
/// `[0, log N]` against rounding.
pub(crate) fn js_rows(rows: &[f64], members: usize, classes: usize, base: LogBase, mean: &mut [f64]) -> f64 {
    mean.iter_mut().for_each(|m| *m = 0.0);
    let mut mean_entropy = 0.0;
    for row in rows.chunks_exact(classes) {
        for (m, &p) in mean.iter_mut().zip(row) {
            *m += p;
        }
        mean_entropy += entropy_raw(row, base);
    }
    let n = members as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let js = entropy_raw(mean, base) - mean_entropy / n;
    let upper = match base {
        LogBase::Nats => n.ln(),
        LogBase::Bits => n.log2(),
    };
    js.clamp(0.0, upper)
}

/// Per-pixel JS raster of one image and its sum.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub raster: Vec<f64>,
    pub image_score: f64,
}

impl UncertaintyReport {
    pub fn summary(&self) -> ImageScore {
        ImageScore {
            id: self.id,
            score: self.image_score,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScore {
    pub id: u64,
    pub score: f64,
}

pub fn score_image(id: u64, dists: &MemberDistributions) -> Result<UncertaintyReport, UncertaintyError> {
    score_image_in(id, dists, LogBase::Nats)
}

pub fn score_image_in(
    id: u64,
    dists: &MemberDistributions,
    base: LogBase,
) -> Result<UncertaintyReport, UncertaintyError> {
    let expected = dists.width * dists.height;
    let stride = dists.members * dists.classes;
    if dists.members == 0 {
        return Err(UncertaintyError::NoMembers);
    }
    if stride == 0 || dists.data.len() != expected * stride {
        return Err(UncertaintyError::MissingPixels {
            expected,
            got: dists.data.len().checked_div(stride).unwrap_or(0),
        });
    }
    let mut scratch = vec![0.0; dists.classes];
    let raster: Vec<f64> = dists
        .data
        .chunks_exact(stride)
        .map(|px| js_rows(px, dists.members, dists.classes, base, &mut scratch))
        .collect();
    let image_score = raster.iter().sum();
    Ok(UncertaintyReport {
        id,
        width: dists.width,
        height: dists.height,
        raster,
        image_score,
    })
}

/// Image score for keypoint ensembles: per-pixel variance of member heat
/// values, summed over pixels and keypoints. `heats[m]` holds member `m`'s
/// clamped heat for every pixel and keypoint.
pub fn heat_variance_score(heats: &[Vec<f64>]) -> f64 {
    let n = heats.len();
    if n == 0 {
        return 0.0;
    }
    let len = heats[0].len();
    (0..len)
        .map(|i| {
            let mean = heats.iter().map(|h| h[i]).sum::<f64>() / n as f64;
            heats.iter().map(|h| (h[i] - mean).powi(2)).sum::<f64>() / n as f64
        })
        .sum()
}

/// `ceil(ratio * n)`, treating products within 1e-9 of an integer as that
/// integer so `0.1 * 10_000` drops exactly 1,000.
pub fn drop_count(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    let count = if (x - r).abs() <= 1e-9 * (n as f64).max(1.0) {
        r
    } else {
        x.ceil()
    };
    (count.max(0.0) as usize).min(n)
}

/// Partition ids into (kept, dropped) by removing the `ceil(ratio * n)`
/// highest scores. Equal scores drop the higher id first. Both lists come
/// back sorted by id.
pub fn filter_by_uncertainty(
    scores: &[ImageScore],
    ratio: f64,
) -> Result<(Vec<u64>, Vec<u64>), UncertaintyError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(UncertaintyError::Ratio(ratio));
    }
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(UncertaintyError::NonFiniteScore(s.id));
    }
    let mut order: Vec<&ImageScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(b.id.cmp(&a.id)));
    let k = drop_count(scores.len(), ratio);
    let mut dropped: Vec<u64> = order[..k].iter().map(|s| s.id).collect();
    let mut kept: Vec<u64> = order[k..].iter().map(|s| s.id).collect();
    dropped.sort_unstable();
    kept.sort_unstable();
    Ok((kept, dropped))
}

pub const UNCERTAINTY_LOG_HEADER: &str = "# uncertainty v1\tid\timage_score\tkept";

#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub id: u64,
    pub image_score: f64,
    pub kept: bool,
}

pub fn write_uncertainty_log(entries: &[AuditEntry]) -> String {
    let mut out = String::from(UNCERTAINTY_LOG_HEADER);
    out.push('\n');
    for e in entries {
        let _ = writeln!(out, "{}\t{:?}\t{}", e.id, e.image_score, e.kept);
    }
    out
}

pub fn parse_uncertainty_log(text: &str) -> Result<Vec<AuditEntry>, UncertaintyError> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, reason: &str| UncertaintyError::Log {
        line,
        reason: reason.to_string(),
    };
    match lines.next() {
        Some((_, h)) if h == UNCERTAINTY_LOG_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(i + 1, "expected 3 fields"));
        }
        let id = f[0].parse().map_err(|_| bad(i + 1, "bad id"))?;
        let image_score: f64 = f[1].parse().map_err(|_| bad(i + 1, "bad score"))?;
        if !image_score.is_finite() {
            return Err(bad(i + 1, "score not finite"));
        }
        let kept = f[2].parse().map_err(|_| bad(i + 1, "bad kept flag"))?;
        out.push(AuditEntry {
            id,
            image_score,
            kept,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(p: &[f64]) -> ClassDistribution {
        ClassDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&ClassDistribution::one_hot(3, 1)), 0.0);
        assert!((entropy(&ClassDistribution::uniform(4)) - 4f64.ln()).abs() < 1e-15);
        // -(0.75 ln 0.75 + 0.25 ln 0.25) = 0.562335144618...
        assert!((entropy(&d(&[0.75, 0.25])) - 0.562_335_144_618_808_4).abs() < 1e-12);
    }

    #[test]
    fn js_cases() {
        let p = d(&[0.2, 0.3, 0.5]);
        assert_eq!(js_divergence(&[p.clone(), p.clone(), p]).unwrap(), 0.0);
        let disjoint = [ClassDistribution::one_hot(2, 0), ClassDistribution::one_hot(2, 1)];
        assert!((js_divergence(&disjoint).unwrap() - 2f64.ln()).abs() < 1e-15);
        // H([.75,.25]) - (ln 2 + 0)/2, frozen from a 30-digit evaluation.
        let v = js_divergence(&[d(&[0.5, 0.5]), d(&[1.0, 0.0])]).unwrap();
        assert!((v - 0.215_761_554_338_835_7).abs() < 1e-12, "{v}");
        assert!((v - 0.2158).abs() < 5e-5);
    }

    #[test]
    fn js_rejects_bad_input() {
        assert_eq!(js_divergence(&[]), Err(UncertaintyError::NoMembers));
        assert!(matches!(
            js_divergence(&[d(&[1.0, 0.0]), d(&[0.2, 0.3, 0.5])]),
            Err(UncertaintyError::Arity { index: 1, .. })
        ));
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![1.5, -0.5]).is_err());
    }

    fn dists_2x2(disagree_at: Option<usize>) -> MemberDistributions {
        let mut data = Vec::new();
        for px in 0..4 {
            if Some(px) == disagree_at {
                data.extend_from_slice(&[0.5, 0.5, 1.0, 0.0]);
            } else {
                data.extend_from_slice(&[0.9, 0.1, 0.9, 0.1]);
            }
        }
        MemberDistributions {
            width: 2,
            height: 2,
            members: 2,
            classes: 2,
            data,
        }
    }

    #[test]
    fn image_scores() {
        assert_eq!(score_image(0, &dists_2x2(None)).unwrap().image_score, 0.0);
        let r = score_image(1, &dists_2x2(Some(2))).unwrap();
        let single = js_divergence(&[d(&[0.5, 0.5]), d(&[1.0, 0.0])]).unwrap();
        assert!((r.image_score - single).abs() < 1e-15);
        assert_eq!(r.raster[2], single);
        let mut short = dists_2x2(None);
        short.data.truncate(12);
        assert!(matches!(score_image(0, &short), Err(UncertaintyError::MissingPixels { .. })));
    }

    #[test]
    fn filter_cases() {
        let s = |v: &[f64]| -> Vec<ImageScore> {
            v.iter().enumerate().map(|(i, &score)| ImageScore { id: i as u64, score }).collect()
        };
        let (kept, dropped) = filter_by_uncertainty(&s(&[1.0, 2.0]), 0.0).unwrap();
        assert_eq!((kept, dropped), (vec![0, 1], vec![]));
        let (kept, dropped) = filter_by_uncertainty(&s(&[5.0, 4.0, 3.0, 2.0, 1.0]), 0.2).unwrap();
        assert_eq!(dropped, vec![0]);
        assert_eq!(kept, vec![1, 2, 3, 4]);
        // Ties: higher id goes first.
        let (_, dropped) = filter_by_uncertainty(&s(&[1.0, 1.0, 1.0]), 0.3).unwrap();
        assert_eq!(dropped, vec![2]);
        assert_eq!(filter_by_uncertainty(&s(&[1.0]), 1.0), Err(UncertaintyError::Ratio(1.0)));
        assert!(filter_by_uncertainty(&s(&[1.0]), -0.1).is_err());
    }

    #[test]
    fn ten_percent_of_ten_thousand() {
        assert_eq!(drop_count(10_000, 0.10), 1_000);
        assert_eq!(drop_count(10, 0.25), 3);
        assert_eq!(drop_count(0, 0.5), 0);
    }

    #[test]
    fn audit_log_round_trip() {
        let entries = vec![
            AuditEntry { id: 3, image_score: 1.25, kept: true },
            AuditEntry { id: 9, image_score: 0.1, kept: false },
        ];
        assert_eq!(parse_uncertainty_log(&write_uncertainty_log(&entries)).unwrap(), entries);
        assert!(parse_uncertainty_log("3\t1\ttrue").is_err());
    }

    fn dist_strategy(k: usize) -> impl Strategy<Value = ClassDistribution> {
        proptest::collection::vec(0.0f64..1.0, k).prop_map(|mut v| {
            v[0] += 1e-3;
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            ClassDistribution(v)
        })
    }

    proptest! {
        #[test]
        fn js_bounded_and_permutation_invariant(ds in proptest::collection::vec(dist_strategy(4), 1..8)) {
            let js = js_divergence(&ds).unwrap();
            prop_assert!(js >= 0.0 && js <= (ds.len() as f64).ln() + 1e-12);
            let mut rev = ds.clone();
            rev.reverse();
            prop_assert!((js_divergence(&rev).unwrap() - js).abs() < 1e-12);
        }

        #[test]
        fn adding_the_mean_stays_bounded(ds in proptest::collection::vec(dist_strategy(3), 1..6)) {
            let n = ds.len() as f64;
            let mean: Vec<f64> = (0..3).map(|c| ds.iter().map(|d| d.0[c]).sum::<f64>() / n).collect();
            let mut with_mean = ds.clone();
            with_mean.push(ClassDistribution(mean));
            let js = js_divergence(&with_mean).unwrap();
            prop_assert!(js <= (with_mean.len() as f64).ln());
            prop_assert!(js <= js_divergence(&ds).unwrap() + 1e-12);
        }

        #[test]
        fn identical_members_give_zero(d in dist_strategy(5), n in 1usize..6) {
            prop_assert!(js_divergence(&vec![d; n]).unwrap().abs() < 1e-12);
        }

        #[test]
        fn rank_order_independent_of_log_base(
            images in proptest::collection::vec(proptest::collection::vec(dist_strategy(3), 3), 2..10)
        ) {
            let nats: Vec<f64> = images.iter().map(|m| js_divergence_in(m, LogBase::Nats).unwrap()).collect();
            let bits: Vec<f64> = images.iter().map(|m| js_divergence_in(m, LogBase::Bits).unwrap()).collect();
            let argsort = |v: &[f64]| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                // Values within rounding of each other count as tied and keep index order.
                idx.sort_by(|&a, &b| {
                    if (v[a] - v[b]).abs() <= 1e-12 * v[a].abs().max(v[b].abs()).max(1e-300) { a.cmp(&b) }
                    else { v[a].total_cmp(&v[b]) }
                });
                idx
            };
            prop_assert_eq!(argsort(&nats), argsort(&bits));
        }

        #[test]
        fn filter_partitions(scores in proptest::collection::vec(0.0f64..10.0, 0..50), ratio in 0.0f64..0.99) {
            let s: Vec<ImageScore> = scores.iter().enumerate().map(|(i, &score)| ImageScore { id: i as u64, score }).collect();
            let (kept, dropped) = filter_by_uncertainty(&s, ratio).unwrap();
            prop_assert_eq!(dropped.len(), drop_count(s.len(), ratio));
            let mut all: Vec<u64> = kept.iter().chain(&dropped).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..s.len() as u64).collect::<Vec<_>>());
            if let (Some(min_dropped), Some(max_kept)) = (
                dropped.iter().map(|&i| scores[i as usize]).reduce(f64::min),
                kept.iter().map(|&i| scores[i as usize]).reduce(f64::max),
            ) {
                prop_assert!(min_dropped >= max_kept);
            }
        }
    }
}
