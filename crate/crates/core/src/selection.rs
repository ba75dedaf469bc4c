//! Active-learning candidate selection: take an uncertainty band just below
//! the most uncertain samples and spread picks across it with k-center greedy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{GeneratedSample, LatentCode};
use crate::feature_volume::UpsampleMode;
use crate::uncertainty::drop_count;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("cannot pick {wanted} centers from {available} entries")]
    TooMany { wanted: usize, available: usize },
    #[error("seed id {0} is not in the pool")]
    UnknownSeed(u64),
    #[error("embedding of entry {id} has dimension {got}, expected {expected}")]
    Dimension { id: u64, expected: usize, got: usize },
    #[error("entry {0} has a non-finite embedding or score")]
    NonFinite(u64),
    #[error("duplicate pool id {0}")]
    DuplicateId(u64),
    #[error("uncertainty band is empty ({pool} entries, k={k_percent}%, band={band_percent}%)")]
    EmptyBand {
        pool: usize,
        k_percent: f64,
        band_percent: f64,
    },
    #[error("band percentages must satisfy 0 <= k and k + band <= 100 with band > 0")]
    BandRange,
    #[error("no pool entry carries a latent code")]
    NoLatents,
    #[error("latent dimensions disagree ({0} vs {1})")]
    LatentDimension(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: u64,
    /// Mean-pooled pixel feature of the sample.
    pub embedding: Vec<f64>,
    pub image_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentCode>,
}

impl PoolEntry {
    pub fn from_sample(id: u64, sample: &GeneratedSample, image_score: f64, mode: UpsampleMode) -> Self {
        Self {
            id,
            embedding: sample.features.mean_feature(mode),
            image_score,
            latent: Some(sample.latent.clone()),
        }
    }
}

fn check_pool(pool: &[PoolEntry]) -> Result<(), SelectionError> {
    let first = pool.first().ok_or(SelectionError::EmptyPool)?;
    let dim = first.embedding.len();
    let mut ids = std::collections::HashSet::with_capacity(pool.len());
    for e in pool {
        if e.embedding.len() != dim {
            return Err(SelectionError::Dimension {
                id: e.id,
                expected: dim,
                got: e.embedding.len(),
            });
        }
        if !e.image_score.is_finite() || e.embedding.iter().any(|v| !v.is_finite()) {
            return Err(SelectionError::NonFinite(e.id));
        }
        if !ids.insert(e.id) {
            return Err(SelectionError::DuplicateId(e.id));
        }
    }
    Ok(())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-center greedy: start at `seed_id`, then repeatedly add the entry farthest
/// (Euclidean) from all chosen centers; equal distances go to the lower id.
pub fn kcenter_greedy(pool: &[PoolEntry], n: usize, seed_id: u64) -> Result<Vec<u64>, SelectionError> {
    check_pool(pool)?;
    if n > pool.len() {
        return Err(SelectionError::TooMany {
            wanted: n,
            available: pool.len(),
        });
    }
    let seed = pool
        .iter()
        .position(|e| e.id == seed_id)
        .ok_or(SelectionError::UnknownSeed(seed_id))?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![false; pool.len()];
    let mut min_d = vec![f64::INFINITY; pool.len()];
    let mut centers = Vec::with_capacity(n);
    let mut current = seed;
    loop {
        chosen[current] = true;
        centers.push(pool[current].id);
        if centers.len() == n {
            return Ok(centers);
        }
        let c = &pool[current].embedding;
        min_d
            .par_iter_mut()
            .zip(pool.par_iter())
            .for_each(|(d, e)| *d = d.min(dist2(&e.embedding, c)));
        current = (0..pool.len())
            .filter(|&i| !chosen[i])
            .reduce(|best, i| {
                let better = min_d[i] > min_d[best] || (min_d[i] == min_d[best] && pool[i].id < pool[best].id);
                if better {
                    i
                } else {
                    best
                }
            })
            .expect("n <= pool size leaves a candidate");
    }
}

/// Largest distance from any entry to its nearest center.
pub fn coverage_radius(pool: &[PoolEntry], centers: &[u64]) -> f64 {
    let cs: Vec<&PoolEntry> = pool.iter().filter(|e| centers.contains(&e.id)).collect();
    pool.iter()
        .map(|e| {
            cs.iter()
                .map(|c| dist2(&e.embedding, &c.embedding))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandParams {
    /// Most uncertain share discarded outright, in percent.
    pub k_percent: f64,
    /// Width of the candidate band below it, in percent.
    pub band_percent: f64,
    pub n_centers: usize,
}

impl Default for BandParams {
    fn default() -> Self {
        Self {
            k_percent: 10.0,
            band_percent: 10.0,
            n_centers: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRound {
    pub params: BandParams,
    /// Ids discarded as most uncertain.
    pub discarded: Vec<u64>,
    /// Ids of the band, most uncertain first.
    pub band: Vec<u64>,
    pub seed_id: u64,
    /// Centers in pick order.
    pub chosen: Vec<u64>,
    /// Space the coreset distances were measured in.
    pub embedding: String,
}

/// Pool ids ordered most uncertain first; equal scores put the higher id first
/// (the same order the filter drops in).
pub fn uncertainty_order(pool: &[PoolEntry]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        pool[b]
            .image_score
            .total_cmp(&pool[a].image_score)
            .then(pool[b].id.cmp(&pool[a].id))
    });
    order
}

/// Band `[k, k + band)` percent of the uncertainty ranking, as index ranges
/// into [`uncertainty_order`].
pub fn band_bounds(n: usize, params: &BandParams) -> Result<(usize, usize), SelectionError> {
    let (k, b) = (params.k_percent, params.band_percent);
    if !(k >= 0.0 && b > 0.0 && k + b <= 100.0) {
        return Err(SelectionError::BandRange);
    }
    Ok((drop_count(n, k / 100.0), drop_count(n, (k + b) / 100.0)))
}

pub fn propose_batch(pool: &[PoolEntry], params: &BandParams) -> Result<SelectionRound, SelectionError> {
    check_pool(pool)?;
    let (top, end) = band_bounds(pool.len(), params)?;
    if end <= top {
        return Err(SelectionError::EmptyBand {
            pool: pool.len(),
            k_percent: params.k_percent,
            band_percent: params.band_percent,
        });
    }
    let order = uncertainty_order(pool);
    let band: Vec<PoolEntry> = order[top..end].iter().map(|&i| pool[i].clone()).collect();
    // The band is ordered by descending score with higher ids first on ties,
    // so the last entry is the minimum score with the lowest id.
    let seed_id = band.last().expect("band is non-empty").id;
    let chosen = kcenter_greedy(&band, params.n_centers, seed_id)?;
    Ok(SelectionRound {
        params: *params,
        discarded: order[..top].iter().map(|&i| pool[i].id).collect(),
        band: band.iter().map(|e| e.id).collect(),
        seed_id,
        chosen,
        embedding: "mean-pooled-pixel-feature".into(),
    })
}

/// Mean latent of the pool: the first sample to annotate before any
/// uncertainty is available.
pub fn first_round_seed(pool: &[PoolEntry]) -> Result<LatentCode, SelectionError> {
    let latents: Vec<&LatentCode> = pool.iter().filter_map(|e| e.latent.as_ref()).collect();
    let first = latents.first().ok_or(SelectionError::NoLatents)?;
    let dim = first.dim();
    let mut mean = vec![0.0; dim];
    for l in &latents {
        if l.dim() != dim {
            return Err(SelectionError::LatentDimension(dim, l.dim()));
        }
        for (m, v) in mean.iter_mut().zip(&l.z) {
            *m += v;
        }
    }
    let n = latents.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(LatentCode::explicit(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: u64, embedding: Vec<f64>, score: f64) -> PoolEntry {
        PoolEntry {
            id,
            embedding,
            image_score: score,
            latent: None,
        }
    }

    /// Exhaustive optimal k-center radius with centers drawn from the pool.
    fn optimal_radius(pool: &[PoolEntry], n: usize) -> f64 {
        fn rec(pool: &[PoolEntry], n: usize, start: usize, picked: &mut Vec<u64>, best: &mut f64) {
            if picked.len() == n {
                *best = best.min(coverage_radius(pool, picked));
                return;
            }
            for i in start..pool.len() {
                picked.push(pool[i].id);
                rec(pool, n, i + 1, picked, best);
                picked.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(pool, n, 0, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn exhausting_the_pool_returns_everything_seed_first() {
        let pool: Vec<_> = (0..5).map(|i| entry(i, vec![i as f64], 0.0)).collect();
        let c = kcenter_greedy(&pool, 5, 3).unwrap();
        assert_eq!(c[0], 3);
        let mut sorted = c.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn one_dimensional_example() {
        let pool: Vec<_> = [0.0, 1.0, 9.0, 10.0]
            .iter()
            .enumerate()
            .map(|(i, &x)| entry(i as u64, vec![x], 0.0))
            .collect();
        assert_eq!(kcenter_greedy(&pool, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn greedy_errors() {
        let pool = vec![entry(1, vec![0.0], 0.0)];
        assert_eq!(kcenter_greedy(&[], 1, 0), Err(SelectionError::EmptyPool));
        assert_eq!(
            kcenter_greedy(&pool, 2, 1),
            Err(SelectionError::TooMany { wanted: 2, available: 1 })
        );
        assert_eq!(kcenter_greedy(&pool, 1, 9), Err(SelectionError::UnknownSeed(9)));
    }

    fn hundred() -> Vec<PoolEntry> {
        // Score rank r (0 = most uncertain) has id 1000 + r.
        (0..100)
            .map(|r| entry(1000 + r, vec![(r * 37 % 11) as f64, (r % 7) as f64], 100.0 - r as f64))
            .collect()
    }

    #[test]
    fn band_is_ranks_eleven_to_twenty() {
        let pool = hundred();
        let params = BandParams {
            n_centers: 10,
            ..Default::default()
        };
        let round = propose_batch(&pool, &params).unwrap();
        assert_eq!(round.discarded, (1000..1010).collect::<Vec<_>>());
        assert_eq!(round.band, (1010..1020).collect::<Vec<_>>());
        assert_eq!(round.seed_id, 1019);
        assert_eq!(round.chosen.len(), 10);
        assert!(round.chosen.iter().all(|id| !round.discarded.contains(id)));
    }

    #[test]
    fn twelve_from_a_band_of_ten_fails() {
        assert_eq!(
            propose_batch(&hundred(), &BandParams::default()),
            Err(SelectionError::TooMany { wanted: 12, available: 10 })
        );
    }

    #[test]
    fn equal_embeddings_pick_lowest_ids() {
        let pool: Vec<_> = (0..200).map(|i| entry(i, vec![1.0, 2.0], (i % 13) as f64)).collect();
        let round = propose_batch(&pool, &BandParams::default()).unwrap();
        assert_eq!(round.band.len(), 20);
        let mut rest: Vec<u64> = round.band.iter().copied().filter(|&id| id != round.seed_id).collect();
        rest.sort();
        assert_eq!(round.chosen[0], round.seed_id);
        assert_eq!(&round.chosen[1..], &rest[..11]);
    }

    #[test]
    fn empty_band_rejected() {
        let pool = vec![entry(0, vec![0.0], 1.0)];
        let params = BandParams {
            k_percent: 100.0,
            band_percent: 0.0,
            n_centers: 1,
        };
        assert_eq!(propose_batch(&pool, &params), Err(SelectionError::BandRange));
        let params = BandParams {
            k_percent: 90.0,
            band_percent: 10.0,
            n_centers: 1,
        };
        assert!(matches!(propose_batch(&pool, &params), Err(SelectionError::EmptyBand { .. })));
    }

    #[test]
    fn mean_latent_rules() {
        let with = |id, z: Vec<f64>| PoolEntry {
            latent: Some(LatentCode::explicit(z)),
            ..entry(id, vec![0.0], 0.0)
        };
        let one = first_round_seed(&[with(0, vec![0.5, -1.0])]).unwrap();
        assert_eq!(one.z, vec![0.5, -1.0]);
        let sym = first_round_seed(&[with(0, vec![0.3, -2.0]), with(1, vec![-0.3, 2.0])]).unwrap();
        assert_eq!(sym.z, vec![0.0, 0.0]);
        assert_eq!(first_round_seed(&[entry(0, vec![0.0], 0.0)]), Err(SelectionError::NoLatents));
    }

    proptest! {
        #[test]
        fn greedy_is_a_two_approximation(
            points in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..11),
            n in 1usize..4,
            seed in any::<prop::sample::Index>(),
        ) {
            let pool: Vec<_> = points.iter().enumerate().map(|(i, &(x, y))| entry(i as u64, vec![x, y], 0.0)).collect();
            let n = n.min(pool.len());
            let seed_id = pool[seed.index(pool.len())].id;
            let centers = kcenter_greedy(&pool, n, seed_id).unwrap();
            prop_assert!(coverage_radius(&pool, &centers) <= 2.0 * optimal_radius(&pool, n) + 1e-12);
        }

        #[test]
        fn greedy_ignores_pool_order(
            points in proptest::collection::vec((0i32..4, 0i32..4), 2..12),
            perm_seed in any::<u64>(),
        ) {
            let pool: Vec<_> = points.iter().enumerate().map(|(i, &(x, y))| entry(i as u64, vec![x as f64, y as f64], 0.0)).collect();
            let mut shuffled = pool.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let n = pool.len();
            prop_assert_eq!(kcenter_greedy(&pool, n, 0).unwrap(), kcenter_greedy(&shuffled, n, 0).unwrap());
        }

        #[test]
        fn band_never_touches_discarded(scores in proptest::collection::vec(0.0f64..5.0, 20..120), k in 0u32..50) {
            let pool: Vec<_> = scores.iter().enumerate().map(|(i, &s)| entry(i as u64, vec![s], s.round())).collect();
            let params = BandParams { k_percent: k as f64, band_percent: 10.0, n_centers: 1 };
            let round = propose_batch(&pool, &params).unwrap();
            prop_assert!(round.band.iter().all(|id| !round.discarded.contains(id)));
            let max_band = round.band.iter().map(|&id| pool[id as usize].image_score).fold(f64::MIN, f64::max);
            for &d in &round.discarded {
                prop_assert!(pool[d as usize].image_score >= max_band);
            }
        }
    }
}
