//! Stratified pixel sampling: one pixel from every labeled region first, the
//! rest uniformly at random.

use rand::Rng;

use super::heatmap::{default_sigma, gaussian_value};
use super::{AnnotatedSample, Annotation, InterpreterError};
use crate::feature_volume::{PixelFeature, UpsampleMode};
use crate::keypoints::Keypoint;
use crate::raster::LabelMask;

/// Training target of one sampled pixel.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Label(usize),
    /// Gaussian heat for every keypoint, in schema order.
    Heat(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelSampling {
    /// Draw the uniform remainder from the whole image (background included)
    /// rather than from labeled pixels only.
    pub include_background: bool,
    /// Heat spread for keypoint targets; `None` picks [`default_sigma`].
    pub heat_sigma: Option<f64>,
    pub upsample: UpsampleMode,
}

impl Default for PixelSampling {
    fn default() -> Self {
        Self {
            include_background: true,
            heat_sigma: None,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

/// 4-connected components of equal non-background label, as pixel index
/// lists, in scan order of their first pixel.
pub fn labeled_regions(mask: &LabelMask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let label = mask.data[start];
        if label == 0 || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            region.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !seen[j] && mask.data[j] == label {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

/// Precomputed strata of one annotated sample.
#[derive(Clone, Debug)]
pub(crate) struct SamplingPlan {
    regions: Vec<Vec<usize>>,
    pool: Vec<usize>,
    width: usize,
    keypoints: Vec<(f64, f64)>,
    sigma: f64,
}

impl SamplingPlan {
    pub(crate) fn build(
        index: usize,
        sample: &AnnotatedSample,
        options: &PixelSampling,
    ) -> Result<Self, InterpreterError> {
        let (w, h) = (sample.sample.width(), sample.sample.height());
        let sigma = options.heat_sigma.unwrap_or_else(|| default_sigma(h, w));
        match &sample.annotation {
            Annotation::Mask(mask) => {
                if (mask.width, mask.height) != (w, h) {
                    return Err(InterpreterError::Schema(format!(
                        "mask {}x{} does not match sample {w}x{h}",
                        mask.width, mask.height
                    )));
                }
                let labeled: Vec<usize> = (0..w * h).filter(|&i| mask.data[i] != 0).collect();
                if labeled.is_empty() {
                    return Err(InterpreterError::NoLabeledPixels { sample: index });
                }
                let pool = if options.include_background {
                    (0..w * h).collect()
                } else {
                    labeled
                };
                Ok(Self {
                    regions: labeled_regions(mask),
                    pool,
                    width: w,
                    keypoints: Vec::new(),
                    sigma,
                })
            }
            Annotation::Keypoints(kps) => {
                if kps.is_empty() {
                    return Err(InterpreterError::NoLabeledPixels { sample: index });
                }
                let mut regions = Vec::with_capacity(kps.len());
                for kp in kps {
                    check_in_bounds(kp, w, h)?;
                    let (x, y) = (kp.x.round() as usize, kp.y.round() as usize);
                    regions.push(vec![y * w + x]);
                }
                Ok(Self {
                    regions,
                    pool: (0..w * h).collect(),
                    width: w,
                    keypoints: kps.iter().map(|k| (k.x, k.y)).collect(),
                    sigma,
                })
            }
        }
    }

    pub(crate) fn num_regions(&self) -> usize {
        self.regions.len()
    }

    /// Appends `batch` pixel indices to `out`: one per region, then uniform
    /// draws with replacement from the pool.
    pub(crate) fn draw(
        &self,
        index: usize,
        batch: usize,
        rng: &mut impl Rng,
        out: &mut Vec<usize>,
    ) -> Result<(), InterpreterError> {
        if batch < self.regions.len() {
            return Err(InterpreterError::BatchTooSmall {
                sample: index,
                batch,
                regions: self.regions.len(),
            });
        }
        for region in &self.regions {
            out.push(region[rng.random_range(0..region.len())]);
        }
        for _ in 0..batch - self.regions.len() {
            out.push(self.pool[rng.random_range(0..self.pool.len())]);
        }
        Ok(())
    }

    /// Heat targets for pixel `i`, written into `out` (one per keypoint).
    pub(crate) fn heat_into(&self, i: usize, out: &mut [f64]) {
        let (px, py) = ((i % self.width) as f64, (i / self.width) as f64);
        for (o, &(kx, ky)) in out.iter_mut().zip(&self.keypoints) {
            *o = gaussian_value(px, py, kx, ky, self.sigma);
        }
    }
}

pub(crate) fn check_in_bounds(kp: &Keypoint, w: usize, h: usize) -> Result<(), InterpreterError> {
    if kp.x >= 0.0 && kp.y >= 0.0 && kp.x <= (w - 1) as f64 && kp.y <= (h - 1) as f64 {
        Ok(())
    } else {
        Err(InterpreterError::KeypointBounds {
            x: kp.x,
            y: kp.y,
            width: w,
            height: h,
        })
    }
}

/// Draws `batch` (feature, target) pairs from one annotated sample.
pub fn sample_pixels(
    sample: &AnnotatedSample,
    batch: usize,
    rng: &mut impl Rng,
    options: &PixelSampling,
) -> Result<Vec<(PixelFeature, Target)>, InterpreterError> {
    let plan = SamplingPlan::build(0, sample, options)?;
    let mut idx = Vec::with_capacity(batch);
    plan.draw(0, batch, rng, &mut idx)?;
    let volume = &sample.sample.features;
    let w = volume.width();
    idx.into_iter()
        .map(|i| {
            let feature = volume
                .pixel_feature(i % w, i / w, options.upsample)
                .expect("sampled pixel lies inside the volume");
            let target = match &sample.annotation {
                Annotation::Mask(mask) => Target::Label(mask.data[i] as usize),
                Annotation::Keypoints(kps) => {
                    let mut heat = vec![0.0; kps.len()];
                    plan.heat_into(i, &mut heat);
                    Target::Heat(heat)
                }
            };
            Ok((feature, target))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{GeneratedSample, LatentCode};
    use crate::feature_volume::{FeatureMap, FeatureVolume};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn annotated(mask: LabelMask) -> AnnotatedSample {
        let (w, h) = (mask.width, mask.height);
        // Feature = pixel index, so sampled pixels are identifiable.
        let map = FeatureMap::from_fn(h, w, 1, |x, y, _| (y * w + x) as f32).unwrap();
        let sample = GeneratedSample {
            latent: LatentCode::explicit(vec![]),
            image: None,
            features: FeatureVolume::new(vec![map]).unwrap(),
            truth: None,
        };
        AnnotatedSample::with_mask(sample, mask)
    }

    #[test]
    fn regions_are_four_connected() {
        // Diagonal neighbours of equal label are separate regions.
        let mask = LabelMask::new(3, 3, vec![1, 0, 0, 0, 1, 0, 0, 0, 2]).unwrap();
        let r = labeled_regions(&mask);
        assert_eq!(r, vec![vec![0], vec![4], vec![8]]);
    }

    #[test]
    fn quota_saturation_takes_one_per_region() {
        let mask = LabelMask::new(5, 1, vec![1, 1, 0, 2, 3]).unwrap();
        let s = annotated(mask);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = sample_pixels(&s, 3, &mut rng, &PixelSampling::default()).unwrap();
        let labels: Vec<usize> = got
            .iter()
            .map(|(_, t)| match t {
                Target::Label(l) => *l,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(labels, vec![1, 2, 3]);
    }

    #[test]
    fn degenerate_inputs_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = annotated(LabelMask::background(4, 4));
        assert!(matches!(
            sample_pixels(&empty, 8, &mut rng, &PixelSampling::default()),
            Err(InterpreterError::NoLabeledPixels { .. })
        ));
        let three = annotated(LabelMask::new(5, 1, vec![1, 0, 2, 0, 3]).unwrap());
        assert!(matches!(
            sample_pixels(&three, 2, &mut rng, &PixelSampling::default()),
            Err(InterpreterError::BatchTooSmall { regions: 3, .. })
        ));
    }

    #[test]
    fn reproducible_under_seed() {
        let s = annotated(LabelMask::new(4, 4, (0..16).map(|i| (i % 3) as u8).collect()).unwrap());
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_pixels(&s, 20, &mut rng, &PixelSampling::default()).unwrap()
        };
        assert_eq!(draw(4), draw(4));
    }

    #[test]
    fn stratified_counts_match_expectation() {
        // 1000-pixel mask: region A has 10 pixels, region B 990.
        let data: Vec<u8> = (0..1000).map(|i| if i < 10 { 1 } else { 2 }).collect();
        let s = annotated(LabelMask::new(1000, 1, data).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 1000;
        let batch = 100;
        let mut count_a = 0usize;
        for _ in 0..draws {
            let got = sample_pixels(&s, batch, &mut rng, &PixelSampling::default()).unwrap();
            count_a += got.iter().filter(|(_, t)| *t == Target::Label(1)).count();
        }
        // One guaranteed pixel each, then 98 uniform draws: E[A] = 1 + 98 * 0.01.
        let p: f64 = 10.0 / 1000.0;
        let expected = 1.0 + 98.0 * p;
        let sd_of_mean = (98.0 * p * (1.0 - p)).sqrt() / (draws as f64).sqrt();
        let mean_a = count_a as f64 / draws as f64;
        assert!((mean_a - expected).abs() < 3.0 * sd_of_mean, "{mean_a} vs {expected}");
        let mean_b = batch as f64 - mean_a;
        assert!((mean_b - (1.0 + 98.0 * (1.0 - p))).abs() < 3.0 * sd_of_mean);
    }

    #[test]
    fn background_excluded_when_asked() {
        let s = annotated(LabelMask::new(4, 1, vec![0, 1, 0, 0]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = PixelSampling {
            include_background: false,
            ..Default::default()
        };
        let got = sample_pixels(&s, 50, &mut rng, &opts).unwrap();
        assert!(got.iter().all(|(_, t)| *t == Target::Label(1)));
    }
}
