//! Procedural stand-in for a progressive generator.
//!
//! A sample is a body ellipse with `num_parts` discs attached to its rim, all
//! placed by the latent code. Feature maps at doubling resolutions carry
//! squashed signed distances to every shape, coordinate encodings and
//! nuisance channels (noise, latent broadcasts, constants). The ground-truth
//! label of a pixel is computed from the stored full-resolution signed
//! distance channels, so it is a function of the pixel's feature vector.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneError, GeneratedSample, GroundTruth, LatentCode, DEFAULT_LATENT_DIM};
use crate::feature_volume::{FeatureMap, FeatureVolume};
use crate::hash::json_hash;
use crate::interpreter::LabelSchema;
use crate::keypoints::Keypoint;
use crate::raster::{LabelMask, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBackboneConfig {
    pub latent_dim: usize,
    /// Side length of each level; must double from one level to the next.
    pub resolutions: Vec<usize>,
    /// Total channels per level. Each level needs at least `3 + num_parts`;
    /// the remainder is filled with nuisance channels.
    pub channels: Vec<usize>,
    pub num_parts: usize,
    /// Body ellipse semi-axis range as a fraction of the image side.
    pub body_radius: [f64; 2],
    /// Part disc radius range as a fraction of the image side.
    pub part_radius: [f64; 2],
    /// Signed distances are squashed with `tanh(d / (edge_softness * side))`.
    pub edge_softness: f64,
    /// Standard deviation of the noise nuisance channels.
    pub noise_scale: f64,
    /// Fraction of latents whose shape channels are washed out, producing
    /// genuinely ambiguous samples. Ground truth stays crisp.
    pub corruption_fraction: f64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            resolutions: vec![8, 16, 32, 64],
            channels: vec![8, 8, 12, 16],
            num_parts: 3,
            body_radius: [0.18, 0.28],
            part_radius: [0.06, 0.10],
            edge_softness: 0.06,
            noise_scale: 0.5,
            corruption_fraction: 0.0,
        }
    }
}

impl ToyBackboneConfig {
    /// Square toy at `side` pixels with `levels` doubling levels, each level
    /// carrying `channels_per_level` channels.
    pub fn with_shape(side: usize, levels: usize, channels_per_level: usize) -> Self {
        let base = side >> (levels - 1);
        Self {
            resolutions: (0..levels).map(|i| base << i).collect(),
            channels: vec![channels_per_level; levels],
            ..Self::default()
        }
    }

    pub fn min_channels(&self) -> usize {
        3 + self.num_parts
    }

    pub fn side(&self) -> usize {
        self.resolutions.last().copied().unwrap_or(0)
    }

    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let err = |m: String| Err(BackboneError::Config(m));
        if self.resolutions.len() < 2 {
            return err(format!("need at least 2 levels, got {}", self.resolutions.len()));
        }
        if self.resolutions[0] == 0 {
            return err("base resolution must be positive".into());
        }
        for (i, pair) in self.resolutions.windows(2).enumerate() {
            if pair[1] != pair[0] * 2 {
                return err(format!(
                    "resolution must double per level: level {} is {} after {}",
                    i + 1,
                    pair[1],
                    pair[0]
                ));
            }
        }
        if self.channels.len() != self.resolutions.len() {
            return err(format!(
                "{} channel counts for {} levels",
                self.channels.len(),
                self.resolutions.len()
            ));
        }
        if self.num_parts == 0 {
            return err("toy object needs at least one part".into());
        }
        if self.num_parts > 250 {
            return err("at most 250 parts fit an 8-bit mask".into());
        }
        if let Some((i, c)) = self
            .channels
            .iter()
            .enumerate()
            .find(|(_, &c)| c < self.min_channels())
        {
            return err(format!(
                "level {i} has {c} channels, needs at least {}",
                self.min_channels()
            ));
        }
        let range_ok = |r: [f64; 2], max: f64| r[0] > 0.0 && r[0] <= r[1] && r[1] <= max;
        if !range_ok(self.body_radius, 0.4) {
            return err(format!("body radius range {:?} outside (0, 0.4]", self.body_radius));
        }
        if !range_ok(self.part_radius, 0.5) {
            return err(format!("part radius range {:?} outside (0, 0.5]", self.part_radius));
        }
        if self.latent_dim < self.latent_needed() {
            return err(format!(
                "latent dimension {} too small, need {}",
                self.latent_dim,
                self.latent_needed()
            ));
        }
        if !(self.edge_softness > 0.0) || !(self.noise_scale >= 0.0) {
            return err("edge_softness must be positive and noise_scale non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return err(format!(
                "corruption_fraction {} outside [0, 1]",
                self.corruption_fraction
            ));
        }
        Ok(())
    }

    fn latent_needed(&self) -> usize {
        5 + 2 * self.num_parts
    }

    pub fn segmentation_schema(&self) -> LabelSchema {
        let mut names = vec!["background".to_string(), "body".to_string()];
        names.extend((1..=self.num_parts).map(|j| format!("part_{j}")));
        LabelSchema::segmentation(names).expect("toy schema is valid")
    }

    pub fn keypoint_schema(&self) -> LabelSchema {
        let mut names = vec!["body_center".to_string()];
        names.extend((1..=self.num_parts).map(|j| format!("part_{j}")));
        LabelSchema::keypoints(names).expect("toy schema is valid")
    }

    /// Analytic bounds on the foreground (non-background) pixel fraction,
    /// before discretization.
    pub fn foreground_fraction_bounds(&self) -> (f64, f64) {
        let lo = PI * self.body_radius[0] * self.body_radius[0];
        let hi = PI * self.body_radius[1] * self.body_radius[1]
            + self.num_parts as f64 * PI * self.part_radius[1] * self.part_radius[1];
        (lo, hi.min(1.0))
    }
}

/// Shapes placed by one latent, in target pixel coordinates.
#[derive(Clone, Debug)]
struct Layout {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    parts: Vec<(f64, f64, f64)>,
    brightness: f64,
}

fn squash(z: f64) -> f64 {
    1.0 / (1.0 + (-1.702 * z).exp())
}

fn lerp(range: [f64; 2], t: f64) -> f64 {
    range[0] + (range[1] - range[0]) * t
}

impl Layout {
    fn from_latent(cfg: &ToyBackboneConfig, z: &[f64]) -> Self {
        let side = cfg.side() as f64;
        let u = |i: usize| squash(z[i]);
        let rx = lerp(cfg.body_radius, u(0)) * side;
        let ry = lerp(cfg.body_radius, u(1)) * side;
        let cx = lerp([rx + 1.0, side - rx - 1.0], u(2));
        let cy = lerp([ry + 1.0, side - ry - 1.0], u(3));
        let m = cfg.num_parts;
        let parts = (0..m)
            .map(|j| {
                let spread = 2.0 * PI / m as f64;
                let theta = spread * j as f64 - PI / 2.0 + (u(4 + 2 * j) - 0.5) * spread * 0.8;
                let r = lerp(cfg.part_radius, u(5 + 2 * j)) * side;
                (cx + rx * theta.cos(), cy + ry * theta.sin(), r)
            })
            .collect();
        let brightness = 0.75 + 0.5 * u(4 + 2 * m);
        Self {
            cx,
            cy,
            rx,
            ry,
            parts,
            brightness,
        }
    }

    fn body_sd(&self, px: f64, py: f64) -> f64 {
        let dx = (px - self.cx) / self.rx;
        let dy = (py - self.cy) / self.ry;
        ((dx * dx + dy * dy).sqrt() - 1.0) * self.rx.min(self.ry)
    }

    fn part_sd(&self, j: usize, px: f64, py: f64) -> f64 {
        let (x, y, r) = self.parts[j];
        ((px - x).powi(2) + (py - y).powi(2)).sqrt() - r
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    config: ToyBackboneConfig,
}

impl ToyBackbone {
    pub fn new(config: ToyBackboneConfig) -> Result<Self, BackboneError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ToyBackboneConfig {
        &self.config
    }

    /// Whether this latent falls in the corrupted fraction.
    pub fn is_corrupted(&self, latent: &LatentCode) -> bool {
        let u = (splitmix(latent.identity() ^ 0xc0ff_ee00) >> 11) as f64 / (1u64 << 53) as f64;
        u < self.config.corruption_fraction
    }

    fn level_map(
        &self,
        level: usize,
        layout: &Layout,
        latent: &LatentCode,
        corrupted: bool,
    ) -> Result<FeatureMap, BackboneError> {
        let cfg = &self.config;
        let res = cfg.resolutions[level];
        let channels = cfg.channels[level];
        let side = cfg.side() as f64;
        let soft = cfg.edge_softness * side;
        let m = cfg.num_parts;
        let last = level + 1 == cfg.resolutions.len();
        let identity = latent.identity();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(identity ^ (level as u64 + 1) << 40));
        let mut shape = vec![0f64; 1 + m];
        let mut data = Vec::with_capacity(res * res * channels);
        let scale = side / res as f64;
        for b in 0..res {
            for a in 0..res {
                let px = (a as f64 + 0.5) * scale;
                let py = (b as f64 + 0.5) * scale;
                shape[0] = (layout.body_sd(px, py) / soft).tanh();
                for (j, s) in shape[1..].iter_mut().enumerate() {
                    *s = (layout.part_sd(j, px, py) / soft).tanh();
                }
                if corrupted {
                    for s in shape.iter_mut() {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        *s = 0.1 * *s + 0.35 * n;
                    }
                }
                let xn = 2.0 * px / side - 1.0;
                let yn = 2.0 * py / side - 1.0;
                if last {
                    data.extend(shape.iter().map(|&v| v as f32));
                    data.push(xn as f32);
                    data.push(yn as f32);
                } else {
                    data.push(xn as f32);
                    data.push(yn as f32);
                    data.extend(shape.iter().map(|&v| v as f32));
                }
                for n in 0..channels - (3 + m) {
                    let v = match n % 3 {
                        0 => {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            g * cfg.noise_scale
                        }
                        1 => latent.z[n % latent.z.len()],
                        _ => 1.0,
                    };
                    data.push(v as f32);
                }
            }
        }
        Ok(FeatureMap::new(res, res, channels, data)?)
    }

    /// Labels from the clean shape field at pixel centers, quantized the
    /// same way as the stored channels: the highest part index with a negative
    /// distance wins, then the body, then background. Corruption never
    /// reaches the truth.
    fn truth_mask(&self, layout: &Layout) -> LabelMask {
        let m = self.config.num_parts;
        let side = self.config.side();
        let soft = self.config.edge_softness * side as f64;
        let inside = |sd: f64| (((sd / soft).tanh()) as f32) < 0.0;
        let mut mask = LabelMask::background(side, side);
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let label = (0..m)
                    .rev()
                    .find(|&j| inside(layout.part_sd(j, px, py)))
                    .map(|j| 2 + j as u8)
                    .unwrap_or(if inside(layout.body_sd(px, py)) { 1 } else { 0 });
                mask.set(x, y, label);
            }
        }
        mask
    }

    fn keypoints(&self, layout: &Layout) -> Vec<Keypoint> {
        let max = (self.config.side() - 1) as f64;
        let snap = |v: f64| v.floor().clamp(0.0, max);
        let mut kps = vec![Keypoint::new("body_center", snap(layout.cx), snap(layout.cy))];
        for (j, &(x, y, _)) in layout.parts.iter().enumerate() {
            kps.push(Keypoint::new(format!("part_{}", j + 1), snap(x), snap(y)));
        }
        kps
    }

    fn render(&self, layout: &Layout, mask: &LabelMask, latent: &LatentCode, corrupted: bool) -> RgbImage {
        let palette = self.config.segmentation_schema().palette().to_vec();
        let side = mask.width;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(latent.identity() ^ 0x1a6e));
        let mut img = RgbImage::filled(side, side, [0, 0, 0]);
        for y in 0..side {
            for x in 0..side {
                let label = mask.get(x, y) as usize;
                let base = if label == 0 {
                    let t = y as f64 / side as f64;
                    [40.0 + 40.0 * t, 50.0 + 30.0 * t, 70.0]
                } else {
                    let c = palette[label % palette.len()];
                    let shade = layout.brightness * (0.8 + 0.2 * (1.0 - y as f64 / side as f64));
                    [c[0] as f64 * shade, c[1] as f64 * shade, c[2] as f64 * shade]
                };
                let mut px = [0u8; 3];
                for (o, b) in px.iter_mut().zip(base) {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *o = (b + 8.0 * n).round().clamp(0.0, 255.0) as u8;
                }
                img.set_pixel(x, y, px);
            }
        }
        if corrupted {
            img = box_blur(&img, 2);
        }
        img
    }
}

fn box_blur(img: &RgbImage, radius: usize) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            let mut n = 0u32;
            for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                for xx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                    let p = img.pixel(xx, yy);
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                    n += 1;
                }
            }
            out.set_pixel(x, y, [(acc[0] / n) as u8, (acc[1] / n) as u8, (acc[2] / n) as u8]);
        }
    }
    out
}

impl Backbone for ToyBackbone {
    fn descriptor(&self) -> String {
        let c = &self.config;
        format!(
            "toy:{side}x{side}:levels={k}:D={d}:parts={m}",
            side = c.side(),
            k = c.resolutions.len(),
            d = c.total_channels(),
            m = c.num_parts
        )
    }

    fn config_hash(&self) -> String {
        json_hash(&self.config)
    }

    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn generate(&self, latent: &LatentCode) -> Result<GeneratedSample, BackboneError> {
        if latent.dim() != self.config.latent_dim {
            return Err(BackboneError::LatentDim {
                expected: self.config.latent_dim,
                got: latent.dim(),
            });
        }
        let layout = Layout::from_latent(&self.config, &latent.z);
        let corrupted = self.is_corrupted(latent);
        let maps = (0..self.config.resolutions.len())
            .map(|level| self.level_map(level, &layout, latent, corrupted))
            .collect::<Result<Vec<_>, _>>()?;
        let mask = self.truth_mask(&layout);
        let image = self.render(&layout, &mask, latent, corrupted);
        let keypoints = self.keypoints(&layout);
        Ok(GeneratedSample {
            latent: latent.clone(),
            image: Some(image),
            features: FeatureVolume::new(maps)?,
            truth: Some(GroundTruth { mask, keypoints }),
        })
    }
}
