//! Ensemble training. Members are independent: each has its own seed, its
//! own pixel draws and its own optimizer state, so they train in parallel
//! without changing the result.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{BatchTargets, Head, MlpClassifier};
use super::sampling::{check_in_bounds, PixelSampling, SamplingPlan};
use super::{AnnotatedSample, Annotation, InterpreterError, LabelSchema, Task};
use crate::feature_volume::UpsampleMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Ensemble size.
    pub members: usize,
    pub hidden: [usize; 2],
    pub steps: usize,
    /// Pixels per optimizer step, split evenly across annotated samples.
    pub batch_pixels: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Per-member seed offsets; empty means `0..members`.
    pub member_seed_offsets: Vec<u64>,
    pub upsample: UpsampleMode,
    pub include_background: bool,
    pub heat_sigma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            members: 10,
            hidden: [256, 128],
            steps: 2000,
            batch_pixels: 2048,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            member_seed_offsets: Vec::new(),
            upsample: UpsampleMode::Bilinear,
            include_background: true,
            heat_sigma: None,
        }
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl TrainConfig {
    pub fn member_seed(&self, member: usize) -> u64 {
        let offset = self
            .member_seed_offsets
            .get(member)
            .copied()
            .unwrap_or(member as u64);
        mix(self.seed ^ mix(offset))
    }

    pub fn sampling(&self) -> PixelSampling {
        PixelSampling {
            include_background: self.include_background,
            heat_sigma: self.heat_sigma,
            upsample: self.upsample,
        }
    }

    pub fn validate(&self) -> Result<(), InterpreterError> {
        let bad = |m: String| Err(InterpreterError::Config(m));
        if self.members == 0 || self.steps == 0 || self.batch_pixels == 0 {
            return bad("members, steps and batch_pixels must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad(format!("hidden widths {:?} must be positive", self.hidden));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("betas must lie in [0, 1) and epsilon be positive".into());
        }
        if let Some(s) = self.heat_sigma {
            if !(s > 0.0) {
                return Err(InterpreterError::Sigma(s));
            }
        }
        if !self.member_seed_offsets.is_empty() && self.member_seed_offsets.len() != self.members {
            return bad(format!(
                "{} seed offsets for {} members",
                self.member_seed_offsets.len(),
                self.members
            ));
        }
        let seeds: HashSet<u64> = (0..self.members).map(|m| self.member_seed(m)).collect();
        if seeds.len() != self.members {
            return bad("member seeds must be distinct".into());
        }
        Ok(())
    }
}

/// N members sharing layer shapes and a schema, plus the config they were
/// trained with and their loss curves.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpreterEnsemble {
    pub(crate) members: Vec<MlpClassifier>,
    pub(crate) schema: LabelSchema,
    pub(crate) config: TrainConfig,
    pub(crate) loss_curves: Vec<Vec<f64>>,
}

impl InterpreterEnsemble {
    pub fn new(
        members: Vec<MlpClassifier>,
        schema: LabelSchema,
        config: TrainConfig,
        loss_curves: Vec<Vec<f64>>,
    ) -> Result<Self, InterpreterError> {
        let first = members
            .first()
            .ok_or_else(|| InterpreterError::Config("ensemble needs at least one member".into()))?;
        let head = head_for(schema.task());
        if members
            .iter()
            .any(|m| m.widths() != first.widths() || m.head() != head)
        {
            return Err(InterpreterError::Config("members differ in shape or head".into()));
        }
        if first.output_dim() != schema.output_dim() {
            return Err(InterpreterError::Schema(format!(
                "head width {} does not match schema output {}",
                first.output_dim(),
                schema.output_dim()
            )));
        }
        if loss_curves.len() != members.len() {
            return Err(InterpreterError::Config("one loss curve per member required".into()));
        }
        Ok(Self {
            members,
            schema,
            config,
            loss_curves,
        })
    }

    pub fn members(&self) -> &[MlpClassifier] {
        &self.members
    }
    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }
    pub fn config(&self) -> &TrainConfig {
        &self.config
    }
    pub fn loss_curves(&self) -> &[Vec<f64>] {
        &self.loss_curves
    }
    pub fn feature_dim(&self) -> usize {
        self.members[0].input_dim()
    }
    pub fn len(&self) -> usize {
        self.members.len()
    }
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub(crate) fn head_for(task: Task) -> Head {
    match task {
        Task::Segmentation => Head::Softmax,
        Task::Keypoints => Head::Heat,
    }
}

/// Keypoint annotations reordered to schema order.
fn ordered_keypoints(
    index: usize,
    sample: &AnnotatedSample,
    schema: &LabelSchema,
) -> Result<AnnotatedSample, InterpreterError> {
    let Annotation::Keypoints(kps) = &sample.annotation else {
        return Err(InterpreterError::Task(format!("sample {index} carries a mask, schema wants keypoints")));
    };
    let mut ordered = Vec::with_capacity(schema.output_dim());
    for name in schema.keypoint_names() {
        let kp = kps
            .iter()
            .find(|k| &k.name == name)
            .ok_or_else(|| InterpreterError::Schema(format!("sample {index} lacks keypoint `{name}`")))?;
        check_in_bounds(kp, sample.sample.width(), sample.sample.height())?;
        ordered.push(kp.clone());
    }
    Ok(AnnotatedSample {
        sample: sample.sample.clone(),
        annotation: Annotation::Keypoints(ordered),
    })
}

pub fn train_ensemble(
    annotated: &[AnnotatedSample],
    schema: &LabelSchema,
    config: &TrainConfig,
) -> Result<InterpreterEnsemble, InterpreterError> {
    config.validate()?;
    let first = annotated.first().ok_or(InterpreterError::NoAnnotations)?;
    let dim = first.sample.features.dim();
    let mut prepared = Vec::with_capacity(annotated.len());
    for (i, s) in annotated.iter().enumerate() {
        if s.sample.features.dim() != dim {
            return Err(InterpreterError::Dimension {
                expected: dim,
                got: s.sample.features.dim(),
            });
        }
        match (schema.task(), &s.annotation) {
            (Task::Segmentation, Annotation::Mask(mask)) => {
                let bad = mask.out_of_schema(schema.num_labels());
                if bad > 0 {
                    return Err(InterpreterError::Schema(format!(
                        "sample {i} has {bad} pixels outside the {}-label schema",
                        schema.num_labels()
                    )));
                }
                prepared.push(s.clone());
            }
            (Task::Keypoints, _) => prepared.push(ordered_keypoints(i, s, schema)?),
            (Task::Segmentation, Annotation::Keypoints(_)) => {
                return Err(InterpreterError::Task(format!(
                    "sample {i} carries keypoints, schema wants segmentation"
                )))
            }
        }
    }
    let sampling = config.sampling();
    let plans = prepared
        .iter()
        .enumerate()
        .map(|(i, s)| SamplingPlan::build(i, s, &sampling))
        .collect::<Result<Vec<_>, _>>()?;
    let n = prepared.len();
    for (i, plan) in plans.iter().enumerate() {
        let quota = config.batch_pixels / n + usize::from(i < config.batch_pixels % n);
        if quota < plan.num_regions() {
            return Err(InterpreterError::BatchTooSmall {
                sample: i,
                batch: quota,
                regions: plan.num_regions(),
            });
        }
    }
    let widths = [dim, config.hidden[0], config.hidden[1], schema.output_dim()];
    let head = head_for(schema.task());
    let trained = (0..config.members)
        .into_par_iter()
        .map(|m| train_member(m, widths, head, &prepared, &plans, config))
        .collect::<Result<Vec<_>, _>>()?;
    let (members, loss_curves) = trained.into_iter().unzip();
    InterpreterEnsemble::new(members, schema.clone(), config.clone(), loss_curves)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

fn train_member(
    member: usize,
    widths: [usize; 4],
    head: Head,
    samples: &[AnnotatedSample],
    plans: &[SamplingPlan],
    config: &TrainConfig,
) -> Result<(MlpClassifier, Vec<f64>), InterpreterError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.member_seed(member));
    let mut mlp = MlpClassifier::init(widths, head, &mut rng);
    let mut adam = Adam::new(mlp.params().len());
    let dim = widths[0];
    let out = widths[3];
    let batch = config.batch_pixels;
    let n = samples.len();
    let mut curve = Vec::with_capacity(config.steps);
    let mut x = vec![0f64; batch * dim];
    let mut px = vec![0f32; dim];
    let mut idx = Vec::with_capacity(batch);
    for step in 0..config.steps {
        let mut labels = Vec::with_capacity(batch);
        let mut heat = Vec::new();
        let mut row = 0;
        for (i, (sample, plan)) in samples.iter().zip(plans).enumerate() {
            let quota = batch / n + usize::from(i < batch % n);
            idx.clear();
            plan.draw(i, quota, &mut rng, &mut idx)?;
            let volume = &sample.sample.features;
            let w = volume.width();
            for &p in &idx {
                volume
                    .fill_pixel(p % w, p / w, config.upsample, &mut px)
                    .expect("plans only hold in-volume pixels");
                for (dst, &v) in x[row * dim..(row + 1) * dim].iter_mut().zip(&px) {
                    *dst = v as f64;
                }
                match &sample.annotation {
                    Annotation::Mask(mask) => labels.push(mask.data[p] as usize),
                    Annotation::Keypoints(_) => {
                        let start = heat.len();
                        heat.resize(start + out, 0.0);
                        plan.heat_into(p, &mut heat[start..]);
                    }
                }
                row += 1;
            }
        }
        debug_assert_eq!(row, batch);
        let targets = match head {
            Head::Softmax => BatchTargets::Labels(labels),
            Head::Heat => BatchTargets::Heat(heat),
        };
        let (loss, grad) = mlp.loss_and_grad(&x, batch, &targets);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(InterpreterError::Diverged { member, step, loss });
        }
        curve.push(loss);
        adam.step(mlp.params_mut(), &grad, config);
    }
    if mlp.params().iter().any(|p| !p.is_finite()) {
        return Err(InterpreterError::Diverged {
            member,
            step: config.steps,
            loss: f64::NAN,
        });
    }
    Ok((mlp, curve))
}
