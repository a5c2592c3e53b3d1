//! Two-stage optimisation: pretrain the base on the ε-loss, then freeze it and
//! fit only the adapter. Adam with bias correction and global-norm clipping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::adapter::{ControlledModel, NetworkSpec, VCtrlParams};
use crate::base::{BaseModel, BaseParams};
use crate::codec::{LatentTensor, VideoTensor};
use crate::control::ControlBundle;
use crate::diffusion::{add_noise, eps_loss, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub grad_clip_norm: f64,
    pub steps: usize,
    pub batch: usize,
    pub frames_per_clip: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Large-model settings: lr 1e-5, Adam(0.9, 0.999), clip 1.0, 49 frames.
    fn default() -> Self {
        Self {
            lr: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            grad_clip_norm: 1.0,
            steps: 1000,
            batch: 8,
            frames_per_clip: 49,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Toy-model preset: 8-frame clips and a larger step size.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            frames_per_clip: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Parameter("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Parameter("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Parameter(
                "gradient clip norm must be positive".into(),
            ));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch must be positive".into()));
        }
        Ok(())
    }
}

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.lr, c.adam_beta1, c.adam_beta2)
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let mut gs = Vec::new();
        grads.visit(&mut |_, t| gs.push(t));
        if self.m.is_empty() {
            self.m = gs.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - powi(self.beta1, self.step);
        let bc2 = 1.0 - powi(self.beta2, self.step);
        let mut idx = 0;
        params.visit_mut(&mut |_, p| {
            let g = &gs[idx].data;
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= self.lr * mhat / (math::sqrt(vhat) + ADAM_EPS);
            }
            idx += 1;
        });
    }
}

fn powi(x: f64, n: u64) -> f64 {
    let mut acc = 1.0;
    for _ in 0..n {
        acc *= x;
    }
    acc
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before and after.
pub fn clip_grad_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> (f64, f64) {
    let norm = math::sqrt(grads.sq_norm());
    if norm > max_norm {
        grads.scale(max_norm / norm);
        (norm, math::sqrt(grads.sq_norm()))
    } else {
        (norm, norm)
    }
}

/// One training example: a clean latent, its prompt class and (for adapter
/// training) its control bundle.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub latent: LatentTensor,
    pub class: usize,
    pub control: Option<ControlBundle>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// global gradient norm before clipping
    pub grad_norm: f64,
    /// global gradient norm actually applied
    pub clipped_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub params: P,
    pub curve: Vec<CurvePoint>,
}

struct Draw {
    index: usize,
    t: usize,
    eps: LatentTensor,
}

fn draw_batch(
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Draw> {
    (0..batch)
        .map(|_| {
            let index = rng.random_range(0..samples.len());
            let t = rng.random_range(1..=schedule.steps());
            let mut eps = samples[index].latent.clone();
            for v in eps.data.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            Draw { index, t, eps }
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn map_batch<T: Send, F>(draws: &[Draw], f: F) -> Vec<Result<T>>
where
    F: Fn(&Draw) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    draws.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_batch<T, F>(draws: &[Draw], f: F) -> Vec<Result<T>>
where
    F: Fn(&Draw) -> Result<T>,
{
    draws.iter().map(f).collect()
}

fn reduce<P: ParamSet>(results: Vec<Result<(f64, P)>>) -> Result<(f64, P)> {
    let n = results.len() as f64;
    let mut iter = results.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty batch")?;
    for r in iter {
        let (l, g) = r?;
        loss += l;
        grad.add_assign(&g);
    }
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

fn optimise<P, F>(
    mut params: P,
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    grad_fn: F,
) -> Result<TrainOutcome<P>>
where
    P: ParamSet,
    F: Fn(&P, &[Draw]) -> Result<(f64, P)>,
{
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::from_config(config);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let draws = draw_batch(samples, schedule, config.batch, &mut rng);
        let (loss, mut grad) = grad_fn(&params, &draws)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NumericDivergence { step });
        }
        let (grad_norm, clipped_norm) = clip_grad_norm(&mut grad, config.grad_clip_norm);
        adam.step(&mut params, &grad);
        curve.push(CurvePoint {
            step,
            loss,
            grad_norm,
            clipped_norm,
        });
    }
    Ok(TrainOutcome { params, curve })
}

/// Fits every base parameter to the unconditional-on-control ε-loss.
pub fn pretrain_base(
    samples: &[TrainSample],
    init: BaseParams,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainOutcome<BaseParams>> {
    optimise(init, samples, schedule, config, |params, draws| {
        let model = BaseModel::new(params);
        reduce(map_batch(draws, |d| {
            let s = &samples[d.index];
            let z_t = add_noise(&s.latent, d.t, &d.eps, schedule)?;
            model.loss_and_grad(&z_t, d.t, s.class, &d.eps)
        }))
    })
}

/// Fits only the adapter; `base` is borrowed immutably throughout.
pub fn train_vctrl(
    samples: &[TrainSample],
    base: &BaseParams,
    spec: &NetworkSpec,
    init: VCtrlParams,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainOutcome<VCtrlParams>> {
    spec.validate()?;
    if spec.m != base.blocks.len() {
        return Err(Error::Configuration(format!(
            "spec has M={} but base has {} blocks",
            spec.m,
            base.blocks.len()
        )));
    }
    if samples.iter().any(|s| s.control.is_none()) {
        return Err(Error::Parameter(
            "adapter training needs a control bundle for every sample".into(),
        ));
    }
    optimise(init, samples, schedule, config, |adapter, draws| {
        let model = ControlledModel::new(base, adapter, spec);
        reduce(map_batch(draws, |d| {
            let s = &samples[d.index];
            let z_t = add_noise(&s.latent, d.t, &d.eps, schedule)?;
            let bundle = s.control.as_ref().expect("checked above");
            let (loss, grad, _) = model.loss_and_grad(&z_t, d.t, s.class, bundle, &d.eps, false)?;
            Ok((loss, grad))
        }))
    })
}

/// Mean ε-loss of `model` over `draws` fixed `(t, ε)` pairs per sample.
/// Deterministic in `seed`, so two models (or two control assignments) can be
/// compared on identical noise.
pub fn evaluate_loss<D: Denoiser + ?Sized>(
    model: &D,
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        for _ in 0..draws {
            let t = rng.random_range(1..=schedule.steps());
            let mut eps = s.latent.clone();
            for v in eps.data.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let z_t = add_noise(&s.latent, t, &eps, schedule)?;
            let pred = model.predict(&z_t, t, s.class, s.control.as_ref())?;
            total += eps_loss(&eps, &pred)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Integer crop offset in `[0, max_offset]` from a normal centred at
/// `max_offset/2` with σ = `0.25·max_offset`, truncated by rejection.
pub fn truncated_normal_offset<R: Rng + ?Sized>(max_offset: usize, rng: &mut R) -> usize {
    if max_offset == 0 {
        return 0;
    }
    let max = max_offset as f64;
    let normal = Normal::new(max / 2.0, 0.25 * max).expect("positive sigma");
    loop {
        let v: f64 = normal.sample(rng);
        if (0.0..=max).contains(&v) {
            return (math::round(v) as usize).min(max_offset);
        }
    }
}

/// Random crop to `(height, width)` with truncated-normal offsets, applied
/// identically to every frame. Returns the crop and its `(top, left)` offset.
pub fn truncated_normal_crop<R: Rng + ?Sized>(
    video: &VideoTensor,
    target: (usize, usize),
    rng: &mut R,
) -> Result<(VideoTensor, (usize, usize))> {
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > video.height || tw > video.width {
        return Err(Error::Parameter(format!(
            "crop {th}x{tw} does not fit in {}x{}",
            video.height, video.width
        )));
    }
    let top = truncated_normal_offset(video.height - th, rng);
    let left = truncated_normal_offset(video.width - tw, rng);
    let mut data = Vec::with_capacity(video.frames * th * tw * 3);
    for t in 0..video.frames {
        for y in top..top + th {
            let start = ((t * video.height + y) * video.width + left) * 3;
            data.extend_from_slice(&video.data[start..start + tw * 3]);
        }
    }
    let mut out = VideoTensor::new(video.frames, th, tw, data)?;
    out.fps = video.fps;
    Ok((out, (top, left)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[derive(Clone)]
    struct Scalar(Tensor);

    impl ParamSet for Scalar {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
            f("x", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("x", &mut self.0);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = Scalar(Tensor::zeros(&[1]));
        let g = Scalar(Tensor::filled(&[1], 1.0));
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        adam.step(&mut p, &g);
        // m̂ = 1, v̂ = 1 → update −lr/(1 + ε)
        assert!((p.0.data[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        adam.step(&mut p, &g);
        assert!((p.0.data[0] - 2.0 * (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = Scalar(Tensor::from_vec(&[2], vec![6.0, 8.0]));
        let (pre, post) = clip_grad_norm(&mut g, 1.0);
        assert_eq!(pre, 10.0);
        assert!((post - 1.0).abs() < 1e-12);
        assert!((g.0.data[0] - 0.6).abs() < 1e-12);
        let mut small = Scalar(Tensor::from_vec(&[2], vec![0.3, 0.4]));
        let (pre, post) = clip_grad_norm(&mut small, 1.0);
        assert_eq!((pre, post), (0.5, 0.5));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            adam_beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            grad_clip_norm: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn truncated_offsets_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| truncated_normal_offset(100, &mut rng) as f64)
            .collect();
        assert!(draws.iter().all(|&v| (0.0..=100.0).contains(&v)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let std = (draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (draws.len() - 1) as f64)
            .sqrt();
        assert!(
            (mean - 50.0).abs() < 3.0 * std / 100.0,
            "mean {mean} std {std}"
        );
        assert_eq!(truncated_normal_offset(0, &mut rng), 0);
    }

    #[test]
    fn crop_behaviour() {
        let n = 2 * 6 * 5 * 3;
        let v = VideoTensor::new(2, 6, 5, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (same, off) = truncated_normal_crop(&v, (6, 5), &mut rng).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(same, v);
        let (a, oa) = truncated_normal_crop(&v, (3, 3), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (b, ob) = truncated_normal_crop(&v, (3, 3), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!((a.clone(), oa), (b, ob));
        for t in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    assert_eq!(a.at(t, y, x, 1), v.at(t, y + oa.0, x + oa.1, 1));
                }
            }
        }
        assert!(truncated_normal_crop(&v, (7, 5), &mut rng).is_err());
    }
}
