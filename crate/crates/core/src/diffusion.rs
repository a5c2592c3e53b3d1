//! Linear-β DDPM substrate: schedule, closed-form forward noising, the
//! ε-prediction loss and an ancestral sampler.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{LatentShape, LatentTensor};
use crate::control::ControlBundle;
use crate::error::{dim_err, Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

/// Linearly spaced β from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + i as f64 / (steps - 1) as f64 * (beta_max - beta_min)
            }
        })
        .collect();
    let mut alphas_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_bar.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas_bar })
}

impl NoiseSchedule {
    /// 1000 steps, β from 1e-4 to 2e-2.
    pub fn standard() -> Self {
        make_schedule(1000, 1e-4, 2e-2).expect("valid constants")
    }

    /// 50 steps with β stretched to [2e-3, 0.4] so that ᾱ_T is still close
    /// to zero; the 1000-step range squeezed into 50 steps would leave
    /// ᾱ_T ≈ 0.6.
    pub fn desk() -> Self {
        make_schedule(50, 2e-3, 0.4).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// β_t for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t with the convention ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::IndexOutOfRange {
                what: "timestep",
                index: t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε`.
pub fn add_noise(
    z: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    schedule.check_step(t)?;
    if !z.same_shape(eps) {
        return Err(dim_err("latent", "noise shape differs from latent shape"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (math::sqrt(ab), math::sqrt(1.0 - ab));
    let mut out = z.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// Mean squared error between true and predicted noise.
pub fn eps_loss(eps_true: &LatentTensor, eps_pred: &LatentTensor) -> Result<f64> {
    if !eps_true.same_shape(eps_pred) {
        return Err(dim_err(
            "latent",
            "prediction shape differs from target shape",
        ));
    }
    Ok(mse(&eps_true.data, &eps_pred.data))
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// Anything that predicts ε from `(z_t, t, c, z_m)`.
pub trait Denoiser {
    fn predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
        control: Option<&ControlBundle>,
    ) -> Result<LatentTensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&LatentTensor, usize, usize, Option<&ControlBundle>) -> Result<LatentTensor>,
{
    fn predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
        control: Option<&ControlBundle>,
    ) -> Result<LatentTensor> {
        self(z_t, t, class, control)
    }
}

/// Draws a latent of the given shape filled with standard normal noise.
pub fn gaussian_latent(shape: LatentShape, rng: &mut ChaCha8Rng) -> LatentTensor {
    let mut z = LatentTensor::zeros(
        shape.frames,
        shape.height,
        shape.width,
        shape.channels,
        shape.patch,
    );
    for v in z.data.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    z
}

/// Ancestral DDPM sampling from `z_T ~ N(0, I)` down to `t = 1`.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    shape: LatentShape,
    class: usize,
    control: Option<&ControlBundle>,
    seed: u64,
) -> Result<LatentTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = gaussian_latent(shape, &mut rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&z, t, class, control)?;
        if !z.same_shape(&eps) {
            return Err(dim_err(
                "latent",
                "denoiser output shape differs from input",
            ));
        }
        if eps.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDivergence { step: t });
        }
        let beta = schedule.beta(t);
        let coef = beta / math::sqrt(1.0 - schedule.alpha_bar(t));
        let inv = 1.0 / math::sqrt(1.0 - beta);
        let sigma = math::sqrt(beta);
        for (zv, e) in z.data.iter_mut().zip(&eps.data) {
            let mean = (*zv - coef * e) * inv;
            *zv = if t > 1 {
                let n: f64 = StandardNormal.sample(&mut rng);
                mean + sigma * n
            } else {
                mean
            };
        }
        if z.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDivergence { step: t });
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::PatchSpec;
    use core::cell::Cell;

    fn latent(data: Vec<f64>) -> LatentTensor {
        let n = data.len();
        LatentTensor::from_data(1, 1, n, 1, PatchSpec::new(1, 1), data).unwrap()
    }

    #[test]
    fn presets_end_near_pure_noise() {
        let d = NoiseSchedule::desk();
        assert_eq!(d.steps(), 50);
        assert!(d.alpha_bar(50) < 1e-4);
        assert!(NoiseSchedule::standard().alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert!((s.alphas_bar()[0] - 0.9).abs() < 1e-15);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.betas()[1] - 0.2).abs() < 1e-15);
        assert!((s.alphas_bar()[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        assert!(s.alphas_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_closed_form() {
        // ᾱ_1 = 0.25 with a one-step schedule β = 0.75
        let s = make_schedule(1, 0.75, 0.75).unwrap();
        let z = latent(alloc::vec![1.0; 4]);
        let out = add_noise(&z, 1, &z, &s).unwrap();
        for v in out.data {
            assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
            assert!((v - 1.36603).abs() < 1e-5);
        }
        let zero = latent(alloc::vec![0.0; 4]);
        let out = add_noise(&z, 1, &zero, &s).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.5));
        assert!(matches!(
            add_noise(&z, 2, &z, &s),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            add_noise(&z, 0, &z, &s),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(add_noise(&z, 1, &latent(alloc::vec![0.0; 3]), &s).is_err());
    }

    #[test]
    fn add_noise_is_affine() {
        let s = make_schedule(10, 0.01, 0.3).unwrap();
        let z = latent((0..16).map(|i| (i as f64 * 0.7).sin()).collect());
        let e = latent((0..16).map(|i| (i as f64 * 1.3).cos()).collect());
        let zero = latent(alloc::vec![0.0; 16]);
        let full = add_noise(&z, 7, &e, &s).unwrap();
        let a = add_noise(&z, 7, &zero, &s).unwrap();
        let b = add_noise(&zero, 7, &e, &s).unwrap();
        for i in 0..16 {
            assert!((a.data[i] + b.data[i] - full.data[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = make_schedule(20, 0.01, 0.2).unwrap();
        let t = 9;
        let n = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = LatentShape {
            frames: 1,
            height: 1,
            width: n,
            channels: 1,
            patch: PatchSpec::new(1, 1),
        };
        let eps = gaussian_latent(shape, &mut rng);
        let zero = latent(alloc::vec![0.0; n]);
        let zt = add_noise(&zero, t, &eps, &s).unwrap();
        let mean = zt.data.iter().sum::<f64>() / n as f64;
        let var = zt.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let target = 1.0 - s.alpha_bar(t);
        // standard error of the sample variance of a Gaussian: σ²·√(2/(n−1))
        let se = target * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - target).abs() < 3.0 * se, "var {var} target {target}");
    }

    #[test]
    fn eps_loss_is_mean_squared_error() {
        let a = latent(alloc::vec![0.0; 6]);
        let b = latent(alloc::vec![2.0; 6]);
        assert_eq!(eps_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(eps_loss(&a, &b).unwrap(), 4.0);
        let x = latent((0..10).map(|i| (i as f64).sin()).collect());
        let y = latent((0..10).map(|i| (i as f64 * 2.0).cos()).collect());
        let mut brute = 0.0;
        for i in 0..10 {
            brute += (x.data[i] - y.data[i]).powi(2);
        }
        assert!((eps_loss(&x, &y).unwrap() - brute / 10.0).abs() < 1e-15);
        assert!(eps_loss(&a, &latent(alloc::vec![0.0; 5])).is_err());
    }

    #[test]
    fn single_step_sampler_closed_form() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        let shape = LatentShape {
            frames: 1,
            height: 2,
            width: 2,
            channels: 3,
            patch: PatchSpec::new(1, 1),
        };
        let zero_model = |z: &LatentTensor, _: usize, _: usize, _: Option<&ControlBundle>| {
            Ok(LatentTensor::zeros(
                z.frames, z.height, z.width, z.channels, z.patch,
            ))
        };
        let out = sample(&zero_model, &s, shape, 0, None, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z1 = gaussian_latent(shape, &mut rng);
        for (o, z) in out.data.iter().zip(&z1.data) {
            assert!((o - z / 0.9f64.sqrt()).abs() < 1e-14);
        }
        let again = sample(&zero_model, &s, shape, 0, None, 5).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn sampler_reports_divergence_with_step() {
        let s = make_schedule(5, 0.01, 0.1).unwrap();
        let shape = LatentShape {
            frames: 1,
            height: 1,
            width: 1,
            channels: 2,
            patch: PatchSpec::new(1, 1),
        };
        let nan_at_3 = |z: &LatentTensor, t: usize, _: usize, _: Option<&ControlBundle>| {
            let mut e = LatentTensor::zeros(z.frames, z.height, z.width, z.channels, z.patch);
            if t == 3 {
                e.data[0] = f64::NAN;
            }
            Ok(e)
        };
        assert_eq!(
            sample(&nan_at_3, &s, shape, 0, None, 1),
            Err(Error::NumericDivergence { step: 3 })
        );
    }

    #[test]
    fn sampler_only_touches_model_through_callback() {
        let s = make_schedule(7, 0.01, 0.1).unwrap();
        let shape = LatentShape {
            frames: 1,
            height: 1,
            width: 1,
            channels: 2,
            patch: PatchSpec::new(1, 1),
        };
        let calls = Cell::new(0usize);
        let seen = core::cell::RefCell::new(Vec::new());
        let stub = |z: &LatentTensor, t: usize, c: usize, _: Option<&ControlBundle>| {
            calls.set(calls.get() + 1);
            seen.borrow_mut().push((t, c));
            Ok(LatentTensor::zeros(
                z.frames, z.height, z.width, z.channels, z.patch,
            ))
        };
        sample(&stub, &s, shape, 3, None, 0).unwrap();
        assert_eq!(calls.get(), 7);
        let expected: Vec<(usize, usize)> = (1..=7).rev().map(|t| (t, 3)).collect();
        assert_eq!(*seen.borrow(), expected);
    }
}
