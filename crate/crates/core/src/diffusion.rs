//! Noise schedule, forward noising, classifier-free guidance and
//! deterministic DDIM sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear beta schedule. Step indices are 1-based; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

impl<T: Scalar> Default for NoiseSchedule<T> {
    fn default() -> Self {
        make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

pub fn make_schedule<T: Scalar>(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule<T>> {
    if steps == 0 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "invalid schedule: T={steps}, beta range [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0f64;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(T::of(acc));
    }
    Ok(NoiseSchedule {
        alphas: betas.iter().map(|b| T::of(1.0 - b)).collect(),
        betas: betas.into_iter().map(T::of).collect(),
        alpha_bars,
    })
}

/// `sqrt(ab) z0 + sqrt(1 - ab) eps` for an explicit cumulative alpha.
pub fn q_sample_with<T: Scalar>(z0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: T) -> Result<Tensor<T>> {
    let a = alpha_bar.sqrt();
    let b = (T::one() - alpha_bar).sqrt();
    z0.zip_map(eps, |z, e| a * z + b * e)
}

pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule<T>) -> Result<Tensor<T>> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::Input(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    q_sample_with(z0, eps, schedule.alpha_bar(t))
}

/// `(1 - s) uncond + s cond`, i.e. `uncond + s (cond - uncond)`, exact at `s` in {0, 1}.
pub fn cfg_combine<T: Scalar>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let keep = T::one() - scale;
    eps_cond.zip_map(eps_uncond, |c, u| keep * u + scale * c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
    /// Bound on the predicted clean latent at every step; `None` samples
    /// without clamping.
    pub clip_x0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 50,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
            clip_x0: Some(1.0),
        }
    }
}

/// Descending timesteps `floor(k T / n)` for `k = n, ..., 1`.
pub fn ddim_timesteps(train_steps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > train_steps {
        return Err(Error::Config(format!(
            "num_steps {num_steps} must be in 1..={train_steps}"
        )));
    }
    Ok((1..=num_steps).rev().map(|k| k * train_steps / num_steps).collect())
}

/// One deterministic DDIM update from cumulative alpha `ab_t` to `ab_prev`.
pub fn ddim_step<T: Scalar>(z_t: &Tensor<T>, eps: &Tensor<T>, ab_t: T, ab_prev: T) -> Result<Tensor<T>> {
    let (st, nt) = (ab_t.sqrt(), (T::one() - ab_t).sqrt());
    let (sp, np) = (ab_prev.sqrt(), (T::one() - ab_prev).sqrt());
    z_t.zip_map(eps, |z, e| {
        let x0 = (z - nt * e) / st;
        sp * x0 + np * e
    })
}

/// Noise consistent with the clean-latent estimate clamped to `[-bound, bound]`.
pub fn clamp_x0_noise<T: Scalar>(z_t: &Tensor<T>, eps: &Tensor<T>, ab_t: T, bound: f64) -> Result<Tensor<T>> {
    let (st, nt) = (ab_t.sqrt(), (T::one() - ab_t).sqrt());
    let b = T::of(bound);
    z_t.zip_map(eps, |z, e| {
        let x0 = ((z - nt * e) / st).max(-b).min(b);
        (z - st * x0) / nt
    })
}

/// Anything that predicts the added noise for a batch of latents.
pub trait NoisePredictor<T: Scalar> {
    type Cond;

    /// Noise prediction at step `t`; `null_reference` selects the
    /// unconditional branch used by classifier-free guidance.
    fn predict(&self, z_t: &Tensor<T>, cond: &Self::Cond, t: usize, null_reference: bool) -> Result<Tensor<T>>;
}

/// Guided noise estimate: skips the unconditional branch when the scale is 1.
pub fn guided_noise<T: Scalar, M: NoisePredictor<T>>(
    model: &M,
    z_t: &Tensor<T>,
    cond: &M::Cond,
    t: usize,
    scale: f64,
) -> Result<Tensor<T>> {
    let check = |e: &Tensor<T>| {
        if e.shape() != z_t.shape() {
            Err(Error::Contract(format!(
                "model returned {:?} for latents {:?}",
                e.shape(),
                z_t.shape()
            )))
        } else {
            Ok(())
        }
    };
    let eps_c = model.predict(z_t, cond, t, false)?;
    check(&eps_c)?;
    if scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = model.predict(z_t, cond, t, true)?;
    check(&eps_u)?;
    cfg_combine(&eps_c, &eps_u, T::of(scale))
}

fn check_sampler(schedule_steps: usize, cfg: &SamplerConfig) -> Result<Vec<usize>> {
    if cfg.eta != 0.0 {
        return Err(Error::Config("only deterministic sampling (eta = 0) is supported".into()));
    }
    if cfg.clip_x0.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
        return Err(Error::Config(format!("clip_x0 must be positive, got {:?}", cfg.clip_x0)));
    }
    ddim_timesteps(schedule_steps, cfg.num_steps)
}

/// Samples from `z_T ~ N(0, I)` drawn with `cfg.seed`.
pub fn ddim_sample<T: Scalar, M: NoisePredictor<T>>(
    model: &M,
    cond: &M::Cond,
    schedule: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    shape: &[usize],
) -> Result<Tensor<T>> {
    check_sampler(schedule.steps(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z_t = Tensor::randn(shape, 1.0, &mut rng);
    ddim_sample_from(model, cond, schedule, cfg, z_t)
}

/// Runs the DDIM chain from a caller-provided `z_T`; returns the final `z_0`.
pub fn ddim_sample_from<T: Scalar, M: NoisePredictor<T>>(
    model: &M,
    cond: &M::Cond,
    schedule: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    z_start: Tensor<T>,
) -> Result<Tensor<T>> {
    let steps = check_sampler(schedule.steps(), cfg)?;
    let mut z = z_start;
    for (i, &t) in steps.iter().enumerate() {
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        let mut eps = guided_noise(model, &z, cond, t, cfg.guidance_scale)?;
        if let Some(b) = cfg.clip_x0 {
            eps = clamp_x0_noise(&z, &eps, schedule.alpha_bar(t), b)?;
        }
        z = ddim_step(&z, &eps, schedule.alpha_bar(t), schedule.alpha_bar(prev))?;
    }
    Ok(z)
}
