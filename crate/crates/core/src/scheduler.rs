//! Noise schedule, forward noising, deterministic DDIM stepping,
//! classifier-free guidance and the denoiser contract.
//!
//! Sampling steps are counted the way the sampler is usually described:
//! step `S` (for `S` sampling steps) is pure noise and step 0 is the clean
//! latent. [`SampleSteps::level`] maps a sampling step to the training
//! timestep the denoiser sees.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::video::{LatentVideo, OcclusionMask, VideoError};

/// `ᾱ` below this is treated as no signal left.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("beta range must satisfy 0 < start < end < 1 (got {start}, {end})")]
    InvalidBetaRange { start: f64, end: f64 },
    #[error("schedule needs at least 2 training steps, got {0}")]
    InvalidTrainSteps(usize),
    #[error("invalid alpha-bar table: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Shape(#[from] VideoError),
    #[error("timestep {t} outside schedule of {train_steps} steps")]
    StepOutOfRange { t: usize, train_steps: usize },
    #[error("alpha-bar is degenerate at {level:?}")]
    DegenerateAlpha { level: Level },
    #[error("DDIM must step to a less noisy level ({from:?} -> {to:?})")]
    StepOrderViolation { from: Level, to: Level },
    #[error("invalid step counts: {sample} sampling steps over {train} training steps")]
    InvalidCounts { train: usize, sample: usize },
    #[error("denoiser failed: {0}")]
    Denoiser(String),
}

/// A noise level: a training timestep or the clean endpoint (`ᾱ = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Clean,
    Train(usize),
}

impl PartialOrd for Level {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Level {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Level::Clean, Level::Clean) => Ordering::Equal,
            (Level::Clean, Level::Train(_)) => Ordering::Less,
            (Level::Train(_), Level::Clean) => Ordering::Greater,
            (Level::Train(a), Level::Train(b)) => a.cmp(b),
        }
    }
}

/// Cumulative signal retention `ᾱ_t` per training timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β` from `beta_start` to `beta_end`, `ᾱ_t = Π_{s≤t} (1 - β_s)`.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, SchedulerError> {
        if train_steps < 2 {
            return Err(SchedulerError::InvalidTrainSteps(train_steps));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(SchedulerError::InvalidBetaRange {
                start: beta_start,
                end: beta_end,
            });
        }
        let span = (train_steps - 1) as f64;
        let mut acc = 1.0;
        let alpha_bar = (0..train_steps)
            .map(|i| {
                let beta = beta_start + (beta_end - beta_start) * i as f64 / span;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Arbitrary table with entries in `[0, 1]`, for synthetic checks. No
    /// monotonicity is required; see [`NoiseSchedule::is_standard`].
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, SchedulerError> {
        if alpha_bar.is_empty() {
            return Err(SchedulerError::InvalidSchedule("empty table".into()));
        }
        if let Some(v) = alpha_bar.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SchedulerError::InvalidSchedule(format!("entry {v} outside [0, 1]")));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Strictly decreasing, starting above 0.99 and ending below 0.01.
    pub fn is_standard(&self) -> bool {
        self.alpha_bar.windows(2).all(|w| w[1] < w[0])
            && self.alpha_bar[0] > 0.99
            && *self.alpha_bar.last().unwrap() < 0.01
    }

    pub fn train_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, level: Level) -> Result<f64, SchedulerError> {
        match level {
            Level::Clean => Ok(1.0),
            Level::Train(t) => self.alpha_bar.get(t).copied().ok_or(SchedulerError::StepOutOfRange {
                t,
                train_steps: self.alpha_bar.len(),
            }),
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// `√ᾱ·z0 + √(1-ᾱ)·ε`.
pub fn add_noise(z0: &LatentVideo, level: Level, eps: &LatentVideo, sched: &NoiseSchedule) -> Result<LatentVideo, SchedulerError> {
    let ab = sched.alpha_bar(level)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
}

/// Inverts [`add_noise`] given a noise estimate.
pub fn estimate_x0(z_t: &LatentVideo, eps_hat: &LatentVideo, level: Level, sched: &NoiseSchedule) -> Result<LatentVideo, SchedulerError> {
    let ab = sched.alpha_bar(level)?;
    if ab <= MIN_ALPHA_BAR {
        return Err(SchedulerError::DegenerateAlpha { level });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.zip_map(eps_hat, |z, e| (z - b * e) / a)?)
}

/// Deterministic (η = 0) DDIM update from `from` to the less noisy `to`.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    from: Level,
    to: Level,
    sched: &NoiseSchedule,
) -> Result<LatentVideo, SchedulerError> {
    if to >= from {
        return Err(SchedulerError::StepOrderViolation { from, to });
    }
    let x0 = estimate_x0(z_t, eps_hat, from, sched)?;
    if to == Level::Clean {
        return Ok(x0);
    }
    let ab = sched.alpha_bar(to)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps_hat, |x, e| a * x + b * e)?)
}

/// `ε_u + g·(ε_c − ε_u)`.
pub fn cfg_combine(eps_uncond: &LatentVideo, eps_cond: &LatentVideo, guidance: f64) -> Result<LatentVideo, SchedulerError> {
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + guidance * (c - u))?)
}

/// Training timesteps used by the sampler, largest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSteps {
    descending: Vec<usize>,
}

impl SampleSteps {
    pub fn len(&self) -> usize {
        self.descending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descending.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.descending
    }

    /// Noise level of sampling step `k`; 0 is clean, `len()` is pure noise.
    pub fn level(&self, k: usize) -> Level {
        assert!(k <= self.len(), "sampling step {k} beyond {}", self.len());
        if k == 0 {
            Level::Clean
        } else {
            Level::Train(self.descending[self.len() - k])
        }
    }
}

/// `t_i = ⌈(i+1)·T/S⌉ − 1` for `i = S−1 … 0`.
pub fn select_timesteps(train_steps: usize, sample_steps: usize) -> Result<SampleSteps, SchedulerError> {
    if sample_steps == 0 || sample_steps > train_steps {
        return Err(SchedulerError::InvalidCounts {
            train: train_steps,
            sample: sample_steps,
        });
    }
    let descending = (0..sample_steps)
        .rev()
        .map(|i| ((i + 1) * train_steps).div_ceil(sample_steps) - 1)
        .collect();
    Ok(SampleSteps { descending })
}

/// Noise prediction that makes [`estimate_x0`] return `target` exactly:
/// `(z_t − √ᾱ·target)/√(1−ᾱ)`.
pub fn oracle_epsilon(z_t: &LatentVideo, level: Level, target: &LatentVideo, sched: &NoiseSchedule) -> Result<LatentVideo, SchedulerError> {
    let ab = sched.alpha_bar(level)?;
    if ab >= 1.0 - MIN_ALPHA_BAR {
        return Err(SchedulerError::DegenerateAlpha { level });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.zip_map(target, |z, x| (z - a * x) / b)?)
}

/// Opaque conditioning handle (a prompt, an embedding id, ...). The sampler
/// never looks inside.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition(pub String);

/// An ε-prediction network.
pub trait Denoiser {
    /// Predicts the noise in `z` at training timestep `t`. The output must
    /// have the input's shape and be finite for finite input.
    fn predict_noise(&mut self, z: &LatentVideo, t: usize, condition: Option<&Condition>) -> Result<LatentVideo, SchedulerError>;

    /// Called once the reframed clean latent and its latent-resolution mask
    /// exist, before rehabilitation starts. Networks ignore it; synthetic
    /// oracles may retarget.
    fn observe_reframe(&mut self, _z0_reframed: &LatentVideo, _mask: &OcclusionMask) {}
}

impl<D: Denoiser + ?Sized> Denoiser for &mut D {
    fn predict_noise(&mut self, z: &LatentVideo, t: usize, condition: Option<&Condition>) -> Result<LatentVideo, SchedulerError> {
        (**self).predict_noise(z, t, condition)
    }

    fn observe_reframe(&mut self, z0_reframed: &LatentVideo, mask: &OcclusionMask) {
        (**self).observe_reframe(z0_reframed, mask)
    }
}

/// Classifier-free guidance around any [`Denoiser`]: one unconditional and
/// one conditional call per prediction.
pub struct GuidedDenoiser<D> {
    inner: D,
    guidance: f64,
    condition: Option<Condition>,
}

impl<D: Denoiser> GuidedDenoiser<D> {
    pub fn new(inner: D, guidance: f64, condition: Option<Condition>) -> Self {
        GuidedDenoiser {
            inner,
            guidance,
            condition,
        }
    }

    pub fn into_inner(self) -> D {
        self.inner
    }
}

impl<D: Denoiser> Denoiser for GuidedDenoiser<D> {
    /// A condition passed by the caller overrides the stored one.
    fn predict_noise(&mut self, z: &LatentVideo, t: usize, condition: Option<&Condition>) -> Result<LatentVideo, SchedulerError> {
        let uncond = self.inner.predict_noise(z, t, None)?;
        let cond = self.inner.predict_noise(z, t, condition.or(self.condition.as_ref()))?;
        let eps = cfg_combine(&uncond, &cond, self.guidance)?;
        if eps.shape() != z.shape() {
            return Err(SchedulerError::Denoiser(format!(
                "prediction shape {} differs from input {}",
                eps.shape(),
                z.shape()
            )));
        }
        Ok(eps)
    }

    fn observe_reframe(&mut self, z0_reframed: &LatentVideo, mask: &OcclusionMask) {
        self.inner.observe_reframe(z0_reframed, mask)
    }
}

/// Predicts the exact noise that points at a stored target.
///
/// After [`Denoiser::observe_reframe`] the target becomes the reframed latent
/// on known cells and `inpaint_target` (or the previous target) elsewhere,
/// i.e. a model that keeps rendered content and fills holes perfectly.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    target: LatentVideo,
    inpaint_target: Option<LatentVideo>,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(target: LatentVideo, schedule: NoiseSchedule) -> Self {
        OracleDenoiser {
            target,
            inpaint_target: None,
            schedule,
        }
    }

    pub fn with_inpaint_target(mut self, inpaint: LatentVideo) -> Self {
        self.inpaint_target = Some(inpaint);
        self
    }

    pub fn target(&self) -> &LatentVideo {
        &self.target
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(&mut self, z: &LatentVideo, t: usize, _condition: Option<&Condition>) -> Result<LatentVideo, SchedulerError> {
        oracle_epsilon(z, Level::Train(t), &self.target, &self.schedule)
    }

    fn observe_reframe(&mut self, z0_reframed: &LatentVideo, mask: &OcclusionMask) {
        let fill = self.inpaint_target.as_ref().unwrap_or(&self.target);
        if let Ok(merged) = crate::rehab::merge_step(z0_reframed, fill, mask) {
            self.target = merged;
        }
    }
}

/// Imperfect linear denoiser: the posterior mean under a Gaussian prior
/// `N(stored, v·I)`, with the data term passed through a box blur `B` of
/// radius `r`, so its errors are spatially smooth.
///
/// `x̂0 = μ + k_t·B(z − √ᾱ_t·μ)` with `k_t = v√ᾱ_t / (v·ᾱ_t + 1 − ᾱ_t)`, and
/// the returned noise is the one consistent with `x̂0`. It ignores the
/// condition, so guidance leaves its output unchanged. Like
/// [`OracleDenoiser`], [`Denoiser::observe_reframe`] moves `μ` to the
/// reframed latent on known cells.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    stored: LatentVideo,
    prior_variance: f64,
    blur_radius: usize,
    schedule: NoiseSchedule,
}

impl ToyDenoiser {
    pub const DEFAULT_PRIOR_VARIANCE: f64 = 0.002;
    pub const DEFAULT_BLUR_RADIUS: usize = 2;

    pub fn new(stored: LatentVideo, schedule: NoiseSchedule) -> Self {
        ToyDenoiser {
            stored,
            prior_variance: Self::DEFAULT_PRIOR_VARIANCE,
            blur_radius: Self::DEFAULT_BLUR_RADIUS,
            schedule,
        }
    }

    pub fn with_prior_variance(mut self, v: f64) -> Self {
        self.prior_variance = v;
        self
    }

    pub fn with_blur_radius(mut self, r: usize) -> Self {
        self.blur_radius = r;
        self
    }
}

fn box_blur(z: &LatentVideo, r: usize) -> LatentVideo {
    let s = z.shape();
    LatentVideo::from_fn(s, |f, c, y, x| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(r)..=(y + r).min(s.height - 1) {
            for xx in x.saturating_sub(r)..=(x + r).min(s.width - 1) {
                acc += z.get(f, c, yy, xx);
                n += 1.0;
            }
        }
        acc / n
    })
}

impl Denoiser for ToyDenoiser {
    fn predict_noise(&mut self, z: &LatentVideo, t: usize, _condition: Option<&Condition>) -> Result<LatentVideo, SchedulerError> {
        let ab = self.schedule.alpha_bar(Level::Train(t))?;
        if ab >= 1.0 - MIN_ALPHA_BAR {
            return Err(SchedulerError::DegenerateAlpha { level: Level::Train(t) });
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let v = self.prior_variance;
        let gain = v * a / (v * ab + 1.0 - ab);
        let residual = z.zip_map(&self.stored, |zi, m| zi - a * m)?;
        let x0 = self.stored.zip_map(&box_blur(&residual, self.blur_radius), |m, r| m + gain * r)?;
        Ok(z.zip_map(&x0, |zi, xi| (zi - a * xi) / b)?)
    }

    fn observe_reframe(&mut self, z0_reframed: &LatentVideo, mask: &OcclusionMask) {
        if let Ok(merged) = crate::rehab::merge_step(z0_reframed, &self.stored, mask) {
            self.stored = merged;
        }
    }
}
