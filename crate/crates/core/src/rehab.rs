//! Latent rehabilitation: masked re-noising and inpainting of the reframed
//! latent, with the known region held a few sampling steps less noisy than
//! the unknown one.
//!
//! Timeline for `S` sampling steps, warp step `t_w` and offset `o`:
//!
//! 1. unknown cells start as fresh Gaussian noise at step `S`, known cells
//!    are the reframed latent noised to step `S - o`;
//! 2. each merge iteration `s = S … t_w + o + 1` merges both regions, runs
//!    one DDIM step on the merged latent and keeps the result only for the
//!    unknown cells, while known cells are re-noised from the reframed latent
//!    at `s - 1 - o`;
//! 3. after a last merge (unknown at `t_w + o`, known at `t_w`) the whole
//!    latent is denoised normally from `t_w + o` to 0.

pub mod pipeline;

pub use pipeline::{run_pipeline, target_poses, PipelineOutput, PipelineReport, PipelineSettings, SceneInputs, StageTimings};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reframe::{RenderMode, ReframeError};
use crate::rng::SplitMix64;
use crate::scheduler::{add_noise, ddim_step, Denoiser, Level, NoiseSchedule, SampleSteps, SchedulerError};
use crate::trajectory::TrajectoryError;
use crate::video::{LatentVideo, OcclusionMask, VideoError};

/// RNG stream ids derived from [`RunConfig::seed`].
pub(crate) const STREAM_INITIAL_NOISE: u64 = 0;
pub(crate) const STREAM_UNKNOWN_INIT: u64 = 1;
pub(crate) const STREAM_KNOWN_BASE: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum RehabError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("mask {mask} does not match latent {latent}")]
    MaskMismatch { mask: String, latent: String },
    #[error("latent became non-finite at sampling step {step}")]
    NonFiniteLatent { step: usize },
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Reframe(#[from] ReframeError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Sampling knobs. Step indices count sampling steps: `sample_steps` is
/// pure noise, 0 is clean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sample_steps: usize,
    pub warp_step: usize,
    pub noise_offset: usize,
    pub guidance: f64,
    pub mode: RenderMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sample_steps: 25,
            warp_step: 8,
            noise_offset: 3,
            guidance: 7.5,
            mode: RenderMode::TimeAware,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RehabError> {
        if self.sample_steps == 0 {
            return Err(RehabError::InvalidConfig("sample_steps must be positive".into()));
        }
        if self.warp_step >= self.sample_steps {
            return Err(RehabError::InvalidConfig(format!(
                "warp_step {} must be below sample_steps {}",
                self.warp_step, self.sample_steps
            )));
        }
        if self.warp_step + self.noise_offset > self.sample_steps {
            return Err(RehabError::InvalidConfig(format!(
                "warp_step + noise_offset = {} exceeds sample_steps {}",
                self.warp_step + self.noise_offset,
                self.sample_steps
            )));
        }
        if !self.guidance.is_finite() {
            return Err(RehabError::InvalidConfig("guidance must be finite".into()));
        }
        Ok(())
    }

    /// Unknown-region step at which merging stops.
    pub fn merge_stop(&self) -> usize {
        self.warp_step + self.noise_offset
    }
}

/// `m ⊙ known + (1 − m) ⊙ unknown`, the mask broadcast over channels.
pub fn merge_step(known: &LatentVideo, unknown: &LatentVideo, mask: &OcclusionMask) -> Result<LatentVideo, RehabError> {
    known.ensure_same_shape(unknown)?;
    let shape = known.shape();
    if !mask.matches(shape) {
        return Err(RehabError::MaskMismatch {
            mask: format!("{}x{}x{}", mask.frames(), mask.height(), mask.width()),
            latent: shape.to_string(),
        });
    }
    let plane = shape.plane();
    let mut out = unknown.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let f = i / (shape.channels * plane);
        if mask.data()[f * plane + i % plane] == 1 {
            *v = known.data()[i];
        }
    }
    Ok(out)
}

/// Sampling step of the known region while the unknown one is at `unknown_step`.
pub fn known_level(unknown_step: usize, offset: usize) -> usize {
    unknown_step.saturating_sub(offset)
}

/// One merge as it entered the denoiser.
#[derive(Debug, Clone)]
pub struct MergeRecord {
    pub unknown_step: usize,
    pub known_step: usize,
    pub known_noise: LatentVideo,
    pub merged: LatentVideo,
}

/// Everything [`rehabilitate_traced`] merged, in order. The last record is
/// the final merge that precedes plain denoising.
#[derive(Debug, Clone, Default)]
pub struct RehabTrace {
    pub merges: Vec<MergeRecord>,
    pub merge_iterations: usize,
    pub plain_steps: usize,
}

impl RehabTrace {
    /// `(unknown_step, known_step)` of the final merge.
    pub fn final_levels(&self) -> Option<(usize, usize)> {
        self.merges.last().map(|m| (m.unknown_step, m.known_step))
    }
}

fn train_index(steps: &SampleSteps, k: usize) -> usize {
    match steps.level(k) {
        Level::Train(t) => t,
        Level::Clean => unreachable!("denoiser is never queried at the clean level"),
    }
}

/// One DDIM step from sampling step `k` to `k - 1`.
pub(crate) fn denoise_step<D: Denoiser>(
    z: &LatentVideo,
    k: usize,
    denoiser: &mut D,
    steps: &SampleSteps,
    sched: &NoiseSchedule,
) -> Result<LatentVideo, RehabError> {
    let eps = denoiser.predict_noise(z, train_index(steps, k), None)?;
    let next = ddim_step(z, &eps, steps.level(k), steps.level(k - 1), sched)?;
    if !next.all_finite() {
        return Err(RehabError::NonFiniteLatent { step: k });
    }
    Ok(next)
}

fn check_inputs(z0_reframed: &LatentVideo, mask: &OcclusionMask, steps: &SampleSteps, config: &RunConfig) -> Result<(), RehabError> {
    config.validate()?;
    if steps.len() != config.sample_steps {
        return Err(RehabError::InvalidConfig(format!(
            "{} sampling timesteps given for sample_steps {}",
            steps.len(),
            config.sample_steps
        )));
    }
    if !z0_reframed.all_finite() {
        return Err(RehabError::NonFiniteLatent { step: config.warp_step });
    }
    if !mask.matches(z0_reframed.shape()) {
        return Err(RehabError::MaskMismatch {
            mask: format!("{}x{}x{}", mask.frames(), mask.height(), mask.width()),
            latent: z0_reframed.shape().to_string(),
        });
    }
    Ok(())
}

pub fn rehabilitate<D: Denoiser>(
    z0_reframed: &LatentVideo,
    mask: &OcclusionMask,
    denoiser: &mut D,
    sched: &NoiseSchedule,
    steps: &SampleSteps,
    config: &RunConfig,
) -> Result<LatentVideo, RehabError> {
    run_rehab(z0_reframed, mask, denoiser, sched, steps, config, None)
}

/// [`rehabilitate`] that also returns every merged latent and the noise
/// used for its known region.
pub fn rehabilitate_traced<D: Denoiser>(
    z0_reframed: &LatentVideo,
    mask: &OcclusionMask,
    denoiser: &mut D,
    sched: &NoiseSchedule,
    steps: &SampleSteps,
    config: &RunConfig,
) -> Result<(LatentVideo, RehabTrace), RehabError> {
    let mut trace = RehabTrace::default();
    let z = run_rehab(z0_reframed, mask, denoiser, sched, steps, config, Some(&mut trace))?;
    Ok((z, trace))
}

fn run_rehab<D: Denoiser>(
    z0_reframed: &LatentVideo,
    mask: &OcclusionMask,
    denoiser: &mut D,
    sched: &NoiseSchedule,
    steps: &SampleSteps,
    config: &RunConfig,
    mut trace: Option<&mut RehabTrace>,
) -> Result<LatentVideo, RehabError> {
    check_inputs(z0_reframed, mask, steps, config)?;
    let shape = z0_reframed.shape();
    let total = config.sample_steps;
    let stop = config.merge_stop();
    let offset = config.noise_offset;

    let merge_at = |unknown_step: usize, unknown: &LatentVideo, trace: &mut Option<&mut RehabTrace>| -> Result<LatentVideo, RehabError> {
        let known_step = known_level(unknown_step, offset);
        let mut rng = SplitMix64::stream(config.seed, STREAM_KNOWN_BASE + unknown_step as u64);
        let noise = LatentVideo::gaussian(shape, &mut rng);
        let known = add_noise(z0_reframed, steps.level(known_step), &noise, sched)?;
        let merged = merge_step(&known, unknown, mask)?;
        if let Some(t) = trace.as_deref_mut() {
            t.merges.push(MergeRecord {
                unknown_step,
                known_step,
                known_noise: noise,
                merged: merged.clone(),
            });
        }
        Ok(merged)
    };

    let mut unknown = LatentVideo::gaussian(shape, &mut SplitMix64::stream(config.seed, STREAM_UNKNOWN_INIT));
    for s in (stop + 1..=total).rev() {
        let merged = merge_at(s, &unknown, &mut trace)?;
        unknown = denoise_step(&merged, s, denoiser, steps, sched)?;
    }
    let mut z = merge_at(stop, &unknown, &mut trace)?;
    for s in (1..=stop).rev() {
        z = denoise_step(&z, s, denoiser, steps, sched)?;
    }
    if let Some(t) = trace {
        t.merge_iterations = total - stop;
        t.plain_steps = stop;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{select_timesteps, OracleDenoiser, ToyDenoiser};
    use crate::video::LatentShape;

    fn shape() -> LatentShape {
        LatentShape::new(2, 3, 4, 6)
    }

    fn latent(seed: u64) -> LatentVideo {
        LatentVideo::gaussian(shape(), &mut SplitMix64::new(seed))
    }

    fn half_mask() -> OcclusionMask {
        let mut m = OcclusionMask::filled(2, 4, 6, false);
        for f in 0..2 {
            for y in 0..4 {
                for x in 0..3 {
                    m.set(f, y, x, true);
                }
            }
        }
        m
    }

    #[test]
    fn merge_examples() {
        let (k, u) = (latent(1), latent(2));
        assert_eq!(merge_step(&k, &u, &OcclusionMask::filled(2, 4, 6, true)).unwrap(), k);
        assert_eq!(merge_step(&k, &u, &OcclusionMask::filled(2, 4, 6, false)).unwrap(), u);

        let s = LatentShape::new(1, 1, 1, 2);
        let known = LatentVideo::from_vec(s, vec![0.7, 0.5]).unwrap();
        let unknown = LatentVideo::from_vec(s, vec![0.1, -0.2]).unwrap();
        let m = OcclusionMask::from_vec(1, 1, 2, vec![1, 0]).unwrap();
        assert_eq!(merge_step(&known, &unknown, &m).unwrap().data(), &[0.7, -0.2]);
        assert!(merge_step(&k, &u, &OcclusionMask::filled(1, 4, 6, true)).is_err());
    }

    #[test]
    fn mask_broadcasts_over_channels() {
        let merged = merge_step(&latent(1), &latent(2), &half_mask()).unwrap();
        for c in 0..3 {
            assert_eq!(merged.get(1, c, 2, 1), latent(1).get(1, c, 2, 1));
            assert_eq!(merged.get(1, c, 2, 4), latent(2).get(1, c, 2, 4));
        }
    }

    #[test]
    fn known_level_examples() {
        assert_eq!(known_level(25, 3), 22);
        assert_eq!(known_level(2, 3), 0);
        assert_eq!(known_level(17, 0), 17);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig { warp_step: 25, ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(RehabError::InvalidConfig(_))));
        let bad = RunConfig { warp_step: 20, noise_offset: 6, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let edge = RunConfig { warp_step: 20, noise_offset: 5, ..RunConfig::default() };
        assert!(edge.validate().is_ok());
    }

    #[test]
    fn all_known_reproduces_reframed_latent() {
        let sched = NoiseSchedule::default();
        let steps = select_timesteps(1000, 25).unwrap();
        let z0 = latent(3);
        let mut oracle = OracleDenoiser::new(z0.clone(), sched.clone());
        let out = rehabilitate(&z0, &OcclusionMask::filled(2, 4, 6, true), &mut oracle, &sched, &steps, &RunConfig::default()).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-4);
    }

    #[test]
    fn all_unknown_degenerates_to_oracle_sampling() {
        let sched = NoiseSchedule::default();
        let steps = select_timesteps(1000, 25).unwrap();
        let target = latent(4);
        let mut oracle = OracleDenoiser::new(target.clone(), sched.clone());
        let out = rehabilitate(&latent(5), &OcclusionMask::filled(2, 4, 6, false), &mut oracle, &sched, &steps, &RunConfig::default()).unwrap();
        assert!(out.max_abs_diff(&target) < 1e-4);
    }

    #[test]
    fn default_timeline_counts() {
        let sched = NoiseSchedule::default();
        let steps = select_timesteps(1000, 25).unwrap();
        let mut oracle = OracleDenoiser::new(latent(6), sched.clone());
        let (_, trace) = rehabilitate_traced(&latent(6), &half_mask(), &mut oracle, &sched, &steps, &RunConfig::default()).unwrap();
        assert_eq!(trace.merge_iterations, 14);
        assert_eq!(trace.plain_steps, 11);
        assert_eq!(trace.merges.len(), 15);
        assert_eq!((trace.merges[0].unknown_step, trace.merges[0].known_step), (25, 22));
        assert_eq!(trace.final_levels(), Some((11, 8)));
    }

    #[test]
    fn known_cells_follow_forward_noising() {
        let sched = NoiseSchedule::default();
        let steps = select_timesteps(1000, 25).unwrap();
        let z0 = latent(7);
        let mask = half_mask();
        let mut toy = ToyDenoiser::new(latent(8), sched.clone());
        let (_, trace) = rehabilitate_traced(&z0, &mask, &mut toy, &sched, &steps, &RunConfig::default()).unwrap();
        for rec in &trace.merges {
            let expected = add_noise(&z0, steps.level(rec.known_step), &rec.known_noise, &sched).unwrap();
            let again = merge_step(&expected, &rec.merged, &mask).unwrap();
            assert_eq!(again, rec.merged, "step {}", rec.unknown_step);
        }
    }

    #[test]
    fn rejects_mismatched_steps() {
        let sched = NoiseSchedule::default();
        let steps = select_timesteps(1000, 20).unwrap();
        let mut oracle = OracleDenoiser::new(latent(1), sched.clone());
        assert!(matches!(
            rehabilitate(&latent(1), &half_mask(), &mut oracle, &sched, &steps, &RunConfig::default()),
            Err(RehabError::InvalidConfig(_))
        ));
    }
}
