//! End-to-end sampling with a camera change: plain DDIM down to the warp
//! step, latent reframing, then rehabilitation and decoding.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{denoise_step, rehabilitate, RehabError, RunConfig, STREAM_INITIAL_NOISE};
use crate::geometry::{Intrinsics, Pose};
use crate::reframe::{reframe_latent, Codec, PointMaps, ReframeOutput, ReframeScene};
use crate::rng::SplitMix64;
use crate::scheduler::{select_timesteps, Condition, Denoiser, GuidedDenoiser, NoiseSchedule};
use crate::synthscene::GroundTruthBundle;
use crate::trajectory::{compose_targets, normalize_translation, relativize, Trajectory};
use crate::video::{LatentVideo, OcclusionMask, PixelVideo};

/// Geometry of the source video.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub pointmaps: PointMaps,
    pub source_poses: Trajectory,
    pub intrinsics: Intrinsics,
}

impl SceneInputs {
    pub fn from_bundle(bundle: &GroundTruthBundle) -> Self {
        SceneInputs {
            pointmaps: bundle.pointmaps.clone(),
            source_poses: bundle.source_poses.clone(),
            intrinsics: bundle.intrinsics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub run: RunConfig,
    pub splat_radius: f64,
    /// Rescale the relative trajectory's translations to sum to this value
    /// before composing; `None` uses it as given.
    pub translation_scale: Option<f64>,
    pub condition: Option<Condition>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            run: RunConfig::default(),
            splat_radius: 1.0,
            translation_scale: None,
            condition: None,
        }
    }
}

/// `target_j = Δ_j ∘ source_j` with `Δ` the (optionally rescaled) trajectory
/// relative to its first frame.
pub fn target_poses(trajectory: &Trajectory, source: &Trajectory, translation_scale: Option<f64>) -> Result<Vec<Pose>, RehabError> {
    let mut rel = relativize(trajectory);
    if let Some(scale) = translation_scale {
        rel = normalize_translation(&rel, scale);
    }
    Ok(compose_targets(&rel, source)?.poses())
}

/// Wall-clock per stage. Not serialized, so reports stay reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub pre_warp: Duration,
    pub reframe: Duration,
    pub rehab: Duration,
    pub decode: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.pre_warp + self.reframe + self.rehab + self.decode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub config: RunConfig,
    pub splat_radius: f64,
    /// Fraction of known pixels after reframing.
    pub pixel_coverage: f64,
    pub latent_coverage: f64,
    pub merge_iterations: usize,
    pub plain_steps: usize,
    pub target_poses: Vec<Pose>,
    #[serde(skip)]
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub video: PixelVideo,
    pub latent: LatentVideo,
    pub latent_mask: OcclusionMask,
    pub pixel_mask: OcclusionMask,
    pub reframed: ReframeOutput,
    pub report: PipelineReport,
}

pub fn run_pipeline<D: Denoiser, C: Codec + ?Sized>(
    denoiser: D,
    codec: &C,
    sched: &NoiseSchedule,
    settings: &PipelineSettings,
    scene: &SceneInputs,
    trajectory: &Trajectory,
) -> Result<PipelineOutput, RehabError> {
    let run = &settings.run;
    run.validate()?;
    let steps = select_timesteps(sched.train_steps(), run.sample_steps)?;
    let targets = target_poses(trajectory, &scene.source_poses, settings.translation_scale)?;
    let sources = scene.source_poses.poses();
    let k = &scene.intrinsics;
    let shape = codec.latent_shape(scene.pointmaps.frames(), k.height, k.width);
    let mut guided = GuidedDenoiser::new(denoiser, run.guidance, settings.condition.clone());
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let mut z = LatentVideo::gaussian(shape, &mut SplitMix64::stream(run.seed, STREAM_INITIAL_NOISE));
    for s in (run.warp_step + 1..=run.sample_steps).rev() {
        z = denoise_step(&z, s, &mut guided, &steps, sched)?;
    }
    timings.pre_warp = clock.elapsed();

    let clock = Instant::now();
    let reframe_scene = ReframeScene {
        pointmaps: &scene.pointmaps,
        source_poses: &sources,
        target_poses: &targets,
        intrinsics: k,
        mode: run.mode,
        splat_radius: settings.splat_radius,
    };
    let reframed = reframe_latent(&z, steps.level(run.warp_step), &mut guided, codec, &reframe_scene, sched)?;
    guided.observe_reframe(&reframed.z0_reframed, &reframed.latent_mask);
    timings.reframe = clock.elapsed();

    let clock = Instant::now();
    let latent = rehabilitate(&reframed.z0_reframed, &reframed.latent_mask, &mut guided, sched, &steps, run)?;
    timings.rehab = clock.elapsed();

    let clock = Instant::now();
    let video = codec.decode(&latent)?;
    timings.decode = clock.elapsed();
    log::info!(
        "pipeline: pre-warp {:?}, reframe {:?}, rehab {:?}, decode {:?}",
        timings.pre_warp,
        timings.reframe,
        timings.rehab,
        timings.decode
    );

    let report = PipelineReport {
        config: run.clone(),
        splat_radius: settings.splat_radius,
        pixel_coverage: reframed.pixel_mask.coverage(),
        latent_coverage: reframed.latent_mask.coverage(),
        merge_iterations: run.sample_steps - run.merge_stop(),
        plain_steps: run.merge_stop(),
        target_poses: targets,
        timings,
    };
    Ok(PipelineOutput {
        video,
        latent,
        latent_mask: reframed.latent_mask.clone(),
        pixel_mask: reframed.pixel_mask.clone(),
        reframed,
        report,
    })
}
