//! Command-line front end. The `camreframe` binary is a thin wrapper around
//! [`main_with_args`].
//!
//! Every subcommand writes its artifacts under `--out` and prints a one-line
//! JSON summary on stdout. Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error as ThisError;

use crate::alignment::{build_graph, optimize_alignment, AlignConfig};
use crate::io::{self, write_json, write_mask_pgm, write_realestate, write_tensor, write_video_ppm};
use crate::metrics::{evaluate_poses, psnr, PoseErrorReport, Psnr};
use crate::reframe::{reframe_latent, Codec, IdentityCodec, PoolingCodec, ReframeScene, RenderMode};
use crate::rehab::{run_pipeline, target_poses, PipelineReport, PipelineSettings, RunConfig, SceneInputs};
use crate::scheduler::{Level, NoiseSchedule, OracleDenoiser, ToyDenoiser};
use crate::synthscene::{emit_edge_observations, make_scene, render_bundle, GroundTruthBundle, SceneKind, SceneModel, SceneSpec};
use crate::trajectory::{basic_trajectory, parse_realestate, BasicMotion, Trajectory};
use crate::Error;

/// Environment variable capping worker threads; 0 or unset means automatic.
pub const THREADS_ENV: &str = "REFRAME_THREADS";

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] Error),
}

macro_rules! data_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.into())
            }
        }
    )*};
}

data_error_from!(
    crate::geometry::GeometryError,
    crate::trajectory::TrajectoryError,
    crate::alignment::AlignmentError,
    crate::scheduler::SchedulerError,
    crate::reframe::ReframeError,
    crate::rehab::RehabError,
    crate::metrics::MetricsError,
    crate::synthscene::SceneError,
    crate::io::IoError,
    crate::video::VideoError
);

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    pub fn kind(&self) -> String {
        match self {
            CliError::Usage(_) => "Usage".to_string(),
            CliError::Data(e) => e.kind(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CodecChoice {
    #[default]
    Identity,
    /// Average pooling by `codec_factor`.
    Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserChoice {
    /// Exact noise towards the source video, then towards the target-view
    /// ground truth in holes.
    #[default]
    Oracle,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Camera path generated when no trajectory file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub motion: BasicMotion,
    pub magnitude: f64,
    pub orbit_radius: Option<f64>,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            motion: BasicMotion::PanRight,
            magnitude: 0.5,
            orbit_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentSettings {
    #[serde(flatten)]
    pub optimizer: AlignConfig,
    /// Std of the Gaussian noise added to synthetic pairwise point maps.
    pub observation_noise: f64,
}

impl Default for AlignmentSettings {
    fn default() -> Self {
        AlignmentSettings {
            optimizer: AlignConfig::default(),
            observation_noise: 0.0,
        }
    }
}

/// The `--config` document. Relative paths are taken as given (relative to
/// the working directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Scene bundle written by `synth`; synthesized from `scene` when absent.
    pub bundle: Option<PathBuf>,
    /// RealEstate10K text or trajectory JSON; generated from `motion` when absent.
    pub trajectory: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub scene: SceneSpec,
    pub motion: MotionConfig,
    pub run: RunConfig,
    pub schedule: ScheduleConfig,
    pub codec: CodecChoice,
    pub codec_factor: usize,
    pub denoiser: DenoiserChoice,
    pub splat_radius: f64,
    pub translation_scale: Option<f64>,
    pub alignment: AlignmentSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bundle: None,
            trajectory: None,
            out: None,
            scene: SceneSpec::default(),
            motion: MotionConfig::default(),
            run: RunConfig::default(),
            schedule: ScheduleConfig::default(),
            codec: CodecChoice::Identity,
            codec_factor: 4,
            denoiser: DenoiserChoice::Oracle,
            splat_radius: 1.0,
            translation_scale: None,
            alignment: AlignmentSettings::default(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "camreframe", version, about = "Camera reframing for latent video diffusion on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural scene bundle (frames, depth, point maps, poses).
    Synth(SynthArgs),
    /// Generate a basic camera motion.
    Trajgen(TrajgenArgs),
    /// Recover poses and scales from pairwise point maps of a bundle.
    Align(AlignArgs),
    /// Re-render a bundle's clean frames along a trajectory.
    Reframe(ReframeArgs),
    /// Full sampling with reframing and rehabilitation.
    Run(RunArgs),
    /// Rotation and translation error between two trajectories.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SceneFlags {
    /// Scene bundle directory written by `synth`.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// RealEstate10K text or trajectory JSON.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[arg(long)]
    pub motion: Option<BasicMotion>,
    #[arg(long)]
    pub magnitude: Option<f64>,
    #[arg(long)]
    pub mode: Option<RenderMode>,
    #[arg(long)]
    pub splat_radius: Option<f64>,
    #[arg(long)]
    pub codec: Option<CodecChoice>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub kind: Option<SceneKind>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Camera-from-world source poses; identity cameras when absent.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrajgenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub motion: Option<BasicMotion>,
    /// Final displacement (scene units) or angle (radians).
    #[arg(long)]
    pub magnitude: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub orbit_radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReframeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scene: SceneFlags,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scene: SceneFlags,
    /// Sampling step of the latent warp (25 is pure noise, 0 is clean).
    #[arg(long)]
    pub warp_step: Option<usize>,
    #[arg(long)]
    pub noise_offset: Option<usize>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub denoiser: Option<DenoiserChoice>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated trajectory (JSON or RealEstate10K text).
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth trajectory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Image size used to interpret RealEstate10K intrinsics.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ValueEnum for BasicMotion {
    fn value_variants<'a>() -> &'a [Self] {
        &BasicMotion::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

impl ValueEnum for RenderMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[RenderMode::TimeAware, RenderMode::TimeStatic]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            RenderMode::TimeAware => "time-aware",
            RenderMode::TimeStatic => "time-static",
        }))
    }
}

impl ValueEnum for SceneKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[SceneKind::Static, SceneKind::Dynamic]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            SceneKind::Static => "static",
            SceneKind::Dynamic => "dynamic",
        }))
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => io::read_json::<PipelineConfig>(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
        cfg.scene.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out.clone().ok_or_else(|| CliError::Usage("--out is required (or \"out\" in the config)".into()))?;
    fs::create_dir_all(&dir).map_err(|source| io::IoError::File {
        path: dir.display().to_string(),
        source,
    })?;
    Ok(dir)
}

/// Reads a trajectory as JSON (`.json`) or RealEstate10K text.
pub fn read_trajectory(path: &Path, width: usize, height: usize) -> Result<Trajectory, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(io::read_json(path)?)
    } else {
        let text = fs::read_to_string(path).map_err(|source| io::IoError::File {
            path: path.display().to_string(),
            source,
        })?;
        Ok(parse_realestate(&text, width, height)?)
    }
}

fn apply_scene_flags(cfg: &mut PipelineConfig, flags: &SceneFlags) {
    if let Some(b) = &flags.bundle {
        cfg.bundle = Some(b.clone());
    }
    if let Some(t) = &flags.trajectory {
        cfg.trajectory = Some(t.clone());
    }
    if let Some(m) = flags.motion {
        cfg.motion.motion = m;
    }
    if let Some(m) = flags.magnitude {
        cfg.motion.magnitude = m;
    }
    if let Some(m) = flags.mode {
        cfg.run.mode = m;
    }
    if let Some(r) = flags.splat_radius {
        cfg.splat_radius = r;
    }
    if let Some(c) = flags.codec {
        cfg.codec = c;
    }
}

/// The bundle from `cfg.bundle`, or one synthesized from `cfg.scene`, with
/// the scene model that produced it.
fn load_scene(cfg: &PipelineConfig) -> Result<(SceneModel, GroundTruthBundle), CliError> {
    match &cfg.bundle {
        Some(dir) => {
            let (bundle, spec) = io::read_bundle(dir)?;
            Ok((make_scene(&spec)?, bundle))
        }
        None => {
            let scene = make_scene(&cfg.scene)?;
            let poses = crate::synthscene::default_source_poses(cfg.scene.frames);
            let bundle = render_bundle(&scene, &poses, &scene.intrinsics())?;
            Ok((scene, bundle))
        }
    }
}

fn load_trajectory(cfg: &PipelineConfig, frames: usize, width: usize, height: usize) -> Result<Trajectory, CliError> {
    match &cfg.trajectory {
        Some(path) => read_trajectory(path, width, height),
        None => Ok(basic_trajectory(cfg.motion.motion, cfg.motion.magnitude, frames, cfg.motion.orbit_radius)?),
    }
}

fn codec(cfg: &PipelineConfig) -> Box<dyn Codec> {
    match cfg.codec {
        CodecChoice::Identity => Box::new(IdentityCodec),
        CodecChoice::Pooling => Box::new(PoolingCodec::new(cfg.codec_factor)),
    }
}

fn schedule(cfg: &PipelineConfig) -> Result<NoiseSchedule, CliError> {
    let s = &cfg.schedule;
    Ok(NoiseSchedule::linear(s.train_steps, s.beta_start, s.beta_end)?)
}

fn psnr_value(p: Psnr) -> Value {
    serde_json::to_value(p).unwrap_or(Value::Null)
}

fn synth(args: &SynthArgs) -> Result<Value, CliError> {
    let mut cfg = load_config(&args.common)?;
    let spec = &mut cfg.scene;
    if let Some(k) = args.kind {
        spec.kind = k;
    }
    if let Some(f) = args.frames {
        spec.frames = f;
    }
    if let Some(w) = args.width {
        spec.width = w;
    }
    if let Some(h) = args.height {
        spec.height = h;
    }
    let spec = spec.clone();
    let dir = out_dir(&cfg)?;
    let scene = make_scene(&spec)?;
    let poses = match &args.trajectory {
        Some(path) => read_trajectory(path, spec.width, spec.height)?,
        None => crate::synthscene::default_source_poses(spec.frames),
    };
    let bundle = render_bundle(&scene, &poses, &scene.intrinsics())?;
    io::write_bundle(&dir, &bundle, &spec)?;
    write_video_ppm(&dir, "frame", &bundle.frames)?;
    Ok(json!({
        "command": "synth",
        "kind": spec.kind,
        "frames": spec.frames,
        "width": spec.width,
        "height": spec.height,
        "seed": spec.seed,
        "movers": scene.movers.len(),
        "out": dir,
    }))
}

fn trajgen(args: &TrajgenArgs) -> Result<Value, CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(m) = args.motion {
        cfg.motion.motion = m;
    }
    if let Some(m) = args.magnitude {
        cfg.motion.magnitude = m;
    }
    if let Some(r) = args.orbit_radius {
        cfg.motion.orbit_radius = Some(r);
    }
    let frames = args.frames.unwrap_or(cfg.scene.frames);
    let dir = out_dir(&cfg)?;
    let traj = basic_trajectory(cfg.motion.motion, cfg.motion.magnitude, frames, cfg.motion.orbit_radius)?;
    write_realestate(&dir.join("trajectory.txt"), &traj, cfg.scene.width, cfg.scene.height)?;
    write_json(&dir.join("trajectory.json"), &traj)?;
    Ok(json!({
        "command": "trajgen",
        "motion": cfg.motion.motion,
        "magnitude": cfg.motion.magnitude,
        "frames": frames,
        "translation_sum": traj.translation_sum(),
        "out": dir,
    }))
}

fn align(args: &AlignArgs) -> Result<Value, CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(b) = &args.bundle {
        cfg.bundle = Some(b.clone());
    }
    let settings = &mut cfg.alignment;
    if let Some(s) = args.steps {
        settings.optimizer.steps = s;
    }
    if let Some(w) = args.window {
        settings.optimizer.window = w;
    }
    if let Some(n) = args.noise {
        settings.observation_noise = n;
    }
    let settings = settings.clone();
    let dir = out_dir(&cfg)?;
    let (_, bundle) = load_scene(&cfg)?;
    let frames = bundle.pointmaps.frames();
    let edges = build_graph(frames, settings.optimizer.window)?;
    let obs = emit_edge_observations(&bundle, &edges, settings.observation_noise, cfg.run.seed)?;
    let result = optimize_alignment(&obs, &vec![bundle.intrinsics; frames], &settings.optimizer)?;
    let estimated = Trajectory::from_poses(result.state.camera_poses())?;
    let errors = evaluate_poses(&estimated, &bundle.source_poses)?;
    let (w, h) = (bundle.intrinsics.width, bundle.intrinsics.height);
    write_realestate(&dir.join("poses.txt"), &estimated, w, h)?;
    write_json(&dir.join("poses.json"), &estimated)?;
    let points: Vec<f32> = result.state.global_pointmaps.iter().flatten().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    write_tensor(&dir.join("global_pointmaps.lrtf"), &io::Tensor::f32(vec![frames, h, w, 3], points)?)?;
    let report = json!({
        "edges": edges,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "identity_init_loss": result.identity_init_loss,
        "scales": result.state.scales(),
        "pose_errors": errors,
        "config": settings,
    });
    write_json(&dir.join("alignment.json"), &report)?;
    Ok(json!({
        "command": "align",
        "frames": frames,
        "edges": edges.len(),
        "final_loss": result.final_loss,
        "rot_error": errors.rot_error,
        "trans_error": errors.trans_error,
        "out": dir,
    }))
}

/// Target cameras and their ground-truth renders.
struct Targets {
    trajectory: Trajectory,
    gt: GroundTruthBundle,
}

fn targets(cfg: &PipelineConfig, scene: &SceneModel, bundle: &GroundTruthBundle, relative: &Trajectory) -> Result<Targets, CliError> {
    let poses = target_poses(relative, &bundle.source_poses, cfg.translation_scale)?;
    let trajectory = Trajectory::from_poses(poses)?;
    let gt = render_bundle(scene, &trajectory, &bundle.intrinsics)?;
    Ok(Targets { trajectory, gt })
}

fn reframe(args: &ReframeArgs) -> Result<Value, CliError> {
    let mut cfg = load_config(&args.common)?;
    apply_scene_flags(&mut cfg, &args.scene);
    let dir = out_dir(&cfg)?;
    let (scene, bundle) = load_scene(&cfg)?;
    let k = bundle.intrinsics;
    let relative = load_trajectory(&cfg, bundle.pointmaps.frames(), k.width, k.height)?;
    let t = targets(&cfg, &scene, &bundle, &relative)?;
    let codec = codec(&cfg);
    let sched = schedule(&cfg)?;
    let z0 = codec.encode(&bundle.frames)?;
    let sources = bundle.source_poses.poses();
    let target_list = t.trajectory.poses();
    let reframe_scene = ReframeScene {
        pointmaps: &bundle.pointmaps,
        source_poses: &sources,
        target_poses: &target_list,
        intrinsics: &k,
        mode: cfg.run.mode,
        splat_radius: cfg.splat_radius,
    };
    // At the clean level the denoiser is never consulted.
    let mut unused = OracleDenoiser::new(z0.clone(), sched.clone());
    let out = reframe_latent(&z0, Level::Clean, &mut unused, codec.as_ref(), &reframe_scene, &sched)?;
    let known = psnr(&out.x0_reframed, &t.gt.frames, Some(&out.pixel_mask))?;
    write_tensor(&dir.join("reframed.lrtf"), &io::pixel_video_tensor(&out.x0_reframed))?;
    write_tensor(&dir.join("mask.lrtf"), &io::mask_tensor(&out.pixel_mask))?;
    write_tensor(&dir.join("latent_mask.lrtf"), &io::mask_tensor(&out.latent_mask))?;
    write_realestate(&dir.join("target_poses.txt"), &t.trajectory, k.width, k.height)?;
    write_video_ppm(&dir, "reframed", &out.x0_reframed)?;
    write_mask_pgm(&dir, "mask", &out.pixel_mask)?;
    Ok(json!({
        "command": "reframe",
        "mode": cfg.run.mode,
        "pixel_coverage": out.pixel_mask.coverage(),
        "latent_coverage": out.latent_mask.coverage(),
        "psnr_known": psnr_value(known),
        "out": dir,
    }))
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    pipeline: &'a PipelineReport,
    denoiser: DenoiserChoice,
    codec: CodecChoice,
    schedule: &'a ScheduleConfig,
    /// Against the target-view ground truth, on known pixels and overall.
    psnr_known: Psnr,
    psnr_all: Psnr,
    frame_difference_energy: f64,
}

fn run(args: &RunArgs) -> Result<Value, CliError> {
    let mut cfg = load_config(&args.common)?;
    apply_scene_flags(&mut cfg, &args.scene);
    let r = &mut cfg.run;
    if let Some(v) = args.warp_step {
        r.warp_step = v;
    }
    if let Some(v) = args.noise_offset {
        r.noise_offset = v;
    }
    if let Some(v) = args.sample_steps {
        r.sample_steps = v;
    }
    if let Some(v) = args.guidance {
        r.guidance = v;
    }
    if let Some(d) = args.denoiser {
        cfg.denoiser = d;
    }
    let dir = out_dir(&cfg)?;
    let (scene, bundle) = load_scene(&cfg)?;
    let k = bundle.intrinsics;
    let relative = load_trajectory(&cfg, bundle.pointmaps.frames(), k.width, k.height)?;
    let t = targets(&cfg, &scene, &bundle, &relative)?;
    let codec = codec(&cfg);
    let sched = schedule(&cfg)?;
    let source_latent = codec.encode(&bundle.frames)?;
    let settings = PipelineSettings {
        run: cfg.run.clone(),
        splat_radius: cfg.splat_radius,
        translation_scale: cfg.translation_scale,
        condition: None,
    };
    let inputs = SceneInputs::from_bundle(&bundle);
    let out = match cfg.denoiser {
        DenoiserChoice::Oracle => {
            let oracle = OracleDenoiser::new(source_latent, sched.clone()).with_inpaint_target(codec.encode(&t.gt.frames)?);
            run_pipeline(oracle, codec.as_ref(), &sched, &settings, &inputs, &relative)?
        }
        DenoiserChoice::Toy => run_pipeline(ToyDenoiser::new(source_latent, sched.clone()), codec.as_ref(), &sched, &settings, &inputs, &relative)?,
    };
    let psnr_known = psnr(&out.video, &t.gt.frames, Some(&out.pixel_mask))?;
    let psnr_all = psnr(&out.video, &t.gt.frames, None)?;
    let report = RunReport {
        pipeline: &out.report,
        denoiser: cfg.denoiser,
        codec: cfg.codec,
        schedule: &cfg.schedule,
        psnr_known,
        psnr_all,
        frame_difference_energy: out.video.frame_difference_energy(),
    };
    write_json(&dir.join("report.json"), &report)?;
    write_tensor(&dir.join("video.lrtf"), &io::pixel_video_tensor(&out.video))?;
    write_tensor(&dir.join("latent.lrtf"), &io::latent_tensor(&out.latent))?;
    write_tensor(&dir.join("mask.lrtf"), &io::mask_tensor(&out.pixel_mask))?;
    write_tensor(&dir.join("latent_mask.lrtf"), &io::mask_tensor(&out.latent_mask))?;
    write_realestate(&dir.join("target_poses.txt"), &t.trajectory, k.width, k.height)?;
    write_video_ppm(&dir, "frame", &out.video)?;
    write_mask_pgm(&dir, "mask", &out.pixel_mask)?;
    log::info!("run finished in {:?}", out.report.timings.total());
    Ok(json!({
        "command": "run",
        "denoiser": cfg.denoiser,
        "mode": cfg.run.mode,
        "warp_step": cfg.run.warp_step,
        "noise_offset": cfg.run.noise_offset,
        "pixel_coverage": out.report.pixel_coverage,
        "psnr_known": psnr_value(psnr_known),
        "psnr_all": psnr_value(psnr_all),
        "out": dir,
    }))
}

fn eval(args: &EvalArgs) -> Result<Value, CliError> {
    let est = read_trajectory(&args.est, args.width, args.height)?;
    let gt = read_trajectory(&args.gt, args.width, args.height)?;
    let report: PoseErrorReport = evaluate_poses(&est, &gt)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|source| io::IoError::File {
            path: dir.display().to_string(),
            source,
        })?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(serde_json::to_value(&report).unwrap_or(Value::Null))
}

/// Runs one parsed command and returns its summary.
pub fn execute(command: &Command) -> Result<Value, CliError> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Trajgen(a) => trajgen(a),
        Command::Align(a) => align(a),
        Command::Reframe(a) => reframe(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
    }
}

fn configure_threads() {
    let n = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    if n > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set {THREADS_ENV}={n}: {e}");
        }
    }
}

/// Parses `args` (program name first), runs the command and reports.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    configure_threads();
    match execute(&cli.command) {
        Ok(summary) => {
            let mut line = summary;
            if let Value::Object(map) = &mut line {
                map.insert("status".into(), json!("ok"));
            }
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            println!("{}", json!({ "status": "error", "kind": e.kind(), "message": e.to_string() }));
            ExitCode::from(e.exit_code())
        }
    }
}
