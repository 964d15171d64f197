//! Sweeps render mode, warp step and noise offset with the toy denoiser on a
//! dynamic scene.

use camreframe::metrics::psnr;
use camreframe::reframe::{Codec, IdentityCodec, RenderMode};
use camreframe::rehab::{run_pipeline, target_poses, PipelineSettings, RunConfig, SceneInputs};
use camreframe::scheduler::{NoiseSchedule, ToyDenoiser};
use camreframe::synthscene::{render_bundle, synthesize, SceneKind, SceneSpec};
use camreframe::trajectory::{basic_trajectory, BasicMotion, Trajectory};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec {
        kind: SceneKind::Dynamic,
        seed: 3,
        ..SceneSpec::default()
    };
    let (scene, bundle) = synthesize(&spec)?;
    let relative = basic_trajectory(BasicMotion::PanRight, 0.2, spec.frames, None)?;
    let truth = render_bundle(&scene, &Trajectory::from_poses(target_poses(&relative, &bundle.source_poses, None)?)?, &bundle.intrinsics)?;
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let codec = IdentityCodec;
    let source = codec.encode(&bundle.frames)?;
    let inputs = SceneInputs::from_bundle(&bundle);
    println!("source frame-difference energy {:.3}", bundle.frames.frame_difference_energy());
    println!("{:<12} {:>5} {:>6} {:>9} {:>10}", "mode", "warp", "offset", "energy", "psnr");

    let mut runs = Vec::new();
    for mode in [RenderMode::TimeAware, RenderMode::TimeStatic] {
        runs.push((mode, 8, 3));
    }
    for warp in [0, 16] {
        runs.push((RenderMode::TimeAware, warp, 3));
    }
    for offset in [0, 5] {
        runs.push((RenderMode::TimeAware, 8, offset));
    }
    for (mode, warp_step, noise_offset) in runs {
        let settings = PipelineSettings {
            run: RunConfig {
                mode,
                warp_step,
                noise_offset,
                ..RunConfig::default()
            },
            ..PipelineSettings::default()
        };
        let out = run_pipeline(ToyDenoiser::new(source.clone(), sched.clone()), &codec, &sched, &settings, &inputs, &relative)?;
        println!(
            "{:<12} {warp_step:>5} {noise_offset:>6} {:>9.3} {:>10}",
            format!("{mode:?}"),
            out.video.frame_difference_energy(),
            psnr(&out.video, &truth.frames, None)?.to_string()
        );
    }
    Ok(())
}
