//! End-to-end camera reframing of a static scene with the exact denoiser.

use camreframe::metrics::psnr;
use camreframe::reframe::{Codec, IdentityCodec};
use camreframe::rehab::{run_pipeline, target_poses, PipelineSettings, SceneInputs};
use camreframe::scheduler::{NoiseSchedule, OracleDenoiser};
use camreframe::synthscene::{render_bundle, synthesize, SceneSpec};
use camreframe::trajectory::{basic_trajectory, BasicMotion, Trajectory};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (scene, bundle) = synthesize(&SceneSpec::default())?;
    let relative = basic_trajectory(BasicMotion::PanRight, 0.5, bundle.source_poses.len(), None)?;
    let targets = Trajectory::from_poses(target_poses(&relative, &bundle.source_poses, None)?)?;
    let truth = render_bundle(&scene, &targets, &bundle.intrinsics)?;

    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let codec = IdentityCodec;
    // The oracle regenerates the source video, then fills holes from the true
    // target views once it sees the reframed latent.
    let denoiser = OracleDenoiser::new(codec.encode(&bundle.frames)?, sched.clone()).with_inpaint_target(codec.encode(&truth.frames)?);
    let settings = PipelineSettings::default();
    let out = run_pipeline(denoiser, &codec, &sched, &settings, &SceneInputs::from_bundle(&bundle), &relative)?;

    let r = &out.report;
    println!("merge iterations {}, plain steps {}", r.merge_iterations, r.plain_steps);
    println!("coverage {:.1}%", 100.0 * r.pixel_coverage);
    println!("PSNR known {}", psnr(&out.video, &truth.frames, Some(&out.pixel_mask))?);
    println!("PSNR all   {}", psnr(&out.video, &truth.frames, None)?);
    println!("stage timings: {:?}", r.timings);
    Ok(())
}
