//! DDIM sampling with classifier-free guidance against an exact denoiser.

use camreframe::rng::SplitMix64;
use camreframe::scheduler::{ddim_step, select_timesteps, Denoiser, GuidedDenoiser, Level, NoiseSchedule, OracleDenoiser};
use camreframe::video::{LatentShape, LatentVideo};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let steps = select_timesteps(1000, 25)?;
    println!("timesteps: {:?}", steps.as_slice());

    let shape = LatentShape::new(4, 3, 6, 8);
    let target = LatentVideo::from_fn(shape, |f, c, y, x| ((f + c) as f64 * 0.3 + y as f64 * 0.1 - x as f64 * 0.05).sin());
    let mut denoiser = GuidedDenoiser::new(OracleDenoiser::new(target.clone(), sched.clone()), 7.5, None);

    let mut z = LatentVideo::gaussian(shape, &mut SplitMix64::stream(0, 0));
    for k in (1..=steps.len()).rev() {
        let (from, to) = (steps.level(k), steps.level(k - 1));
        let t = match from {
            Level::Train(t) => t,
            Level::Clean => unreachable!(),
        };
        let eps = denoiser.predict_noise(&z, t, None)?;
        z = ddim_step(&z, &eps, from, to, &sched)?;
        if k % 5 == 0 || k == 1 {
            println!("step {k:>2} -> {:>2}: max |z - target| = {:.3e}", k - 1, z.max_abs_diff(&target));
        }
    }
    Ok(())
}
