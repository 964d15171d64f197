//! Renders a procedural dynamic scene and writes it as a bundle.
//!
//! cargo run --example synth_scene [out_dir]

use camreframe::io::write_bundle;
use camreframe::synthscene::{synthesize, SceneKind, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("camreframe_scene"));
    let spec = SceneSpec {
        kind: SceneKind::Dynamic,
        frames: 8,
        seed: 3,
        ..SceneSpec::default()
    };
    let (scene, bundle) = synthesize(&spec)?;
    let valid = bundle.pointmaps.validity().iter().filter(|&&v| v != 0).count();
    let depth_max = bundle.depth.iter().cloned().fold(0.0, f64::max);
    println!("{} movers, {} frames of {}x{}", scene.movers.len(), spec.frames, spec.width, spec.height);
    println!("valid points: {valid}, max depth {depth_max:.3}");
    println!("frame energy between consecutive frames: {:.4}", bundle.frames.frame_difference_energy());
    write_bundle(&out, &bundle, &spec)?;
    println!("bundle written to {}", out.display());
    Ok(())
}
