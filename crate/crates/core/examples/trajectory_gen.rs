//! Generates every basic motion and round-trips one through RealEstate10K text.

use camreframe::io::serialize_realestate;
use camreframe::trajectory::{basic_trajectory, parse_realestate, BasicMotion};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for motion in BasicMotion::ALL {
        let orbit = matches!(motion, BasicMotion::OrbitCw | BasicMotion::OrbitCcw).then_some(2.0);
        let t = basic_trajectory(motion, 0.3, 16, orbit)?;
        let last = t.pose(t.len() - 1);
        println!(
            "{:<11} translation sum {:.3}, last frame rotated {:.2} deg",
            motion.name(),
            t.translation_sum(),
            last.rotation_angle().to_degrees()
        );
    }

    let t = basic_trajectory(BasicMotion::PanRight, 0.5, 4, None)?;
    let text = serialize_realestate(&t, 64, 48);
    print!("\n{text}");
    let back = parse_realestate(&text, 64, 48)?;
    let drift = (back.pose(3).translation() - t.pose(3).translation()).norm();
    println!("round-trip translation drift: {drift:.1e}");
    Ok(())
}
