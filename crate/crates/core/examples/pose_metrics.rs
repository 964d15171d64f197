//! Rotation and translation errors between an estimated and a true path.

use camreframe::geometry::{Pose, Vec3};
use camreframe::metrics::{evaluate_poses, rot_error};
use camreframe::trajectory::{basic_trajectory, BasicMotion, Trajectory};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gt = basic_trajectory(BasicMotion::OrbitCw, 0.4, 8, Some(2.0))?;

    // Same path at twice the scale: translation error is scale-normalized.
    let doubled = Trajectory::from_poses(gt.poses().into_iter().map(|p| p.with_translation(p.translation() * 2.0)))?;
    println!("doubled scale: {:?}", evaluate_poses(&doubled, &gt)?);

    // Yaw drift growing by 0.01 rad per frame.
    let yawed = Trajectory::from_poses(gt.poses().into_iter().enumerate().map(|(j, p)| Pose::from_axis_angle(Vec3::y(), 0.01 * j as f64, Vec3::zeros()).compose(&p)))?;
    let report = evaluate_poses(&yawed, &gt)?;
    println!("extra yaw: rot {:.4} rad, trans {:.4}", report.rot_error, report.trans_error);
    println!("raw rot_error without relativizing: {:.4} rad", rot_error(&yawed, &gt)?);
    Ok(())
}
