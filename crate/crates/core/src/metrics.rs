//! Camera-pose errors and masked PSNR.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::trace_angle;
use crate::trajectory::{normalize_translation, relativize, Trajectory};
use crate::video::{OcclusionMask, PixelVideo};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectory lengths differ: {est} vs {gt}")]
    LengthMismatch { est: usize, gt: usize },
    #[error("videos differ in shape: {0}")]
    ShapeMismatch(String),
    #[error("mask selects no pixels")]
    EmptyMask,
}

fn check_lengths(est: &Trajectory, gt: &Trajectory) -> Result<(), MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Per-frame `arccos((tr(R_est R_gtᵀ) − 1) / 2)`, clamped. No preprocessing.
pub fn rot_errors(est: &Trajectory, gt: &Trajectory) -> Result<Vec<f64>, MetricsError> {
    check_lengths(est, gt)?;
    Ok(est
        .frames()
        .iter()
        .zip(gt.frames())
        .map(|(e, g)| trace_angle(&(e.pose.rotation() * g.pose.rotation().transpose())))
        .collect())
}

pub fn rot_error(est: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    Ok(rot_errors(est, gt)?.iter().sum())
}

/// Per-frame `‖T_gt − T_est‖` after relativizing both trajectories and
/// normalizing their translation norms to sum to 1.
pub fn trans_errors(est: &Trajectory, gt: &Trajectory) -> Result<Vec<f64>, MetricsError> {
    check_lengths(est, gt)?;
    let est = normalize_translation(&relativize(est), 1.0);
    let gt = normalize_translation(&relativize(gt), 1.0);
    Ok(est
        .frames()
        .iter()
        .zip(gt.frames())
        .map(|(e, g)| (g.pose.translation() - e.pose.translation()).norm())
        .collect())
}

pub fn trans_error(est: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    Ok(trans_errors(est, gt)?.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub rot_error: f64,
    pub trans_error: f64,
    pub per_frame_rot: Vec<f64>,
    pub per_frame_trans: Vec<f64>,
}

/// Both errors with the evaluation preprocessing: rotations are compared
/// after relativizing both trajectories to their first frame.
pub fn evaluate_poses(est: &Trajectory, gt: &Trajectory) -> Result<PoseErrorReport, MetricsError> {
    let per_frame_rot = rot_errors(&relativize(est), &relativize(gt))?;
    let per_frame_trans = trans_errors(est, gt)?;
    Ok(PoseErrorReport {
        rot_error: per_frame_rot.iter().sum(),
        trans_error: per_frame_trans.iter().sum(),
        per_frame_rot,
        per_frame_trans,
    })
}

/// PSNR in dB, or `Exact` when the inputs agree everywhere they are compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Exact,
    Db(f64),
}

impl Psnr {
    /// `+∞` for `Exact`.
    pub fn value(self) -> f64 {
        match self {
            Psnr::Exact => f64::INFINITY,
            Psnr::Db(db) => db,
        }
    }

    pub fn at_least(self, db: f64) -> bool {
        self.value() >= db
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Exact => write!(f, "exact"),
            Psnr::Db(db) => write!(f, "{db:.2} dB"),
        }
    }
}

/// `"exact"` or a number, since JSON has no infinity.
impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Psnr::Exact => s.serialize_str("exact"),
            Psnr::Db(db) => s.serialize_f64(*db),
        }
    }
}

/// `10·log10(1 / MSE)` over all channels of the pixels selected by `mask`
/// (every pixel when `None`).
pub fn psnr(a: &PixelVideo, b: &PixelVideo, mask: Option<&OcclusionMask>) -> Result<Psnr, MetricsError> {
    let dims = (a.frames(), a.height(), a.width());
    if dims != (b.frames(), b.height(), b.width()) {
        return Err(MetricsError::ShapeMismatch(format!("{dims:?} vs {:?}", (b.frames(), b.height(), b.width()))));
    }
    if let Some(m) = mask {
        if (m.frames(), m.height(), m.width()) != dims {
            return Err(MetricsError::ShapeMismatch(format!("mask {:?} vs video {dims:?}", (m.frames(), m.height(), m.width()))));
        }
    }
    let (frames, h, w) = dims;
    let mut sum = 0.0;
    let mut count = 0usize;
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                if mask.is_some_and(|m| !m.is_known(f, y, x)) {
                    continue;
                }
                let (pa, pb) = (a.pixel(f, y, x), b.pixel(f, y, x));
                sum += (0..3).map(|c| (pa[c] - pb[c]).powi(2)).sum::<f64>();
                count += 3;
            }
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { Psnr::Exact } else { Psnr::Db(-10.0 * mse.log10()) })
}
