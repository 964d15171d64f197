//! Training-free camera control for latent video diffusion.
//!
//! Midway through DDIM sampling the estimated clean video is lifted into
//! per-frame point clouds, re-rendered from new camera poses and re-encoded;
//! the holes this leaves are then inpainted by a masked merge loop that keeps
//! rendered content a few steps less noisy than the rest.
//!
//! Module map:
//!
//! - [`geometry`]: poses, intrinsics, pinhole projection
//! - [`trajectory`]: camera paths, RealEstate10K parsing, basic motions
//! - [`alignment`]: pairwise point maps to world points, poses and scales
//! - [`scheduler`]: noise schedule, DDIM, guidance, reference denoisers
//! - [`reframe`]: point lifting, z-buffer splatting, codecs, latent reframing
//! - [`rehab`]: masked merge loop and the end-to-end pipeline
//! - [`metrics`]: rotation/translation error and PSNR
//! - [`synthscene`]: procedural scenes with exact ground truth
//! - [`io`]: tensor container, trajectory text, images, JSON
//! - [`cli`]: the `camreframe` command line

pub mod alignment;
pub mod cli;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod reframe;
pub mod rehab;
pub mod rng;
pub mod scheduler;
pub mod synthscene;
pub mod trajectory;
pub mod video;

use thiserror::Error;

/// Union of every module error, for callers that do not care which stage failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Trajectory(#[from] trajectory::TrajectoryError),
    #[error(transparent)]
    Alignment(#[from] alignment::AlignmentError),
    #[error(transparent)]
    Scheduler(#[from] scheduler::SchedulerError),
    #[error(transparent)]
    Reframe(#[from] reframe::ReframeError),
    #[error(transparent)]
    Rehab(#[from] rehab::RehabError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Scene(#[from] synthscene::SceneError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Video(#[from] video::VideoError),
}

impl Error {
    /// Short variant name of the underlying failure, e.g. `BadCrc`.
    pub fn kind(&self) -> String {
        let debug = match self {
            Error::Geometry(e) => format!("{e:?}"),
            Error::Trajectory(e) => format!("{e:?}"),
            Error::Alignment(e) => format!("{e:?}"),
            Error::Scheduler(e) => format!("{e:?}"),
            Error::Reframe(e) => format!("{e:?}"),
            Error::Rehab(e) => format!("{e:?}"),
            Error::Metrics(e) => format!("{e:?}"),
            Error::Scene(e) => format!("{e:?}"),
            Error::Io(e) => format!("{e:?}"),
            Error::Video(e) => format!("{e:?}"),
        };
        innermost_variant(&debug).to_string()
    }
}

/// First identifier of a Debug string, descending through tuple wrappers
/// like `Reframe(Geometry(Singular))`.
fn innermost_variant(debug: &str) -> &str {
    let mut rest = debug;
    loop {
        let end = rest.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(rest.len());
        let (ident, tail) = rest.split_at(end);
        match tail.strip_prefix('(') {
            Some(inner) if inner.starts_with(|c: char| c.is_ascii_uppercase()) => rest = inner,
            _ => return ident,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
