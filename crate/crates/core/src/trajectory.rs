//! Camera trajectories: RealEstate10K parsing, relativization, scale
//! normalization, target-pose composition and the basic camera motions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, Mat3, Pose, Vec3};

/// Below this summed translation norm a trajectory is treated as pure rotation.
pub const MIN_TRANSLATION_SUM: f64 = 1e-12;

/// Rotation matrices read from text are snapped onto SO(3) when they deviate
/// by less than this.
const PARSE_ROTATION_TOLERANCE: f64 = 1e-4;

const REALESTATE_FIELDS: usize = 19;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("trajectory has no frames")]
    EmptyTrajectory,
    #[error("timestamps must be strictly increasing (frame {index})")]
    NonIncreasingTimestamps { index: usize },
    #[error("line {line}: {source}")]
    InvalidPose { line: usize, source: GeometryError },
    #[error("trajectory lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("basic trajectories need at least 2 frames, got {0}")]
    InvalidFrameCount(usize),
    #[error("orbit trajectories need a positive orbit radius")]
    MissingOrbitRadius,
    #[error("magnitude must be finite")]
    InvalidMagnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    /// Microseconds or a frame index, depending on the source.
    pub timestamp: i64,
    pub pose: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
}

/// Non-empty sequence of camera-from-world poses with strictly increasing
/// timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRepr", into = "TrajectoryRepr")]
pub struct Trajectory {
    source: Option<String>,
    frames: Vec<TrajectoryFrame>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    frames: Vec<TrajectoryFrame>,
}

impl TryFrom<TrajectoryRepr> for Trajectory {
    type Error = TrajectoryError;

    fn try_from(r: TrajectoryRepr) -> Result<Self, Self::Error> {
        Ok(Trajectory::new(r.frames)?.with_source(r.source))
    }
}

impl From<Trajectory> for TrajectoryRepr {
    fn from(t: Trajectory) -> Self {
        TrajectoryRepr {
            source: t.source,
            frames: t.frames,
        }
    }
}

impl Trajectory {
    pub fn new(frames: Vec<TrajectoryFrame>) -> Result<Self, TrajectoryError> {
        if frames.is_empty() {
            return Err(TrajectoryError::EmptyTrajectory);
        }
        if let Some(index) = frames
            .windows(2)
            .position(|w| w[1].timestamp <= w[0].timestamp)
        {
            return Err(TrajectoryError::NonIncreasingTimestamps { index: index + 1 });
        }
        Ok(Trajectory {
            source: None,
            frames,
        })
    }

    /// Poses indexed by frame number, no intrinsics.
    pub fn from_poses(poses: impl IntoIterator<Item = Pose>) -> Result<Self, TrajectoryError> {
        Trajectory::new(
            poses
                .into_iter()
                .enumerate()
                .map(|(i, pose)| TrajectoryFrame {
                    timestamp: i as i64,
                    pose,
                    intrinsics: None,
                })
                .collect(),
        )
    }

    pub fn with_source(mut self, source: Option<String>) -> Self {
        self.source = source;
        self
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    pub fn frames(&self) -> &[TrajectoryFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    pub fn pose(&self, index: usize) -> &Pose {
        &self.frames[index].pose
    }

    fn map_poses(&self, f: impl Fn(usize, &Pose) -> Pose) -> Trajectory {
        Trajectory {
            source: self.source.clone(),
            frames: self
                .frames
                .iter()
                .enumerate()
                .map(|(i, fr)| TrajectoryFrame {
                    pose: f(i, &fr.pose),
                    ..fr.clone()
                })
                .collect(),
        }
    }

    /// Sum of translation norms.
    pub fn translation_sum(&self) -> f64 {
        self.frames.iter().map(|f| f.pose.translation().norm()).sum()
    }

    /// Every frame set to the first frame's pose.
    pub fn first_frame_constant(&self) -> Trajectory {
        let first = self.frames[0].pose;
        self.map_poses(|_, _| first)
    }
}

/// Parses RealEstate10K camera text. The first line is an opaque source
/// identifier; every later non-empty line holds
/// `timestamp fx fy cx cy 0 0 r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2`
/// with intrinsics normalized by the image size, which is restored from
/// `width` and `height`. All-zero intrinsics yield frames without intrinsics.
pub fn parse_realestate(text: &str, width: usize, height: usize) -> Result<Trajectory, TrajectoryError> {
    let mut lines = text.lines();
    let source = lines
        .next()
        .map(|l| l.trim().to_string())
        .filter(|s| !s.is_empty());

    let mut frames = Vec::new();
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 2;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(parse_frame_line(line, line_no, width, height)?);
    }
    if frames.is_empty() {
        return Err(TrajectoryError::EmptyTrajectory);
    }
    Ok(Trajectory::new(frames)?.with_source(source))
}

fn parse_frame_line(line: &str, line_no: usize, width: usize, height: usize) -> Result<TrajectoryFrame, TrajectoryError> {
    let malformed = |reason: String| TrajectoryError::MalformedLine {
        line: line_no,
        reason,
    };
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    if fields.len() != REALESTATE_FIELDS {
        return Err(malformed(format!(
            "expected {REALESTATE_FIELDS} fields, found {}",
            fields.len()
        )));
    }
    let timestamp: i64 = fields[0]
        .parse()
        .map_err(|_| malformed(format!("timestamp {:?} is not an integer", fields[0])))?;
    let mut values = [0.0f64; REALESTATE_FIELDS - 1];
    for (slot, field) in values.iter_mut().zip(&fields[1..]) {
        *slot = field
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| malformed(format!("{field:?} is not a finite number")))?;
    }

    let [fx, fy, cx, cy] = [values[0], values[1], values[2], values[3]];
    let intrinsics = if [fx, fy, cx, cy].iter().all(|v| *v == 0.0) {
        None
    } else {
        let (w, h) = (width as f64, height as f64);
        Some(
            Intrinsics::new(fx * w, fy * h, cx * w, cy * h, width, height)
                .map_err(|e| malformed(e.to_string()))?,
        )
    };

    let m = &values[6..];
    let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let translation = Vec3::new(m[3], m[7], m[11]);
    let pose = Pose::new_snapped(rotation, translation, PARSE_ROTATION_TOLERANCE)
        .map_err(|source| TrajectoryError::InvalidPose {
            line: line_no,
            source,
        })?;
    Ok(TrajectoryFrame {
        timestamp,
        pose,
        intrinsics,
    })
}

/// Expresses every pose relative to the first: `Δ_j = P_j ∘ P_1⁻¹`.
/// The first frame becomes exactly the identity.
pub fn relativize(t: &Trajectory) -> Trajectory {
    let first_inv = t.frames[0].pose.inverse();
    t.map_poses(|i, p| {
        if i == 0 {
            Pose::identity()
        } else {
            p.compose(&first_inv)
        }
    })
}

/// Rescales translations so their norms sum to `target_scale`. Rotations are
/// untouched; trajectories with (numerically) zero translation pass through.
pub fn normalize_translation(t: &Trajectory, target_scale: f64) -> Trajectory {
    let sum = t.translation_sum();
    if sum <= MIN_TRANSLATION_SUM {
        return t.clone();
    }
    let k = target_scale / sum;
    t.map_poses(|_, p| p.with_translation(p.translation() * k))
}

/// `target_j = Δ_j ∘ original_j`. Timestamps and intrinsics follow `original`.
pub fn compose_targets(relative: &Trajectory, original: &Trajectory) -> Result<Trajectory, TrajectoryError> {
    if relative.len() != original.len() {
        return Err(TrajectoryError::LengthMismatch {
            left: relative.len(),
            right: original.len(),
        });
    }
    Ok(original.map_poses(|i, p| relative.frames[i].pose.compose(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasicMotion {
    ZoomIn,
    ZoomOut,
    PanLeft,
    PanRight,
    PanUp,
    PanDown,
    RotateCw,
    RotateCcw,
    OrbitCw,
    OrbitCcw,
}

impl BasicMotion {
    pub const ALL: [BasicMotion; 10] = [
        BasicMotion::ZoomIn,
        BasicMotion::ZoomOut,
        BasicMotion::PanLeft,
        BasicMotion::PanRight,
        BasicMotion::PanUp,
        BasicMotion::PanDown,
        BasicMotion::RotateCw,
        BasicMotion::RotateCcw,
        BasicMotion::OrbitCw,
        BasicMotion::OrbitCcw,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BasicMotion::ZoomIn => "zoom-in",
            BasicMotion::ZoomOut => "zoom-out",
            BasicMotion::PanLeft => "pan-left",
            BasicMotion::PanRight => "pan-right",
            BasicMotion::PanUp => "pan-up",
            BasicMotion::PanDown => "pan-down",
            BasicMotion::RotateCw => "rotate-cw",
            BasicMotion::RotateCcw => "rotate-ccw",
            BasicMotion::OrbitCw => "orbit-cw",
            BasicMotion::OrbitCcw => "orbit-ccw",
        }
    }

    fn is_orbit(&self) -> bool {
        matches!(self, BasicMotion::OrbitCw | BasicMotion::OrbitCcw)
    }
}

impl fmt::Display for BasicMotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BasicMotion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BasicMotion::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = BasicMotion::ALL.iter().map(|m| m.name()).collect();
                format!("unknown motion {s:?}, expected one of {}", names.join(", "))
            })
    }
}

/// Linear camera motion starting at the identity.
///
/// `magnitude` is the final displacement in scene units for pans and zooms
/// and the final angle in radians for rotations and orbits. Directions refer
/// to the camera body: a pan right moves the optical center towards `+x`,
/// a pan up towards `-y` (image up), a zoom in towards `+z`. Clockwise spins
/// turn the camera's up vector clockwise as seen from behind it. Orbits
/// circle a target `orbit_radius` ahead of the first camera about the
/// vertical axis while keeping it centered; clockwise moves the camera to
/// its right.
pub fn basic_trajectory(
    motion: BasicMotion,
    magnitude: f64,
    frames: usize,
    orbit_radius: Option<f64>,
) -> Result<Trajectory, TrajectoryError> {
    if frames < 2 {
        return Err(TrajectoryError::InvalidFrameCount(frames));
    }
    if !magnitude.is_finite() {
        return Err(TrajectoryError::InvalidMagnitude);
    }
    let radius = match (motion.is_orbit(), orbit_radius) {
        (true, Some(r)) if r > 0.0 && r.is_finite() => r,
        (true, _) => return Err(TrajectoryError::MissingOrbitRadius),
        (false, _) => 0.0,
    };

    let rot = |axis: Vec3, angle: f64| *Pose::from_axis_angle(axis, angle, Vec3::zeros()).rotation();
    let poses = (0..frames).map(|j| {
        let s = magnitude * j as f64 / (frames - 1) as f64;
        let (orientation, center) = match motion {
            BasicMotion::PanLeft => (Mat3::identity(), Vec3::new(-s, 0.0, 0.0)),
            BasicMotion::PanRight => (Mat3::identity(), Vec3::new(s, 0.0, 0.0)),
            BasicMotion::PanUp => (Mat3::identity(), Vec3::new(0.0, -s, 0.0)),
            BasicMotion::PanDown => (Mat3::identity(), Vec3::new(0.0, s, 0.0)),
            BasicMotion::ZoomIn => (Mat3::identity(), Vec3::new(0.0, 0.0, s)),
            BasicMotion::ZoomOut => (Mat3::identity(), Vec3::new(0.0, 0.0, -s)),
            BasicMotion::RotateCw => (rot(Vec3::z(), s), Vec3::zeros()),
            BasicMotion::RotateCcw => (rot(Vec3::z(), -s), Vec3::zeros()),
            BasicMotion::OrbitCw | BasicMotion::OrbitCcw => {
                let phi = if motion == BasicMotion::OrbitCw { s } else { -s };
                let orientation = rot(Vec3::y(), -phi);
                let target = Vec3::new(0.0, 0.0, radius);
                (orientation, target - radius * (orientation * Vec3::z()))
            }
        };
        if j == 0 {
            Pose::identity()
        } else {
            Pose::from_center(orientation, center).expect("generated orientation is a rotation")
        }
    });
    Trajectory::from_poses(poses)
}
