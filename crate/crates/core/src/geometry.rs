//! Rigid poses, the pinhole camera, and point transforms.
//!
//! Poses are camera-from-world everywhere: `pose.transform_point(p_world)`
//! yields camera coordinates. Cameras look down `+z`, `u` grows rightward
//! and `v` grows downward.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used to accept a matrix as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point is behind or on the camera plane (depth {0})")]
    NonPositiveDepth(f64),
    #[error("matrix is not a proper rotation (max deviation {0:e})")]
    NotARotation(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// A rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = GeometryError;

    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        let m = Mat3::from_fn(|i, j| r.rotation[i][j]);
        Pose::new(m, Vec3::from(r.translation))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let r = &p.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

fn rotation_deviation(m: &Mat3) -> f64 {
    let gram = m.transpose() * m - Mat3::identity();
    let det = (m.determinant() - 1.0).abs();
    gram.amax().max(det)
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let dev = rotation_deviation(&rotation);
        if dev > ROTATION_TOLERANCE {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Like [`Pose::new`] but snaps a nearly-orthonormal matrix onto SO(3)
    /// when its deviation is below `tolerance`. Used for text formats that
    /// store rotations with limited precision.
    pub fn new_snapped(rotation: Mat3, translation: Vec3, tolerance: f64) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let dev = rotation_deviation(&rotation);
        if dev <= ROTATION_TOLERANCE {
            return Ok(Pose {
                rotation,
                translation,
            });
        }
        if dev > tolerance {
            return Err(GeometryError::NotARotation(dev));
        }
        let svd = rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut flip = Mat3::identity();
            flip[(2, 2)] = -1.0;
            r = u * flip * vt;
        }
        Pose::new(r, translation)
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` (right-hand rule), then `translation`.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rotation = if axis.norm() == 0.0 || angle == 0.0 {
            Mat3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
        };
        Pose {
            rotation,
            translation,
        }
    }

    /// Builds the camera-from-world pose of a camera whose body orientation
    /// (world-from-camera rotation) is `orientation` and whose optical
    /// center sits at `center` in world coordinates.
    pub fn from_center(orientation: Mat3, center: Vec3) -> Result<Self, GeometryError> {
        let r = orientation.transpose();
        Pose::new(r, -(r * center))
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Returns the transform applying `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Optical center in world coordinates, for a camera-from-world pose.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Rotation angle in radians recovered from the trace, clamped to `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        trace_angle(&self.rotation)
    }

    pub fn with_translation(&self, translation: Vec3) -> Pose {
        Pose {
            rotation: self.rotation,
            translation,
        }
    }

    /// Max absolute entry-wise difference of the 3x4 matrices.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

/// Rotation angle of `r`, equal to `acos((tr(R) - 1) / 2)` for a proper
/// rotation. Evaluated as `atan2(sin, cos)` with the sine taken from the skew
/// part, which stays accurate near 0 where `acos` loses half the digits.
pub fn trace_angle(r: &Mat3) -> f64 {
    let sin = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    let cos = (r.trace() - 1.0) / 2.0;
    sin.atan2(cos.clamp(-1.0, 1.0))
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr", into = "IntrinsicsRepr")]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl TryFrom<IntrinsicsRepr> for Intrinsics {
    type Error = GeometryError;

    fn try_from(r: IntrinsicsRepr) -> Result<Self, Self::Error> {
        Intrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<Intrinsics> for IntrinsicsRepr {
    fn from(k: Intrinsics) -> Self {
        IntrinsicsRepr {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        if ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics("empty image".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        Intrinsics::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    /// The same camera at `factor`-times-coarser resolution.
    pub fn downscaled(&self, factor: usize) -> Result<Self, GeometryError> {
        let f = factor as f64;
        Intrinsics::new(
            self.fx / f,
            self.fy / f,
            self.cx / f,
            self.cy / f,
            self.width / factor,
            self.height / factor,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

pub fn project_point(k: &Intrinsics, p_cam: &Point3) -> Result<Projection, GeometryError> {
    if !(p_cam.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p_cam.z));
    }
    Ok(Projection {
        u: k.fx * p_cam.x / p_cam.z + k.cx,
        v: k.fy * p_cam.y / p_cam.z + k.cy,
        depth: p_cam.z,
    })
}

pub fn unproject_pixel(k: &Intrinsics, u: f64, v: f64, depth: f64) -> Result<Point3, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Point3::new(
        (u - k.cx) * depth / k.fx,
        (v - k.cy) * depth / k.fy,
        depth,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.0f64..3.0,
            prop::array::uniform3(-5.0f64..5.0),
        )
            .prop_filter_map("degenerate axis", |(a, angle, t)| {
                let axis = Vec3::from(a);
                (axis.norm() > 1e-3).then(|| Pose::from_axis_angle(axis, angle, Vec3::from(t)))
            })
    }

    #[test]
    fn compose_identity_and_inverse() {
        let p = Pose::from_axis_angle(Vec3::new(0.3, -0.2, 1.0), 0.7, Vec3::new(1.0, 2.0, -3.0));
        assert!(Pose::identity().compose(&p).max_abs_diff(&p) < 1e-12);
        assert!(p.compose(&p.inverse()).max_abs_diff(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn pure_translations_add() {
        let a = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let b = Pose::from_translation(Vec3::new(0.0, 2.0, 0.0));
        assert_eq!(*a.compose(&b).translation(), Vec3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(Pose::identity().inverse(), Pose::identity());
        let t = Pose::from_translation(Vec3::new(1.0, 2.0, 3.0)).inverse();
        assert_eq!(*t.translation(), Vec3::new(-1.0, -2.0, -3.0));
        assert_eq!(*t.rotation(), Mat3::identity());

        // 90 degrees about z with t = (1,0,0): R^T t = (0,-1,0), so the
        // inverse translation is (0,1,0).
        let p = Pose::from_axis_angle(Vec3::z(), FRAC_PI_2, Vec3::new(1.0, 0.0, 0.0));
        let inv = p.inverse();
        assert!((inv.translation() - Vec3::new(0.0, 1.0, 0.0)).amax() < 1e-12);
        assert!(p.compose(&inv).max_abs_diff(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn rejects_non_rotation() {
        let mut m = Mat3::identity();
        m[(0, 0)] = 1.1;
        assert!(matches!(Pose::new(m, Vec3::zeros()), Err(GeometryError::NotARotation(_))));
        let mut reflect = Mat3::identity();
        reflect[(2, 2)] = -1.0;
        assert!(Pose::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn snapping_recovers_rotation() {
        let p = Pose::from_axis_angle(Vec3::new(1.0, 1.0, 0.0), 0.4, Vec3::zeros());
        let noisy = p.rotation() + Mat3::from_element(2e-6);
        let snapped = Pose::new_snapped(noisy, Vec3::zeros(), 1e-3).unwrap();
        assert!(snapped.max_abs_diff(&p) < 1e-5);
    }

    #[test]
    fn projection_examples() {
        let on_axis = project_point(&k(), &Point3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((on_axis.u, on_axis.v, on_axis.depth), (32.0, 24.0, 2.0));
        let off = project_point(&k(), &Point3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!((off.u, off.v, off.depth), (82.0, 24.0, 2.0));
        assert!(matches!(
            project_point(&k(), &Point3::origin()),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn unprojection_examples() {
        assert_eq!(unproject_pixel(&k(), 32.0, 24.0, 2.0).unwrap(), Point3::new(0.0, 0.0, 2.0));
        assert_eq!(unproject_pixel(&k(), 82.0, 24.0, 2.0).unwrap(), Point3::new(1.0, 0.0, 2.0));
        assert!(unproject_pixel(&k(), 1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 0.0, 3.9, 4, 4).is_ok());
    }

    #[test]
    fn pose_json_round_trip() {
        let p = Pose::from_axis_angle(Vec3::y(), 0.3, Vec3::new(0.1, 0.2, 0.3));
        let s = serde_json::to_string(&p).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert!(back.max_abs_diff(&p) < 1e-15);
        assert!(serde_json::from_str::<Pose>(r#"{"rotation":[[2,0,0],[0,1,0],[0,0,1]],"translation":[0,0,0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn project_unproject_round_trip(u in -50.0f64..120.0, v in -50.0f64..100.0, d in 0.01f64..100.0) {
            let p = unproject_pixel(&k(), u, v, d).unwrap();
            let back = project_point(&k(), &p).unwrap();
            prop_assert!((back.u - u).abs() < 1e-6);
            prop_assert!((back.v - v).abs() < 1e-6);
            prop_assert!((back.depth - d).abs() < 1e-6);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.max_abs_diff(&right) < 1e-6);
            prop_assert!(a.compose(&Pose::identity()).max_abs_diff(&a) < 1e-12);
            prop_assert!(a.compose(&a.inverse()).max_abs_diff(&Pose::identity()) < 1e-6);
        }

        #[test]
        fn transforms_are_isometries(p in arb_pose(), a in prop::array::uniform3(-10.0f64..10.0), b in prop::array::uniform3(-10.0f64..10.0)) {
            let (a, b) = (Point3::from(a), Point3::from(b));
            let d0 = (a - b).norm();
            let d1 = (p.transform_point(&a) - p.transform_point(&b)).norm();
            prop_assert!((d0 - d1).abs() < 1e-6);
        }
    }
}
