//! Procedural scenes with exact ground truth.
//!
//! A scene is a fronto-parallel background plane `z = d_bg` (world frame)
//! plus, for dynamic scenes, a few spheres moving linearly. Images are ray
//! cast analytically, so depth, point maps and colors are exact. Textures
//! are smooth products of sinusoids, low-frequency enough that nearest
//! splatting reproduces them closely.
//!
//! Every random draw comes from [`SplitMix64`] streams of the scene seed:
//! stream 0 for the background, stream `1 + k` for mover `k`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::EdgeObservation;
use crate::geometry::{Intrinsics, Point3, Pose, Vec3};
use crate::reframe::{PointMaps, ReframeError, NEAR_PLANE};
use crate::rng::SplitMix64;
use crate::trajectory::{Trajectory, TrajectoryError};
use crate::video::PixelVideo;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("frame {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("{0}")]
    Inconsistent(String),
    #[error(transparent)]
    Reframe(#[from] ReframeError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    #[default]
    Static,
    Dynamic,
}

impl std::str::FromStr for SceneKind {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(SceneKind::Static),
            "dynamic" => Ok(SceneKind::Dynamic),
            other => Err(SceneError::InvalidSpec(format!("unknown scene kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            kind: SceneKind::Static,
            frames: 16,
            width: 64,
            height: 48,
            seed: 0,
        }
    }
}

/// `0.5 + a·sin(fx·x + px)·sin(fy·y + py) + b·sin(k·(x, y) + pk)` per channel,
/// in surface coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    channels: [[f64; 8]; 3],
}

impl Texture {
    fn random(rng: &mut SplitMix64, freq: (f64, f64)) -> Self {
        let mut channels = [[0.0; 8]; 3];
        for ch in channels.iter_mut() {
            *ch = [
                rng.uniform(0.12, 0.2),
                rng.uniform(freq.0, freq.1),
                rng.uniform(freq.0, freq.1),
                rng.uniform(0.0, std::f64::consts::TAU),
                rng.uniform(0.0, std::f64::consts::TAU),
                rng.uniform(0.05, 0.12),
                rng.uniform(-freq.1, freq.1),
                rng.uniform(0.0, std::f64::consts::TAU),
            ];
        }
        Texture { channels }
    }

    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        self.channels.map(|[a, fx, fy, px, py, b, k, pk]| {
            let v = 0.5 + a * (fx * x + px).sin() * (fy * y + py).sin() + b * (k * x + 0.7 * k * y + pk).sin();
            v.clamp(0.0, 1.0)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Point3,
    /// World displacement per frame.
    pub velocity: Vec3,
    pub radius: f64,
    pub texture: Texture,
}

impl Sphere {
    pub fn center_at(&self, frame: usize) -> Point3 {
        self.center + self.velocity * frame as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub spec: SceneSpec,
    pub background_depth: f64,
    pub background: Texture,
    pub movers: Vec<Sphere>,
}

impl SceneModel {
    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    /// Default camera: focal length equal to the image width, centered.
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.spec.width as f64, self.spec.width, self.spec.height).expect("validated spec")
    }
}

pub fn make_scene(spec: &SceneSpec) -> Result<SceneModel, SceneError> {
    if spec.frames < 2 {
        return Err(SceneError::InvalidSpec(format!("need at least 2 frames, got {}", spec.frames)));
    }
    if spec.width < 8 || spec.height < 8 {
        return Err(SceneError::InvalidSpec(format!("resolution {}x{} below 8x8", spec.width, spec.height)));
    }
    let mut bg_rng = SplitMix64::stream(spec.seed, 0);
    let background_depth = bg_rng.uniform(3.5, 4.5);
    let background = Texture::random(&mut bg_rng, (0.8, 1.6));
    let movers = match spec.kind {
        SceneKind::Static => Vec::new(),
        SceneKind::Dynamic => (0..2)
            .map(|k| {
                let mut rng = SplitMix64::stream(spec.seed, 1 + k as u64);
                let side = if k == 0 { -1.0 } else { 1.0 };
                let z = rng.uniform(2.2, 2.8);
                let center = Point3::new(side * rng.uniform(0.3, 0.5), rng.uniform(-0.25, 0.25), z);
                let speed = rng.uniform(0.6, 0.9) / spec.frames as f64;
                let velocity = Vec3::new(-side * speed, rng.uniform(-0.2, 0.2) * speed, 0.0);
                Sphere {
                    center,
                    velocity,
                    radius: rng.uniform(0.25, 0.35),
                    texture: Texture::random(&mut rng, (2.0, 4.0)),
                }
            })
            .collect(),
    };
    Ok(SceneModel {
        spec: spec.clone(),
        background_depth,
        background,
        movers,
    })
}

/// One ray-cast view. Invalid pixels have zero color, depth and point.
#[derive(Debug, Clone, PartialEq)]
pub struct GtFrame {
    pub image: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub points: Vec<Point3>,
    pub validity: Vec<u8>,
}

fn cast(scene: &SceneModel, frame: usize, origin: &Vec3, dir: &Vec3) -> Option<(f64, Point3, [f64; 3])> {
    let mut best: Option<(f64, Point3, [f64; 3])> = None;
    let mut consider = |lambda: f64, point: Point3, color: [f64; 3]| {
        if lambda > NEAR_PLANE && best.as_ref().is_none_or(|b| lambda < b.0) {
            best = Some((lambda, point, color));
        }
    };
    if dir.z.abs() > 1e-12 {
        let lambda = (scene.background_depth - origin.z) / dir.z;
        let p = Point3::from(origin + dir * lambda);
        consider(lambda, p, scene.background.color(p.x, p.y));
    }
    for s in &scene.movers {
        let c = s.center_at(frame).coords;
        let oc = origin - c;
        let a = dir.norm_squared();
        let b = oc.dot(dir);
        let disc = b * b - a * (oc.norm_squared() - s.radius * s.radius);
        if disc < 0.0 {
            continue;
        }
        let root = disc.sqrt();
        for lambda in [(-b - root) / a, (-b + root) / a] {
            if lambda > NEAR_PLANE {
                let p = Point3::from(origin + dir * lambda);
                let local = p.coords - c;
                consider(lambda, p, s.texture.color(local.x + 0.5 * local.z, local.y - 0.5 * local.z));
                break;
            }
        }
    }
    best
}

/// Ray casts `frame` of the scene from a camera-from-world `pose`.
/// Rays are `K⁻¹(u, v, 1)` in camera coordinates, so the ray parameter is
/// the camera-space depth.
pub fn render_gt(scene: &SceneModel, pose: &Pose, intrinsics: &Intrinsics, frame: usize) -> Result<GtFrame, SceneError> {
    if frame >= scene.frames() {
        return Err(SceneError::FrameOutOfRange {
            index: frame,
            frames: scene.frames(),
        });
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let origin = pose.camera_center();
    let rt = pose.rotation().transpose();
    let pixels: Vec<Option<(f64, Point3, [f64; 3])>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            let d_cam = Vec3::new((u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0);
            cast(scene, frame, &origin, &(rt * d_cam))
        })
        .collect();
    let mut out = GtFrame {
        image: vec![[0.0; 3]; w * h],
        depth: vec![0.0; w * h],
        points: vec![Point3::origin(); w * h],
        validity: vec![0; w * h],
    };
    for (i, hit) in pixels.into_iter().enumerate() {
        if let Some((depth, point, color)) = hit {
            out.image[i] = color;
            out.depth[i] = depth;
            out.points[i] = point;
            out.validity[i] = 1;
        }
    }
    Ok(out)
}

/// Ground truth for a whole camera path.
#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    pub frames: PixelVideo,
    /// `F × H × W` camera-space depths.
    pub depth: Vec<f64>,
    /// World points with validity.
    pub pointmaps: PointMaps,
    pub source_poses: Trajectory,
    pub intrinsics: Intrinsics,
}

impl GroundTruthBundle {
    pub fn frame_depth(&self, f: usize) -> &[f64] {
        let n = self.intrinsics.width * self.intrinsics.height;
        &self.depth[f * n..(f + 1) * n]
    }
}

/// Renders frame `j` from `poses[j]` for every frame.
pub fn render_bundle(scene: &SceneModel, poses: &Trajectory, intrinsics: &Intrinsics) -> Result<GroundTruthBundle, SceneError> {
    let frames = scene.frames();
    if poses.len() != frames {
        return Err(SceneError::Inconsistent(format!("{} poses for {frames} frames", poses.len())));
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut video = PixelVideo::zeros(frames, h, w);
    let (mut depth, mut points, mut validity) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..frames {
        let gt = render_gt(scene, poses.pose(j), intrinsics, j)?;
        for (i, c) in gt.image.iter().enumerate() {
            video.set_pixel(j, i / w, i % w, *c);
        }
        depth.extend(gt.depth);
        points.extend(gt.points);
        validity.extend(gt.validity);
    }
    Ok(GroundTruthBundle {
        frames: video,
        depth,
        pointmaps: PointMaps::new(frames, h, w, points, validity)?,
        source_poses: poses.clone(),
        intrinsics: *intrinsics,
    })
}

/// Source camera path: identity cameras.
pub fn default_source_poses(frames: usize) -> Trajectory {
    Trajectory::from_poses(vec![Pose::identity(); frames]).expect("non-empty")
}

/// Scene, default intrinsics and default source path in one call.
pub fn synthesize(spec: &SceneSpec) -> Result<(SceneModel, GroundTruthBundle), SceneError> {
    let scene = make_scene(spec)?;
    let bundle = render_bundle(&scene, &default_source_poses(spec.frames), &scene.intrinsics())?;
    Ok((scene, bundle))
}

/// `1 / (1 + |∇depth|)` with central differences (one-sided at borders);
/// zero on invalid pixels.
pub fn depth_confidence(depth: &[f64], validity: &[u8], width: usize, height: usize) -> Vec<f64> {
    let at = |x: usize, y: usize| depth[y * width + x];
    let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / span.max(1) as f64;
    (0..width * height)
        .map(|i| {
            if validity[i] == 0 {
                return 0.0;
            }
            let (x, y) = (i % width, i / width);
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(width - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(height - 1));
            let gx = diff(at(x0, y), at(x1, y), x1 - x0);
            let gy = diff(at(x, y0), at(x, y1), y1 - y0);
            1.0 / (1.0 + (gx * gx + gy * gy).sqrt())
        })
        .collect()
}

/// For each edge `(n, m)`: the ground-truth point maps of frames `n` and `m`
/// expressed in camera `n` and perturbed by Gaussian noise of std
/// `noise_sigma` (stream `e` of `seed` for edge index `e`).
pub fn emit_edge_observations(
    bundle: &GroundTruthBundle,
    edges: &[(usize, usize)],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<EdgeObservation>, SceneError> {
    let frames = bundle.pointmaps.frames();
    let (w, h) = (bundle.intrinsics.width, bundle.intrinsics.height);
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(SceneError::InvalidSpec(format!("noise sigma {noise_sigma}")));
    }
    let confidences: Vec<Vec<f64>> = (0..frames)
        .map(|f| {
            let n = w * h;
            depth_confidence(bundle.frame_depth(f), &bundle.pointmaps.validity()[f * n..(f + 1) * n], w, h)
        })
        .collect();
    edges
        .iter()
        .enumerate()
        .map(|(ei, &(n, m))| {
            if n >= frames || m >= frames || n == m {
                return Err(SceneError::Inconsistent(format!("edge ({n}, {m}) invalid for {frames} frames")));
            }
            let cam = bundle.source_poses.pose(n);
            let mut rng = SplitMix64::stream(seed, ei as u64);
            let mut view = |f: usize| -> Vec<Point3> {
                bundle
                    .pointmaps
                    .frame_points(f)
                    .iter()
                    .map(|p| {
                        let q = cam.transform_point(p);
                        if noise_sigma == 0.0 {
                            return q;
                        }
                        let noise = Vec3::new(rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian());
                        q + noise * noise_sigma
                    })
                    .collect()
            };
            let (pr, ps) = (view(n), view(m));
            EdgeObservation::new(n, m, h, w, pr, ps, confidences[n].clone(), confidences[m].clone())
                .map_err(|e| SceneError::Inconsistent(e.to_string()))
        })
        .collect()
}

/// Multiplies both point maps of edge `e` by `factors[e]`; the scale that
/// explains the rescaled edge is then `1 / factors[e]`.
pub fn rescale_edges(observations: &mut [EdgeObservation], factors: &[f64]) -> Result<(), SceneError> {
    if observations.len() != factors.len() {
        return Err(SceneError::Inconsistent(format!("{} factors for {} edges", factors.len(), observations.len())));
    }
    for (e, &k) in observations.iter_mut().zip(factors) {
        if !(k > 0.0 && k.is_finite()) {
            return Err(SceneError::InvalidSpec(format!("scale factor {k}")));
        }
        for p in e.pointmap_ref.iter_mut().chain(e.pointmap_src.iter_mut()) {
            p.coords *= k;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unproject_pixel;
    use crate::metrics::psnr;
    use crate::reframe::{lift_frames, render_cloud, RenderMode};

    fn spec(kind: SceneKind) -> SceneSpec {
        SceneSpec {
            kind,
            frames: 4,
            width: 32,
            height: 24,
            seed: 11,
        }
    }

    #[test]
    fn deterministic_and_static_has_no_movers() {
        let s = spec(SceneKind::Static);
        assert_eq!(make_scene(&s).unwrap(), make_scene(&s).unwrap());
        assert!(make_scene(&s).unwrap().movers.is_empty());
        assert!(!make_scene(&spec(SceneKind::Dynamic)).unwrap().movers.is_empty());
    }

    #[test]
    fn invalid_specs() {
        assert!(make_scene(&SceneSpec { frames: 1, ..spec(SceneKind::Static) }).is_err());
        assert!(make_scene(&SceneSpec { width: 7, ..spec(SceneKind::Static) }).is_err());
    }

    #[test]
    fn movers_advance_linearly() {
        let s = make_scene(&SceneSpec { frames: 16, ..spec(SceneKind::Dynamic) }).unwrap();
        for m in &s.movers {
            let d = m.center_at(15) - m.center_at(0);
            assert!((d - m.velocity * 15.0).norm() < 1e-12);
        }
    }

    #[test]
    fn background_depth_is_constant_for_axis_aligned_camera() {
        let s = make_scene(&spec(SceneKind::Static)).unwrap();
        let gt = render_gt(&s, &Pose::identity(), &s.intrinsics(), 0).unwrap();
        assert!(gt.validity.iter().all(|&v| v == 1));
        assert!(gt.depth.iter().all(|d| (d - s.background_depth).abs() < 1e-12));
        assert!(matches!(render_gt(&s, &Pose::identity(), &s.intrinsics(), 4), Err(SceneError::FrameOutOfRange { .. })));
    }

    #[test]
    fn pointmaps_match_unprojected_depth() {
        let s = make_scene(&spec(SceneKind::Dynamic)).unwrap();
        let k = s.intrinsics();
        let pose = Pose::from_axis_angle(Vec3::new(0.2, 1.0, 0.1), 0.15, Vec3::new(0.1, -0.05, 0.2));
        let gt = render_gt(&s, &pose, &k, 2).unwrap();
        let inv = pose.inverse();
        for i in 0..k.width * k.height {
            if gt.validity[i] == 0 {
                continue;
            }
            let cam = unproject_pixel(&k, (i % k.width) as f64, (i / k.width) as f64, gt.depth[i]).unwrap();
            assert!((inv.transform_point(&cam) - gt.points[i]).norm() < 1e-6);
        }
    }

    #[test]
    fn static_frames_identical_dynamic_frames_differ() {
        let (_, st) = synthesize(&spec(SceneKind::Static)).unwrap();
        assert_eq!(st.pointmaps.frame_points(0), st.pointmaps.frame_points(3));
        let (_, dy) = synthesize(&spec(SceneKind::Dynamic)).unwrap();
        assert_ne!(dy.pointmaps.frame_points(0), dy.pointmaps.frame_points(3));
    }

    #[test]
    fn rotated_view_reprojects_closely() {
        let s = make_scene(&SceneSpec { frames: 2, width: 64, height: 48, ..spec(SceneKind::Static) }).unwrap();
        let k = s.intrinsics();
        let bundle = render_bundle(&s, &default_source_poses(2), &k).unwrap();
        let target = Pose::from_axis_angle(Vec3::y(), 10f64.to_radians(), Vec3::zeros());
        let cloud = lift_frames(&bundle.frames, &bundle.pointmaps).unwrap();
        let (img, mask) = render_cloud(&cloud, &[target, target], &k, RenderMode::TimeAware, 1.0).unwrap();
        let gt = render_bundle(&s, &Trajectory::from_poses(vec![target, target]).unwrap(), &k).unwrap();
        assert!(psnr(&img, &gt.frames, Some(&mask)).unwrap().at_least(35.0));
    }

    #[test]
    fn exact_observations_are_consistent() {
        let (_, b) = synthesize(&spec(SceneKind::Static)).unwrap();
        let obs = emit_edge_observations(&b, &[(0, 1), (1, 0)], 0.0, 3).unwrap();
        assert_eq!(obs[0].pointmap_ref, obs[0].pointmap_src);
        assert!(obs[0].confidence_ref.iter().all(|c| *c > 0.0 && *c <= 1.0));
        let noisy = emit_edge_observations(&b, &[(0, 1)], 0.01, 3).unwrap();
        assert_eq!(noisy, emit_edge_observations(&b, &[(0, 1)], 0.01, 3).unwrap());
        assert_ne!(noisy[0].pointmap_ref, obs[0].pointmap_ref);
    }

    #[test]
    fn confidence_drops_at_depth_edges() {
        let depth = vec![1.0, 1.0, 5.0, 5.0];
        let c = depth_confidence(&depth, &[1; 4], 4, 1);
        assert_eq!(c[0], 1.0);
        assert!(c[1] < 0.5 && c[2] < 0.5);
    }
}
