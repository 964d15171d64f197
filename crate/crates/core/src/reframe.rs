//! Latent reframing: decode the clean-latent estimate, lift every frame to
//! its own world-space point cloud, splat the clouds from the target
//! cameras with a z-buffer and encode the result back to latent space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Point3, Pose};
use crate::scheduler::{estimate_x0, Denoiser, Level, NoiseSchedule, SchedulerError};
use crate::video::{LatentShape, LatentVideo, OcclusionMask, PixelVideo, VideoError};

/// Points closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ReframeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected {expected} target poses, got {found}")]
    PoseCountMismatch { expected: usize, found: usize },
    #[error("mask of {height}x{width} is not divisible by factor {factor}")]
    NonDivisibleFactor { height: usize, width: usize, factor: usize },
    #[error("splat radius must be at least 0.5 pixels, got {0}")]
    InvalidSplatRadius(f64),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

/// Whether frame `j` is rendered from its own points only or from the union
/// of every frame's points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    #[default]
    TimeAware,
    TimeStatic,
}

impl std::str::FromStr for RenderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "time-aware" => Ok(RenderMode::TimeAware),
            "time-static" => Ok(RenderMode::TimeStatic),
            _ => Err(format!("unknown mode {s:?}, expected time-aware or time-static")),
        }
    }
}

/// Per-frame world-space point maps with a validity flag per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMaps {
    frames: usize,
    height: usize,
    width: usize,
    points: Vec<Point3>,
    validity: Vec<u8>,
}

impl PointMaps {
    pub fn new(frames: usize, height: usize, width: usize, points: Vec<Point3>, validity: Vec<u8>) -> Result<Self, ReframeError> {
        let n = frames * height * width;
        if points.len() != n || validity.len() != n {
            return Err(ReframeError::ShapeMismatch(format!(
                "point maps of {frames}x{height}x{width} need {n} entries, got {} points and {} flags",
                points.len(),
                validity.len()
            )));
        }
        if validity.iter().any(|&v| v > 1) {
            return Err(ReframeError::ShapeMismatch("validity flags must be 0 or 1".into()));
        }
        Ok(PointMaps {
            frames,
            height,
            width,
            points,
            validity,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn validity(&self) -> &[u8] {
        &self.validity
    }

    pub fn frame_points(&self, f: usize) -> &[Point3] {
        let n = self.height * self.width;
        &self.points[f * n..(f + 1) * n]
    }

    pub fn with_validity(mut self, validity: Vec<u8>) -> Result<Self, ReframeError> {
        if validity.len() != self.validity.len() {
            return Err(ReframeError::ShapeMismatch("validity length".into()));
        }
        self.validity = validity;
        PointMaps::new(self.frames, self.height, self.width, self.points, self.validity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Point3,
    pub color: [f64; 3],
    /// `(u, v)` of the pixel the point was lifted from.
    pub source_pixel: (usize, usize),
}

/// One colored point set per source frame, all in the shared world frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeAwarePointCloud {
    frames: Vec<Vec<CloudPoint>>,
}

impl TimeAwarePointCloud {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, f: usize) -> &[CloudPoint] {
        &self.frames[f]
    }

    pub fn len(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn empty(frame_count: usize) -> Self {
        TimeAwarePointCloud {
            frames: vec![Vec::new(); frame_count],
        }
    }
}

pub fn lift_frames(video: &PixelVideo, pointmaps: &PointMaps) -> Result<TimeAwarePointCloud, ReframeError> {
    if (video.frames(), video.height(), video.width()) != (pointmaps.frames, pointmaps.height, pointmaps.width) {
        return Err(ReframeError::ShapeMismatch(format!(
            "video {}x{}x{} vs point maps {}x{}x{}",
            video.frames(),
            video.height(),
            video.width(),
            pointmaps.frames,
            pointmaps.height,
            pointmaps.width
        )));
    }
    let (h, w) = (pointmaps.height, pointmaps.width);
    let frames = (0..pointmaps.frames)
        .map(|f| {
            let mut pts = Vec::new();
            for v in 0..h {
                for u in 0..w {
                    let i = (f * h + v) * w + u;
                    if pointmaps.validity[i] == 1 {
                        pts.push(CloudPoint {
                            position: pointmaps.points[i],
                            color: video.pixel(f, v, u),
                            source_pixel: (u, v),
                        });
                    }
                }
            }
            pts
        })
        .collect();
    Ok(TimeAwarePointCloud { frames })
}

/// Z-buffer entry ordered by depth, then source frame, then row-major
/// source pixel, which makes the fill order irrelevant.
#[derive(Clone, Copy)]
struct Fragment {
    depth: f64,
    frame: usize,
    source: usize,
    color: [f64; 3],
}

impl Fragment {
    fn beats(&self, other: &Fragment) -> bool {
        (self.depth, self.frame, self.source) < (other.depth, other.frame, other.source)
    }
}

/// Splats the cloud from each target camera.
///
/// Every point covers the pixels whose centers lie within a square of
/// half-width `splat_radius - 0.5` around its projection, so radius 1 is a
/// one-pixel splat. The nearest fragment wins.
pub fn render_cloud(
    cloud: &TimeAwarePointCloud,
    target_poses: &[Pose],
    intrinsics: &Intrinsics,
    mode: RenderMode,
    splat_radius: f64,
) -> Result<(PixelVideo, OcclusionMask), ReframeError> {
    let frames = cloud.frame_count();
    if target_poses.len() != frames {
        return Err(ReframeError::PoseCountMismatch {
            expected: frames,
            found: target_poses.len(),
        });
    }
    if !(splat_radius >= 0.5) || !splat_radius.is_finite() {
        return Err(ReframeError::InvalidSplatRadius(splat_radius));
    }
    let (h, w) = (intrinsics.height, intrinsics.width);
    let half = splat_radius - 0.5;
    let src_width = intrinsics.width;

    let buffers: Vec<Vec<Option<Fragment>>> = (0..frames)
        .into_par_iter()
        .map(|j| {
            let pose = &target_poses[j];
            let mut zbuf: Vec<Option<Fragment>> = vec![None; h * w];
            let sources: Vec<usize> = match mode {
                RenderMode::TimeAware => vec![j],
                RenderMode::TimeStatic => (0..frames).collect(),
            };
            for f in sources {
                for p in &cloud.frames[f] {
                    let pc = pose.transform_point(&p.position);
                    if !(pc.z > NEAR_PLANE) {
                        continue;
                    }
                    let u = intrinsics.fx * pc.x / pc.z + intrinsics.cx;
                    let v = intrinsics.fy * pc.y / pc.z + intrinsics.cy;
                    if !u.is_finite() || !v.is_finite() {
                        continue;
                    }
                    let (x0, x1) = ((u - half).ceil(), (u + half).floor());
                    let (y0, y1) = ((v - half).ceil(), (v + half).floor());
                    if x1 < 0.0 || y1 < 0.0 || x0 > (w - 1) as f64 || y0 > (h - 1) as f64 {
                        continue;
                    }
                    let frag = Fragment {
                        depth: pc.z,
                        frame: f,
                        source: p.source_pixel.1 * src_width + p.source_pixel.0,
                        color: p.color,
                    };
                    let (x0, x1) = (x0.max(0.0) as usize, x1.min((w - 1) as f64) as usize);
                    let (y0, y1) = (y0.max(0.0) as usize, y1.min((h - 1) as f64) as usize);
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            let slot = &mut zbuf[y * w + x];
                            if slot.as_ref().is_none_or(|cur| frag.beats(cur)) {
                                *slot = Some(frag);
                            }
                        }
                    }
                }
            }
            zbuf
        })
        .collect();

    let mut video = PixelVideo::zeros(frames, h, w);
    let mut mask = OcclusionMask::filled(frames, h, w, false);
    for (j, zbuf) in buffers.iter().enumerate() {
        for (i, frag) in zbuf.iter().enumerate() {
            if let Some(frag) = frag {
                let (y, x) = (i / w, i % w);
                video.set_pixel(j, y, x, frag.color);
                mask.set(j, y, x, true);
            }
        }
    }
    Ok((video, mask))
}

/// A latent cell is known only if every pixel it covers is known.
pub fn downsample_mask(mask: &OcclusionMask, factor: usize) -> Result<OcclusionMask, ReframeError> {
    let (h, w) = (mask.height(), mask.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(ReframeError::NonDivisibleFactor {
            height: h,
            width: w,
            factor,
        });
    }
    let (lh, lw) = (h / factor, w / factor);
    let mut out = OcclusionMask::filled(mask.frames(), lh, lw, false);
    for f in 0..mask.frames() {
        for y in 0..lh {
            for x in 0..lw {
                let known = (0..factor)
                    .all(|dy| (0..factor).all(|dx| mask.is_known(f, y * factor + dy, x * factor + dx)));
                out.set(f, y, x, known);
            }
        }
    }
    Ok(out)
}

/// Maps between pixel and latent space.
pub trait Codec {
    fn encode(&self, video: &PixelVideo) -> Result<LatentVideo, ReframeError>;
    /// Decoded values are clamped to `[0, 1]`.
    fn decode(&self, latent: &LatentVideo) -> Result<PixelVideo, ReframeError>;
    fn spatial_factor(&self) -> usize;

    fn latent_shape(&self, frames: usize, height: usize, width: usize) -> LatentShape {
        let k = self.spatial_factor();
        LatentShape::new(frames, PixelVideo::CHANNELS, height / k, width / k)
    }
}

/// Latent = pixels, three channels, factor 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, video: &PixelVideo) -> Result<LatentVideo, ReframeError> {
        let shape = LatentShape::new(video.frames(), PixelVideo::CHANNELS, video.height(), video.width());
        Ok(LatentVideo::from_vec(shape, video.data().to_vec())?)
    }

    fn decode(&self, latent: &LatentVideo) -> Result<PixelVideo, ReframeError> {
        let s = latent.shape();
        if s.channels != PixelVideo::CHANNELS {
            return Err(ReframeError::ShapeMismatch(format!("identity codec needs 3 channels, got {}", s.channels)));
        }
        Ok(PixelVideo::from_vec_clamped(s.frames, s.height, s.width, latent.data().to_vec())?)
    }

    fn spatial_factor(&self) -> usize {
        1
    }
}

/// Average-pool encoder with a nearest-neighbour decoder.
#[derive(Debug, Clone, Copy)]
pub struct PoolingCodec {
    factor: usize,
}

impl PoolingCodec {
    pub fn new(factor: usize) -> Self {
        assert!(factor > 0, "pooling factor must be positive");
        PoolingCodec { factor }
    }
}

impl Default for PoolingCodec {
    fn default() -> Self {
        PoolingCodec::new(4)
    }
}

impl Codec for PoolingCodec {
    fn encode(&self, video: &PixelVideo) -> Result<LatentVideo, ReframeError> {
        let k = self.factor;
        let (h, w) = (video.height(), video.width());
        if h % k != 0 || w % k != 0 {
            return Err(ReframeError::NonDivisibleFactor {
                height: h,
                width: w,
                factor: k,
            });
        }
        let shape = self.latent_shape(video.frames(), h, w);
        let norm = (k * k) as f64;
        Ok(LatentVideo::from_fn(shape, |f, c, y, x| {
            let mut acc = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    acc += video.data()[video.index(f, c, y * k + dy, x * k + dx)];
                }
            }
            acc / norm
        }))
    }

    fn decode(&self, latent: &LatentVideo) -> Result<PixelVideo, ReframeError> {
        let s = latent.shape();
        if s.channels != PixelVideo::CHANNELS {
            return Err(ReframeError::ShapeMismatch(format!("pooling codec needs 3 channels, got {}", s.channels)));
        }
        let k = self.factor;
        let (h, w) = (s.height * k, s.width * k);
        let mut data = Vec::with_capacity(s.frames * 3 * h * w);
        for f in 0..s.frames {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data.push(latent.get(f, c, y / k, x / k));
                    }
                }
            }
        }
        Ok(PixelVideo::from_vec_clamped(s.frames, h, w, data)?)
    }

    fn spatial_factor(&self) -> usize {
        self.factor
    }
}

/// Scene geometry and cameras used to reframe one video.
#[derive(Debug, Clone, Copy)]
pub struct ReframeScene<'a> {
    pub pointmaps: &'a PointMaps,
    pub source_poses: &'a [Pose],
    pub target_poses: &'a [Pose],
    pub intrinsics: &'a Intrinsics,
    pub mode: RenderMode,
    pub splat_radius: f64,
}

#[derive(Debug, Clone)]
pub struct ReframeOutput {
    /// Clean-latent estimate the reframing started from.
    pub z0_estimate: LatentVideo,
    pub z0_reframed: LatentVideo,
    pub latent_mask: OcclusionMask,
    pub x0_reframed: PixelVideo,
    pub pixel_mask: OcclusionMask,
}

/// Estimates `z0` from `z_t`, decodes, lifts, renders from the target poses
/// and re-encodes. At [`Level::Clean`] the latent is used as is and the
/// denoiser is not called.
pub fn reframe_latent<D: Denoiser, C: Codec + ?Sized>(
    z_t: &LatentVideo,
    level: Level,
    denoiser: &mut D,
    codec: &C,
    scene: &ReframeScene<'_>,
    sched: &NoiseSchedule,
) -> Result<ReframeOutput, ReframeError> {
    let frames = z_t.shape().frames;
    if scene.source_poses.len() != frames {
        return Err(ReframeError::PoseCountMismatch {
            expected: frames,
            found: scene.source_poses.len(),
        });
    }
    if (scene.intrinsics.height, scene.intrinsics.width) != (scene.pointmaps.height, scene.pointmaps.width) {
        return Err(ReframeError::ShapeMismatch("intrinsics and point maps disagree on image size".into()));
    }
    let z0_estimate = match level {
        Level::Clean => z_t.clone(),
        Level::Train(t) => {
            let eps = denoiser.predict_noise(z_t, t, None)?;
            estimate_x0(z_t, &eps, level, sched)?
        }
    };
    let x0 = codec.decode(&z0_estimate)?;
    let cloud = lift_frames(&x0, scene.pointmaps)?;
    let (x0_reframed, pixel_mask) = render_cloud(&cloud, scene.target_poses, scene.intrinsics, scene.mode, scene.splat_radius)?;
    let z0_reframed = codec.encode(&x0_reframed)?;
    let latent_mask = downsample_mask(&pixel_mask, codec.spatial_factor())?;
    Ok(ReframeOutput {
        z0_estimate,
        z0_reframed,
        latent_mask,
        x0_reframed,
        pixel_mask,
    })
}
