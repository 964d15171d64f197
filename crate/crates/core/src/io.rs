//! On-disk formats.
//!
//! LRTF tensor container, all integers little-endian:
//!
//! ```text
//! "LRTF" | version u16 = 1 | dtype u8 (0 = f32, 1 = u8) | ndim u8
//!        | ndim × u32 dims | row-major payload | CRC32 (IEEE) of payload, u32
//! ```
//!
//! Also RealEstate10K trajectory text, binary PPM/PGM images, JSON, and the
//! directory layout of a ground-truth bundle.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{Intrinsics, Point3};
use crate::reframe::PointMaps;
use crate::synthscene::{GroundTruthBundle, SceneSpec};
use crate::trajectory::{parse_realestate, Trajectory, TrajectoryError};
use crate::video::{LatentShape, LatentVideo, OcclusionMask, PixelVideo};

pub const MAGIC: &[u8; 4] = b"LRTF";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic, not an LRTF file")]
    BadMagic,
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("file truncated")]
    TruncatedFile,
    #[error("{0} bytes after the checksum")]
    TrailingData(usize),
    #[error("tensor shape error: {0}")]
    Shape(String),
    #[error("image format error: {0}")]
    Image(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, IoError> {
        if dims.len() > u8::MAX as usize {
            return Err(IoError::Shape(format!("{} dimensions", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(IoError::Shape("dimension exceeds u32".into()));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(IoError::Shape(format!("dims {dims:?} hold {n} values, data has {}", data.len())));
        }
        Ok(Tensor { dims, data })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, IoError> {
        Tensor::new(dims, TensorData::F32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, IoError> {
        Tensor::new(dims, TensorData::U8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32], IoError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(IoError::Shape("expected an f32 tensor".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], IoError> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(IoError::Shape("expected a u8 tensor".into())),
        }
    }

    fn expect_rank(&self, rank: usize) -> Result<(), IoError> {
        if self.dims.len() != rank {
            return Err(IoError::Shape(format!("expected rank {rank}, got dims {:?}", self.dims)));
        }
        Ok(())
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let payload: Vec<u8> = match &t.data {
        TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        TensorData::U8(v) => v.clone(),
    };
    let mut out = Vec::with_capacity(12 + 4 * t.dims.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.data.dtype());
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).ok_or(IoError::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(IoError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, IoError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(IoError::BadMagic);
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let dtype = c.take(1)?[0];
    let width = match dtype {
        0 => 4,
        1 => 1,
        other => return Err(IoError::UnsupportedDtype(other)),
    };
    let ndim = c.take(1)?[0] as usize;
    let dims: Vec<usize> = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(IoError::TruncatedFile)?;
    let payload = c.take(count.checked_mul(width).ok_or(IoError::TruncatedFile)?)?;
    let stored = c.u32()?;
    if c.pos != bytes.len() {
        return Err(IoError::TrailingData(bytes.len() - c.pos));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(IoError::BadCrc { stored, computed });
    }
    let data = match dtype {
        0 => TensorData::F32(payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
        _ => TensorData::U8(payload.to_vec()),
    };
    Tensor::new(dims, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), IoError> {
    fs::write(path, encode_tensor(t)).map_err(file_err(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, IoError> {
    decode_tensor(&fs::read(path).map_err(file_err(path))?)
}

pub fn pixel_video_tensor(v: &PixelVideo) -> Tensor {
    Tensor::f32(vec![v.frames(), 3, v.height(), v.width()], v.data().iter().map(|&x| x as f32).collect()).expect("consistent dims")
}

pub fn pixel_video_from_tensor(t: &Tensor) -> Result<PixelVideo, IoError> {
    t.expect_rank(4)?;
    let d = t.dims();
    if d[1] != 3 {
        return Err(IoError::Shape(format!("pixel video needs 3 channels, dims {d:?}")));
    }
    let data = t.as_f32()?.iter().map(|&x| x as f64).collect();
    PixelVideo::from_vec_clamped(d[0], d[2], d[3], data).map_err(|e| IoError::Shape(e.to_string()))
}

pub fn latent_tensor(z: &LatentVideo) -> Tensor {
    let s = z.shape();
    Tensor::f32(vec![s.frames, s.channels, s.height, s.width], z.data().iter().map(|&x| x as f32).collect()).expect("consistent dims")
}

pub fn latent_from_tensor(t: &Tensor) -> Result<LatentVideo, IoError> {
    t.expect_rank(4)?;
    let d = t.dims();
    let data = t.as_f32()?.iter().map(|&x| x as f64).collect();
    LatentVideo::from_vec(LatentShape::new(d[0], d[1], d[2], d[3]), data).map_err(|e| IoError::Shape(e.to_string()))
}

pub fn mask_tensor(m: &OcclusionMask) -> Tensor {
    Tensor::u8(vec![m.frames(), m.height(), m.width()], m.data().to_vec()).expect("consistent dims")
}

pub fn mask_from_tensor(t: &Tensor) -> Result<OcclusionMask, IoError> {
    t.expect_rank(3)?;
    let d = t.dims();
    OcclusionMask::from_vec(d[0], d[1], d[2], t.as_u8()?.to_vec()).map_err(|e| IoError::Shape(e.to_string()))
}

/// Points as an `F × H × W × 3` f32 tensor; validity separately as u8.
pub fn pointmaps_tensors(p: &PointMaps) -> (Tensor, Tensor) {
    let dims = vec![p.frames(), p.height(), p.width()];
    let pts = p.points().iter().flat_map(|q| [q.x as f32, q.y as f32, q.z as f32]).collect();
    (
        Tensor::f32([dims.clone(), vec![3]].concat(), pts).expect("consistent dims"),
        Tensor::u8(dims, p.validity().to_vec()).expect("consistent dims"),
    )
}

pub fn pointmaps_from_tensors(points: &Tensor, validity: &Tensor) -> Result<PointMaps, IoError> {
    points.expect_rank(4)?;
    validity.expect_rank(3)?;
    let d = points.dims();
    if d[3] != 3 || validity.dims() != &d[..3] {
        return Err(IoError::Shape(format!("point dims {d:?} vs validity dims {:?}", validity.dims())));
    }
    let pts = points.as_f32()?.chunks_exact(3).map(|c| Point3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
    PointMaps::new(d[0], d[1], d[2], pts, validity.as_u8()?.to_vec()).map_err(|e| IoError::Shape(e.to_string()))
}

/// Fixed 9 decimals with trailing zeros trimmed; `-0` prints as `0`.
fn fmt_num(x: f64) -> String {
    let s = format!("{x:.9}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    match s {
        "-0" | "" => "0".to_string(),
        s => s.to_string(),
    }
}

/// RealEstate10K text: a source line, then one line per frame with the
/// timestamp, normalized intrinsics (zeros when absent), two zeros and the
/// row-major 3×4 camera-from-world matrix.
pub fn serialize_realestate(t: &Trajectory, width: usize, height: usize) -> String {
    let mut out = String::new();
    out.push_str(t.source().unwrap_or("synthetic"));
    out.push('\n');
    for f in t.frames() {
        let mut fields = vec![f.timestamp.to_string()];
        let k = f
            .intrinsics
            .map(|k| [k.fx / width as f64, k.fy / height as f64, k.cx / width as f64, k.cy / height as f64])
            .unwrap_or([0.0; 4]);
        fields.extend(k.iter().map(|&x| fmt_num(x)));
        fields.extend(["0".to_string(), "0".to_string()]);
        let (r, tr) = (f.pose.rotation(), f.pose.translation());
        for row in 0..3 {
            for col in 0..3 {
                fields.push(fmt_num(r[(row, col)]));
            }
            fields.push(fmt_num(tr[row]));
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_realestate(path: &Path, t: &Trajectory, width: usize, height: usize) -> Result<(), IoError> {
    fs::write(path, serialize_realestate(t, width, height)).map_err(file_err(path))
}

pub fn read_realestate(path: &Path, width: usize, height: usize) -> Result<Trajectory, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    Ok(parse_realestate(&text, width, height)?)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255) of frame `f`.
pub fn encode_ppm(video: &PixelVideo, f: usize) -> Vec<u8> {
    let (h, w) = (video.height(), video.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.extend(video.pixel(f, y, x).map(to_byte));
        }
    }
    out
}

/// Binary PGM (P5) of mask frame `f`, known = 255.
pub fn encode_pgm(mask: &OcclusionMask, f: usize) -> Vec<u8> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(if mask.is_known(f, y, x) { 255 } else { 0 });
        }
    }
    out
}

/// Parses a binary PPM/PGM with maxval 255: `(channels, width, height, bytes)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), IoError> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::Image("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let channels = match tokens[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(IoError::Image(format!("unsupported magic {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| IoError::Image(format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(IoError::Image(format!("maxval {maxval} unsupported")));
    }
    let n = channels * w * h;
    let data = bytes.get(pos..pos + n).ok_or(IoError::Image("truncated pixel data".into()))?;
    Ok((channels, w, h, data.to_vec()))
}

/// Writes `prefix_000.ppm`, `prefix_001.ppm`, ...
pub fn write_video_ppm(dir: &Path, prefix: &str, video: &PixelVideo) -> Result<(), IoError> {
    for f in 0..video.frames() {
        let p = dir.join(format!("{prefix}_{f:03}.ppm"));
        fs::write(&p, encode_ppm(video, f)).map_err(file_err(&p))?;
    }
    Ok(())
}

pub fn write_mask_pgm(dir: &Path, prefix: &str, mask: &OcclusionMask) -> Result<(), IoError> {
    for f in 0..mask.frames() {
        let p = dir.join(format!("{prefix}_{f:03}.pgm"));
        fs::write(&p, encode_pgm(mask, f)).map_err(file_err(&p))?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    s.push('\n');
    fs::write(path, s).map_err(file_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub const BUNDLE_FRAMES: &str = "frames.lrtf";
pub const BUNDLE_DEPTH: &str = "depth.lrtf";
pub const BUNDLE_POINTS: &str = "pointmaps.lrtf";
pub const BUNDLE_VALIDITY: &str = "validity.lrtf";
pub const BUNDLE_POSES: &str = "poses.txt";
pub const BUNDLE_INTRINSICS: &str = "intrinsics.json";
pub const BUNDLE_SCENE: &str = "scene.json";

/// Writes a bundle directory. Point maps and images are stored as f32.
pub fn write_bundle(dir: &Path, bundle: &GroundTruthBundle, spec: &SceneSpec) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(file_err(dir))?;
    let k = &bundle.intrinsics;
    let (f, h, w) = (bundle.pointmaps.frames(), k.height, k.width);
    write_tensor(&dir.join(BUNDLE_FRAMES), &pixel_video_tensor(&bundle.frames))?;
    write_tensor(&dir.join(BUNDLE_DEPTH), &Tensor::f32(vec![f, h, w], bundle.depth.iter().map(|&d| d as f32).collect())?)?;
    let (pts, valid) = pointmaps_tensors(&bundle.pointmaps);
    write_tensor(&dir.join(BUNDLE_POINTS), &pts)?;
    write_tensor(&dir.join(BUNDLE_VALIDITY), &valid)?;
    write_realestate(&dir.join(BUNDLE_POSES), &bundle.source_poses, w, h)?;
    write_json(&dir.join(BUNDLE_INTRINSICS), k)?;
    write_json(&dir.join(BUNDLE_SCENE), spec)
}

pub fn read_bundle(dir: &Path) -> Result<(GroundTruthBundle, SceneSpec), IoError> {
    let intrinsics: Intrinsics = read_json(&dir.join(BUNDLE_INTRINSICS))?;
    let spec: SceneSpec = read_json(&dir.join(BUNDLE_SCENE))?;
    let frames = pixel_video_from_tensor(&read_tensor(&dir.join(BUNDLE_FRAMES))?)?;
    let depth = read_tensor(&dir.join(BUNDLE_DEPTH))?.as_f32()?.iter().map(|&d| d as f64).collect();
    let pointmaps = pointmaps_from_tensors(&read_tensor(&dir.join(BUNDLE_POINTS))?, &read_tensor(&dir.join(BUNDLE_VALIDITY))?)?;
    let source_poses = read_realestate(&dir.join(BUNDLE_POSES), intrinsics.width, intrinsics.height)?;
    Ok((
        GroundTruthBundle {
            frames,
            depth,
            pointmaps,
            source_poses,
            intrinsics,
        },
        spec,
    ))
}
