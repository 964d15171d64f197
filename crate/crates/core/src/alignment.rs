//! Global alignment of pairwise point maps.
//!
//! Each edge `e = (n, m)` of the connectivity graph carries two point maps of
//! frames `n` and `m`, both expressed in camera `n`. The optimizer recovers
//! world point maps `P`, world-from-camera poses `τ` and per-edge scales
//! `s_e = exp(σ_e)` minimizing
//!
//! `Σ_e Σ_{v∈e} Σ_i C_i^{v,e} ‖P_i^v − τ_n(s_e · Q_i^{v,e})‖`
//!
//! with the unsquared norm. The scale is applied in camera coordinates,
//! before the rigid transform, so the loss is invariant under any rigid
//! motion applied to all `P` and all poses at once.
//!
//! Rotations are unit quaternions inside the optimizer. Frame 0 is pinned to
//! the identity and `Σ σ_e = 0` after every step.

use std::collections::BTreeSet;

use nalgebra::{Quaternion, UnitQuaternion};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Mat3, Point3, Pose, Vec3};

/// Residuals shorter than this sit on the kink of the norm; their
/// subgradient is taken as zero so an exact fit is a fixed point.
const KINK: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("window must cover at least 2 frames, got {0}")]
    WindowTooSmall(usize),
    #[error("inconsistent shapes: {0}")]
    InconsistentShapes(String),
    #[error("frames not connected to frame 0: {0:?}")]
    DisconnectedGraph(Vec<usize>),
    #[error("loss became non-finite at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Ordered pairs `(n, m)`, `n ≠ m`, inside every window of `window`
/// consecutive frames, deduplicated and sorted.
pub fn build_graph(frame_count: usize, window: usize) -> Result<Vec<(usize, usize)>, AlignmentError> {
    if frame_count < 2 {
        return Err(AlignmentError::TooFewFrames(frame_count));
    }
    if window < 2 {
        return Err(AlignmentError::WindowTooSmall(window));
    }
    let w = window.min(frame_count);
    let mut edges = BTreeSet::new();
    for start in 0..=frame_count - w {
        for n in start..start + w {
            for m in start..start + w {
                if n != m {
                    edges.insert((n, m));
                }
            }
        }
    }
    Ok(edges.into_iter().collect())
}

/// Two point maps of one frame pair, both in the reference camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeObservation {
    pub ref_frame: usize,
    pub src_frame: usize,
    pub height: usize,
    pub width: usize,
    pub pointmap_ref: Vec<Point3>,
    pub pointmap_src: Vec<Point3>,
    pub confidence_ref: Vec<f64>,
    pub confidence_src: Vec<f64>,
}

impl EdgeObservation {
    pub fn new(
        ref_frame: usize,
        src_frame: usize,
        height: usize,
        width: usize,
        pointmap_ref: Vec<Point3>,
        pointmap_src: Vec<Point3>,
        confidence_ref: Vec<f64>,
        confidence_src: Vec<f64>,
    ) -> Result<Self, AlignmentError> {
        let e = EdgeObservation {
            ref_frame,
            src_frame,
            height,
            width,
            pointmap_ref,
            pointmap_src,
            confidence_ref,
            confidence_src,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), AlignmentError> {
        let bad = |msg: String| Err(AlignmentError::InconsistentShapes(msg));
        if self.ref_frame == self.src_frame {
            return bad(format!("edge ({0}, {0}) is a self loop", self.ref_frame));
        }
        let n = self.height * self.width;
        if [self.pointmap_ref.len(), self.pointmap_src.len(), self.confidence_ref.len(), self.confidence_src.len()]
            .iter()
            .any(|&l| l != n)
        {
            return bad(format!("edge ({}, {}) grids do not all have {n} entries", self.ref_frame, self.src_frame));
        }
        if self.confidence_ref.iter().chain(&self.confidence_src).any(|c| !(c.is_finite() && *c >= 0.0)) {
            return bad(format!("edge ({}, {}) has a negative or non-finite confidence", self.ref_frame, self.src_frame));
        }
        if self.pointmap_ref.iter().chain(&self.pointmap_src).any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return bad(format!("edge ({}, {}) has a non-finite point", self.ref_frame, self.src_frame));
        }
        Ok(())
    }

    /// `(frame, points, confidences)` for both views.
    fn views(&self) -> [(usize, &[Point3], &[f64]); 2] {
        [
            (self.ref_frame, &self.pointmap_ref, &self.confidence_ref),
            (self.src_frame, &self.pointmap_src, &self.confidence_src),
        ]
    }
}

/// Optimization result in matrix form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentState {
    pub height: usize,
    pub width: usize,
    /// Per-frame world points, row-major `H × W`.
    pub global_pointmaps: Vec<Vec<Point3>>,
    /// World-from-camera.
    pub frame_poses: Vec<Pose>,
    pub log_scales: Vec<f64>,
}

impl AlignmentState {
    pub fn frame_count(&self) -> usize {
        self.frame_poses.len()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.log_scales.iter().map(|s| s.exp()).collect()
    }

    /// Camera-from-world poses, the convention of trajectories.
    pub fn camera_poses(&self) -> Vec<Pose> {
        self.frame_poses.iter().map(Pose::inverse).collect()
    }
}

/// Offsets of the flat parameter vector: world points, then quaternions
/// `(w, x, y, z)`, then translations, then log-scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub frames: usize,
    pub pixels: usize,
    pub edges: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.sigma(0) + self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, frame: usize, pixel: usize) -> usize {
        (frame * self.pixels + pixel) * 3
    }

    pub fn quat(&self, frame: usize) -> usize {
        self.frames * self.pixels * 3 + frame * 4
    }

    pub fn trans(&self, frame: usize) -> usize {
        self.quat(self.frames) + frame * 3
    }

    pub fn sigma(&self, edge: usize) -> usize {
        self.trans(self.frames) + edge
    }
}

fn vec3_at(x: &[f64], i: usize) -> Vec3 {
    Vec3::new(x[i], x[i + 1], x[i + 2])
}

fn add3(x: &mut [f64], i: usize, v: &Vec3) {
    x[i] += v.x;
    x[i + 1] += v.y;
    x[i + 2] += v.z;
}

/// Unit quaternion of the raw parameters `(w, x, y, z)` and its norm.
fn unit_quat(x: &[f64], i: usize) -> (UnitQuaternion<f64>, f64) {
    let q = Quaternion::new(x[i], x[i + 1], x[i + 2], x[i + 3]);
    let norm = q.norm();
    (UnitQuaternion::new_normalize(q), norm)
}

/// Weighted similarity `dst ≈ c·R·src + t` (Umeyama). `None` when the
/// source points are degenerate or the weights vanish.
pub fn similarity_fit(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Option<(Mat3, Vec3, f64)> {
    let total: f64 = weights.iter().sum();
    if src.len() < 3 || total.is_nan() || total <= 0.0 {
        return None;
    }
    let mean = |pts: &[Vec3]| pts.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vec3>() / total;
    let (ms, md) = (mean(src), mean(dst));
    let mut cov = Mat3::zeros();
    let mut var = 0.0;
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        let (a, b) = (s - ms, d - md);
        cov += (b * a.transpose()) * *w;
        var += w * a.norm_squared();
    }
    cov /= total;
    var /= total;
    if var <= 1e-300 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Mat3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let c = svd.singular_values.component_mul(&d.diagonal()).sum() / var;
    Some((r, md - r * ms * c, c))
}

/// Gradient contributions of one edge.
struct EdgeGrad {
    loss: f64,
    points: [Vec<f64>; 2],
    quat: [f64; 4],
    trans: Vec3,
    sigma: f64,
}

/// The loss as a function of a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AlignmentProblem {
    observations: Vec<EdgeObservation>,
    layout: ParamLayout,
    height: usize,
    width: usize,
}

impl AlignmentProblem {
    pub fn new(observations: Vec<EdgeObservation>, frame_count: usize) -> Result<Self, AlignmentError> {
        let first = observations
            .first()
            .ok_or_else(|| AlignmentError::InconsistentShapes("no observations".into()))?;
        let (height, width) = (first.height, first.width);
        for e in &observations {
            e.validate()?;
            if (e.height, e.width) != (height, width) {
                return Err(AlignmentError::InconsistentShapes(format!(
                    "edge ({}, {}) is {}x{}, expected {height}x{width}",
                    e.ref_frame, e.src_frame, e.height, e.width
                )));
            }
            if e.ref_frame >= frame_count || e.src_frame >= frame_count {
                return Err(AlignmentError::InconsistentShapes(format!(
                    "edge ({}, {}) references a frame beyond {frame_count}",
                    e.ref_frame, e.src_frame
                )));
            }
        }
        let layout = ParamLayout {
            frames: frame_count,
            pixels: height * width,
            edges: observations.len(),
        };
        Ok(AlignmentProblem {
            observations,
            layout,
            height,
            width,
        })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn observations(&self) -> &[EdgeObservation] {
        &self.observations
    }

    fn edge_grad(&self, x: &[f64], ei: usize, with_grad: bool) -> EdgeGrad {
        let l = &self.layout;
        let e = &self.observations[ei];
        let n = e.ref_frame;
        let (uq, qnorm) = unit_quat(x, l.quat(n));
        let rot: Mat3 = *uq.to_rotation_matrix().matrix();
        let t = vec3_at(x, l.trans(n));
        let s = x[l.sigma(ei)].exp();
        let (w, b) = (uq.w, uq.imag());

        let mut out = EdgeGrad {
            loss: 0.0,
            points: [Vec::new(), Vec::new()],
            quat: [0.0; 4],
            trans: Vec3::zeros(),
            sigma: 0.0,
        };
        let mut g_w = 0.0;
        let mut g_b = Vec3::zeros();
        for (vi, (frame, q, c)) in e.views().into_iter().enumerate() {
            if with_grad {
                out.points[vi] = vec![0.0; l.pixels * 3];
            }
            for i in 0..l.pixels {
                if c[i] == 0.0 {
                    continue;
                }
                let u = q[i].coords * s;
                let y = rot * u + t;
                let r = vec3_at(x, l.point(frame, i)) - y;
                let d = r.norm();
                out.loss += c[i] * d;
                if !with_grad || d < KINK {
                    continue;
                }
                let gp = r * (c[i] / d);
                add3(&mut out.points[vi], i * 3, &gp);
                // Upstream gradient with respect to y.
                let g = -gp;
                out.trans += g;
                out.sigma += g.dot(&(y - t));
                g_w += 2.0 * g.dot(&b.cross(&u));
                g_b += 2.0 * w * u.cross(&g) + 2.0 * (b.dot(&u) * g + b.dot(&g) * u - 2.0 * u.dot(&g) * b);
            }
        }
        if with_grad {
            let gq = [g_w, g_b.x, g_b.y, g_b.z];
            let qh = [w, b.x, b.y, b.z];
            let radial: f64 = (0..4).map(|k| gq[k] * qh[k]).sum();
            for k in 0..4 {
                out.quat[k] = (gq[k] - qh[k] * radial) / qnorm;
            }
        }
        out
    }

    fn edge_results(&self, x: &[f64], with_grad: bool) -> Vec<EdgeGrad> {
        (0..self.observations.len())
            .into_par_iter()
            .map(|ei| self.edge_grad(x, ei, with_grad))
            .collect()
    }

    /// Edge sums are combined in edge order, so the result does not depend
    /// on the thread count.
    pub fn loss(&self, x: &[f64]) -> f64 {
        self.edge_results(x, false).iter().map(|g| g.loss).sum()
    }

    pub fn loss_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let l = &self.layout;
        let mut grad = vec![0.0; l.len()];
        let mut loss = 0.0;
        for (ei, eg) in self.edge_results(x, true).into_iter().enumerate() {
            let e = &self.observations[ei];
            loss += eg.loss;
            for (vi, frame) in [e.ref_frame, e.src_frame].into_iter().enumerate() {
                let base = l.point(frame, 0);
                for (dst, src) in grad[base..base + l.pixels * 3].iter_mut().zip(&eg.points[vi]) {
                    *dst += src;
                }
            }
            let qi = l.quat(e.ref_frame);
            for k in 0..4 {
                grad[qi + k] += eg.quat[k];
            }
            add3(&mut grad, l.trans(e.ref_frame), &eg.trans);
            grad[l.sigma(ei)] += eg.sigma;
        }
        (loss, grad)
    }

    pub fn pack(&self, state: &AlignmentState) -> Result<Vec<f64>, AlignmentError> {
        let l = &self.layout;
        if state.frame_count() != l.frames || state.log_scales.len() != l.edges || state.global_pointmaps.iter().any(|p| p.len() != l.pixels) {
            return Err(AlignmentError::InconsistentShapes("state does not match the observations".into()));
        }
        let mut x = vec![0.0; l.len()];
        for f in 0..l.frames {
            for (i, p) in state.global_pointmaps[f].iter().enumerate() {
                add3(&mut x, l.point(f, i), &p.coords);
            }
            let pose = &state.frame_poses[f];
            let q = UnitQuaternion::from_matrix(pose.rotation());
            x[l.quat(f)..l.quat(f) + 4].copy_from_slice(&[q.w, q.i, q.j, q.k]);
            add3(&mut x, l.trans(f), pose.translation());
        }
        x[l.sigma(0)..].copy_from_slice(&state.log_scales);
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64]) -> AlignmentState {
        let l = &self.layout;
        let global_pointmaps = (0..l.frames)
            .map(|f| (0..l.pixels).map(|i| Point3::from(vec3_at(x, l.point(f, i)))).collect())
            .collect();
        let frame_poses = (0..l.frames)
            .map(|f| {
                let (q, _) = unit_quat(x, l.quat(f));
                Pose::new_snapped(*q.to_rotation_matrix().matrix(), vec3_at(x, l.trans(f)), 1e-3).expect("unit quaternion gives a rotation")
            })
            .collect();
        AlignmentState {
            height: self.height,
            width: self.width,
            global_pointmaps,
            frame_poses,
            log_scales: x[l.sigma(0)..].to_vec(),
        }
    }

    /// Identity poses, unit scales, and every frame's points taken from the
    /// first edge that has it as reference (or, failing that, as source).
    pub fn initial_state(&self) -> AlignmentState {
        let l = &self.layout;
        let mut maps = vec![vec![Point3::origin(); l.pixels]; l.frames];
        let mut seen = vec![false; l.frames];
        let as_ref = self.observations.iter().map(|e| (e.ref_frame, &e.pointmap_ref));
        let as_src = self.observations.iter().map(|e| (e.src_frame, &e.pointmap_src));
        for (f, pts) in as_ref.chain(as_src) {
            if !seen[f] {
                maps[f] = pts.clone();
                seen[f] = true;
            }
        }
        AlignmentState {
            height: self.height,
            width: self.width,
            global_pointmaps: maps,
            frame_poses: vec![Pose::identity(); l.frames],
            log_scales: vec![0.0; l.edges],
        }
    }

    /// Warm start by chaining closed-form similarity fits through the graph.
    ///
    /// Frame 0 is the world and the first edge referenced at frame 0 gets
    /// unit scale. Edges are then swept in order until nothing changes: an
    /// edge whose reference pose is unknown gets pose and scale from a
    /// weighted Umeyama fit of its point maps onto already placed world
    /// points; an edge with known pose gets its scale by least squares; an
    /// edge with known pose and scale places its frames' world points.
    /// Finally the log-scales are centered, rescaling the world to match.
    pub fn spanning_tree_state(&self) -> AlignmentState {
        let l = self.layout;
        let obs = &self.observations;
        let mut poses: Vec<Option<(Mat3, Vec3)>> = vec![None; l.frames];
        let mut scales: Vec<Option<f64>> = vec![None; l.edges];
        let mut world: Vec<Option<Vec<Vec3>>> = vec![None; l.frames];
        poses[0] = Some((Mat3::identity(), Vec3::zeros()));
        if let Some(e0) = obs.iter().position(|e| e.ref_frame == 0) {
            scales[e0] = Some(1.0);
        }
        loop {
            let mut changed = false;
            for (ei, e) in obs.iter().enumerate() {
                let views = e.views();
                match (poses[e.ref_frame], scales[ei]) {
                    (Some((r, t)), Some(sc)) => {
                        for (f, q, _) in views {
                            if world[f].is_none() {
                                world[f] = Some(q.iter().map(|p| r * (p.coords * sc) + t).collect());
                                changed = true;
                            }
                        }
                    }
                    (Some((r, t)), None) => {
                        let (mut num, mut den) = (0.0, 0.0);
                        for (f, q, c) in views {
                            if let Some(x) = &world[f] {
                                for i in 0..l.pixels {
                                    let a = r * q[i].coords;
                                    num += c[i] * a.dot(&(x[i] - t));
                                    den += c[i] * a.norm_squared();
                                }
                            }
                        }
                        if den > 0.0 && num > 0.0 {
                            scales[ei] = Some(num / den);
                            changed = true;
                        }
                    }
                    (None, _) => {
                        let (mut src, mut dst, mut w) = (Vec::new(), Vec::new(), Vec::new());
                        for (f, q, c) in views {
                            if let Some(x) = &world[f] {
                                src.extend(q.iter().map(|p| p.coords));
                                dst.extend_from_slice(x);
                                w.extend_from_slice(c);
                            }
                        }
                        if let Some((r, t, sc)) = similarity_fit(&src, &dst, &w) {
                            poses[e.ref_frame] = Some((r, t));
                            scales[ei] = Some(sc);
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let log_scales: Vec<f64> = scales.iter().map(|s| s.unwrap_or(1.0).ln()).collect();
        let mean = log_scales.iter().sum::<f64>() / log_scales.len() as f64;
        let g = (-mean).exp();
        let fallback = self.initial_state();
        AlignmentState {
            height: self.height,
            width: self.width,
            global_pointmaps: world
                .iter()
                .zip(&fallback.global_pointmaps)
                .map(|(x, fb)| match x {
                    Some(x) => x.iter().map(|p| Point3::from(p * g)).collect(),
                    None => fb.clone(),
                })
                .collect(),
            frame_poses: poses
                .iter()
                .map(|p| match p {
                    Some((r, t)) => Pose::new_snapped(*r, t * g, 1e-3).expect("fit returns a rotation"),
                    None => Pose::identity(),
                })
                .collect(),
            log_scales: log_scales.iter().map(|s| s - mean).collect(),
        }
    }

    /// Frames (other than 0) not reachable from frame 0 through any edge.
    pub fn unreachable_frames(&self) -> Vec<usize> {
        let n = self.layout.frames;
        let mut adj = vec![Vec::new(); n];
        for e in &self.observations {
            adj[e.ref_frame].push(e.src_frame);
            adj[e.src_frame].push(e.ref_frame);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(f) = stack.pop() {
            for &g in &adj[f] {
                if !seen[g] {
                    seen[g] = true;
                    stack.push(g);
                }
            }
        }
        (0..n).filter(|&f| !seen[f]).collect()
    }
}

/// `alignment_loss` for a state in matrix form.
pub fn alignment_loss(state: &AlignmentState, observations: &[EdgeObservation]) -> Result<f64, AlignmentError> {
    let problem = AlignmentProblem::new(observations.to_vec(), state.frame_count())?;
    Ok(problem.loss(&problem.pack(state)?))
}

/// Starting point of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignInit {
    /// [`AlignmentProblem::spanning_tree_state`].
    #[default]
    SpanningTree,
    /// [`AlignmentProblem::initial_state`]: identity poses, unit scales.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step as a fraction of `learning_rate`;
    /// the rate decays geometrically after `decay_start` (a fraction of the
    /// run). 1 keeps it constant.
    pub final_lr_ratio: f64,
    pub decay_start: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub init: AlignInit,
    pub window: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            steps: 300,
            learning_rate: 0.01,
            final_lr_ratio: 1e-4,
            decay_start: 0.3,
            beta1: 0.9,
            beta2: 0.999,
            init: AlignInit::SpanningTree,
            window: 3,
        }
    }
}

impl AlignConfig {
    fn validate(&self) -> Result<(), AlignmentError> {
        let bad = |m: &str| Err(AlignmentError::InvalidConfig(m.into()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return bad("final_lr_ratio must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.decay_start) {
            return bad("decay_start must lie in [0, 1]");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let start = (self.decay_start * self.steps as f64).floor() as usize;
        if step < start || self.steps <= start + 1 {
            return self.learning_rate;
        }
        let progress = (step - start) as f64 / (self.steps - start - 1) as f64;
        self.learning_rate * self.final_lr_ratio.powf(progress)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub state: AlignmentState,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss of [`AlignmentProblem::initial_state`], whatever the start was;
    /// a scale-aware yardstick for the final loss.
    pub identity_init_loss: f64,
    /// Loss before each step, then after the last one.
    pub loss_history: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    const EPS: f64 = 1e-8;

    fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
        }
    }

    fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Runs Adam on the alignment loss from the configured starting point.
/// `intrinsics` gives the frame count and must match the point-map size.
pub fn optimize_alignment(observations: &[EdgeObservation], intrinsics: &[Intrinsics], config: &AlignConfig) -> Result<AlignmentResult, AlignmentError> {
    config.validate()?;
    let frames = intrinsics.len();
    let problem = AlignmentProblem::new(observations.to_vec(), frames)?;
    for k in intrinsics {
        if (k.height, k.width) != (problem.height, problem.width) {
            return Err(AlignmentError::InconsistentShapes(format!(
                "intrinsics are {}x{}, point maps {}x{}",
                k.height, k.width, problem.height, problem.width
            )));
        }
    }
    let missing = problem.unreachable_frames();
    if !missing.is_empty() {
        return Err(AlignmentError::DisconnectedGraph(missing));
    }
    let init = match config.init {
        AlignInit::SpanningTree => problem.spanning_tree_state(),
        AlignInit::Identity => problem.initial_state(),
    };
    optimize_from(&problem, &init, config)
}

/// Runs Adam from an explicit starting state.
pub fn optimize_from(problem: &AlignmentProblem, init: &AlignmentState, config: &AlignConfig) -> Result<AlignmentResult, AlignmentError> {
    config.validate()?;
    let l = problem.layout();
    let mut x = problem.pack(init)?;
    let mut adam = Adam::new(x.len(), config.beta1, config.beta2);
    let mut history = Vec::with_capacity(config.steps + 1);
    for step in 0..config.steps {
        let (loss, mut grad) = problem.loss_and_gradient(&x);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(AlignmentError::NonFiniteLoss(step));
        }
        history.push(loss);
        grad[l.quat(0)..l.quat(0) + 4].fill(0.0);
        grad[l.trans(0)..l.trans(0) + 3].fill(0.0);
        adam.step(&mut x, &grad, config.learning_rate_at(step));
        for f in 0..l.frames {
            let i = l.quat(f);
            let norm = (0..4).map(|k| x[i + k] * x[i + k]).sum::<f64>().sqrt();
            for k in 0..4 {
                x[i + k] /= norm;
            }
        }
        let sig = &mut x[l.sigma(0)..];
        let mean = sig.iter().sum::<f64>() / sig.len() as f64;
        sig.iter_mut().for_each(|s| *s -= mean);
    }
    let final_loss = problem.loss(&x);
    if !final_loss.is_finite() {
        return Err(AlignmentError::NonFiniteLoss(config.steps));
    }
    history.push(final_loss);
    Ok(AlignmentResult {
        state: problem.unpack(&x),
        initial_loss: history[0],
        final_loss,
        identity_init_loss: problem.loss(&problem.pack(&problem.initial_state())?),
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::trace_angle;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn one_pixel_edge(p: Point3, c: f64) -> EdgeObservation {
        EdgeObservation::new(0, 1, 1, 1, vec![p], vec![p], vec![c], vec![0.0]).unwrap()
    }

    fn zero_state(frames: usize, pixels: usize, edges: usize) -> AlignmentState {
        AlignmentState {
            height: 1,
            width: pixels,
            global_pointmaps: vec![vec![Point3::origin(); pixels]; frames],
            frame_poses: vec![Pose::identity(); frames],
            log_scales: vec![0.0; edges],
        }
    }

    #[test]
    fn graph_examples() {
        assert_eq!(build_graph(3, 3).unwrap().len(), 6);
        assert_eq!(build_graph(2, 3).unwrap(), vec![(0, 1), (1, 0)]);
        assert!(matches!(build_graph(1, 3), Err(AlignmentError::TooFewFrames(1))));
        assert!(matches!(build_graph(4, 1), Err(AlignmentError::WindowTooSmall(1))));
    }

    #[test]
    fn graph_count_matches_enumeration() {
        // Independent count: pairs within distance window-1, both orders.
        for (f, w) in [(16usize, 3usize), (6, 3), (7, 4), (5, 2)] {
            let expected = (0..f).flat_map(|n| (0..f).map(move |m| (n, m))).filter(|&(n, m)| n != m && n.abs_diff(m) < w).count();
            assert_eq!(build_graph(f, w).unwrap().len(), expected);
        }
        assert_eq!(build_graph(16, 3).unwrap().len(), 58);
        let g = build_graph(16, 3).unwrap();
        assert!(g.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn loss_examples() {
        let obs = vec![one_pixel_edge(Point3::new(3.0, 4.0, 0.0), 1.0)];
        assert!((alignment_loss(&zero_state(2, 1, 1), &obs).unwrap() - 5.0).abs() < 1e-12);
        let obs = vec![one_pixel_edge(Point3::new(3.0, 4.0, 0.0), 0.5)];
        assert!((alignment_loss(&zero_state(2, 1, 1), &obs).unwrap() - 2.5).abs() < 1e-12);
    }

    /// Random consistent problem: world points, world-from-camera poses and
    /// per-edge scales, observations generated exactly.
    fn synthetic(seed: u64, frames: usize, pixels: usize) -> (Vec<EdgeObservation>, AlignmentState) {
        let mut rng = SplitMix64::new(seed);
        let world: Vec<Vec<Point3>> = (0..frames)
            .map(|_| (0..pixels).map(|_| Point3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(2.0, 4.0))).collect())
            .collect();
        let poses: Vec<Pose> = (0..frames)
            .map(|f| {
                if f == 0 {
                    return Pose::identity();
                }
                let axis = Vec3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
                Pose::from_axis_angle(axis, rng.uniform(-0.2, 0.2), Vec3::new(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.0))
            })
            .collect();
        let edges = build_graph(frames, 3).unwrap();
        let mut sig: Vec<f64> = edges.iter().map(|_| rng.uniform(-0.2, 0.2)).collect();
        let mean = sig.iter().sum::<f64>() / sig.len() as f64;
        sig.iter_mut().for_each(|s| *s -= mean);
        let obs = edges
            .iter()
            .zip(&sig)
            .map(|(&(n, m), s)| {
                let inv = poses[n].inverse();
                let to_cam = |p: &Point3| Point3::from(inv.transform_point(p).coords / s.exp());
                EdgeObservation::new(
                    n,
                    m,
                    1,
                    pixels,
                    world[n].iter().map(to_cam).collect(),
                    world[m].iter().map(to_cam).collect(),
                    (0..pixels).map(|_| rng.uniform(0.2, 1.0)).collect(),
                    (0..pixels).map(|_| rng.uniform(0.2, 1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let state = AlignmentState {
            height: 1,
            width: pixels,
            global_pointmaps: world,
            frame_poses: poses,
            log_scales: sig,
        };
        (obs, state)
    }

    #[test]
    fn truth_has_zero_loss_and_is_a_fixed_point() {
        let (obs, truth) = synthetic(5, 3, 6);
        assert!(alignment_loss(&truth, &obs).unwrap() < 1e-12);
        let problem = AlignmentProblem::new(obs, 3).unwrap();
        let res = optimize_from(&problem, &truth, &AlignConfig::default()).unwrap();
        assert!(res.final_loss < 1e-12);
    }

    #[test]
    fn similarity_fit_recovers_transform() {
        let mut rng = SplitMix64::new(11);
        let r = *Pose::from_axis_angle(Vec3::new(0.3, -1.0, 0.5), 0.7, Vec3::zeros()).rotation();
        let t = Vec3::new(0.4, -1.2, 2.0);
        let c = 1.7;
        let src: Vec<Vec3> = (0..20).map(|_| Vec3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0))).collect();
        let dst: Vec<Vec3> = src.iter().map(|p| r * p * c + t).collect();
        let w: Vec<f64> = (0..20).map(|_| rng.uniform(0.1, 1.0)).collect();
        let (r2, t2, c2) = similarity_fit(&src, &dst, &w).unwrap();
        assert!((r2 - r).abs().max() < 1e-12);
        assert!((t2 - t).norm() < 1e-12);
        assert!((c2 - c).abs() < 1e-12);
        assert!(similarity_fit(&src[..2], &dst[..2], &w[..2]).is_none());
    }

    #[test]
    fn spanning_tree_start_is_exact_on_consistent_data() {
        let (obs, truth) = synthetic(21, 5, 8);
        let problem = AlignmentProblem::new(obs, 5).unwrap();
        let state = problem.spanning_tree_state();
        assert!(problem.loss(&problem.pack(&state).unwrap()) < 1e-9);
        for (a, b) in state.frame_poses.iter().zip(&truth.frame_poses) {
            assert!(a.inverse().compose(b).translation().norm() < 1e-9);
            assert!(trace_angle(&(a.rotation() * b.rotation().transpose())) < 1e-7);
        }
        for (a, b) in state.log_scales.iter().zip(&truth.log_scales) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn disconnected_frame_reported() {
        let (obs, _) = synthetic(1, 3, 2);
        let kept: Vec<_> = obs.into_iter().filter(|e| e.ref_frame != 1 && e.src_frame != 1).collect();
        let k = Intrinsics::centered(2.0, 2, 1).unwrap();
        let err = optimize_alignment(&kept, &[k; 3], &AlignConfig::default()).unwrap_err();
        assert!(matches!(err, AlignmentError::DisconnectedGraph(ref v) if v == &vec![1]));
    }

    #[test]
    fn lr_schedule_endpoints() {
        let c = AlignConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.01);
        assert!((c.learning_rate_at(299) - 1e-6).abs() < 1e-18);
        let flat = AlignConfig { final_lr_ratio: 1.0, ..c };
        assert_eq!(flat.learning_rate_at(299), 0.01);
    }

    fn perturbed(seed: u64) -> (AlignmentProblem, Vec<f64>) {
        let (obs, truth) = synthetic(seed, 2, 4);
        let problem = AlignmentProblem::new(obs, 2).unwrap();
        let mut x = problem.pack(&truth).unwrap();
        let mut rng = SplitMix64::new(seed ^ 0x55);
        for v in x.iter_mut() {
            *v += rng.uniform(-0.3, 0.3);
        }
        (problem, x)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gradient_matches_central_differences(seed in any::<u64>()) {
            let (problem, x) = perturbed(seed);
            let (_, grad) = problem.loss_and_gradient(&x);
            let h = 1e-5;
            let fd: Vec<f64> = (0..x.len()).map(|i| {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += h;
                b[i] -= h;
                (problem.loss(&a) - problem.loss(&b)) / (2.0 * h)
            }).collect();
            let diff = grad.iter().zip(&fd).map(|(g, f)| (g - f).powi(2)).sum::<f64>().sqrt();
            let norm = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-4 * norm, "relative error {}", diff / norm);
        }

        #[test]
        fn loss_invariant_under_global_rigid_motion(seed in any::<u64>()) {
            let (obs, truth) = synthetic(seed, 3, 5);
            let mut rng = SplitMix64::new(seed ^ 0x77);
            let mut state = truth.clone();
            for p in state.global_pointmaps.iter_mut().flatten() {
                p.coords += Vec3::new(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
            }
            let base = alignment_loss(&state, &obs).unwrap();
            let axis = Vec3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
            let g = Pose::from_axis_angle(axis, rng.uniform(-3.0, 3.0), Vec3::new(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)));
            let mut moved = state.clone();
            for p in moved.global_pointmaps.iter_mut().flatten() {
                *p = g.transform_point(p);
            }
            for pose in moved.frame_poses.iter_mut() {
                *pose = g.compose(pose);
            }
            prop_assert!(base >= 0.0);
            prop_assert!((alignment_loss(&moved, &obs).unwrap() - base).abs() < 1e-6);
        }
    }
}
