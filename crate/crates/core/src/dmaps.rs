//! Metric-aware pose and shape initialisation.
//!
//! Bone lengths come from depth-decoded metric joints, averaged over frames
//! with confidence weights and blended with the template. Pose comes from
//! bone directions (swing) plus a learned twist per bone, refined by a
//! temporal self-attention block over per-frame pose tokens.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::{bone_lengths, BodyTemplate, KinematicTree, ShapeParams};
use crate::error::{Error, Result};
use crate::fusion::FeatureGrid;
use crate::numerics::{
    glorot_uniform, sigmoid, Activation, CustomOp, DenseIds, LayerParams, Matrix, ParamId,
    ParamStore, Tape, Var,
};
use crate::rotation::{
    add, cross, dot, exp_so3, left_jacobian_inverse, mat_mul, mat_t_vec, mat_vec, normalize, scale,
    sub, swing_between, swing_twist_decompose, transpose, Mat3, UnitQuaternion, Vec3, IDENTITY3,
};
use crate::synth::{CameraModel, GridGeometry, Observation};

/// `w_t = σ(η m̄_t)`.
pub fn temporal_weights(mean_confidence: &[f64], eta: f64) -> Vec<f64> {
    mean_confidence.iter().map(|m| sigmoid(eta * m)).collect()
}

/// `α = σ(η · mean_t m̄_t)`.
pub fn fusion_gate(mean_confidence: &[f64], eta: f64) -> Result<f64> {
    if mean_confidence.is_empty() {
        return Err(Error::InvalidArgument("fusion gate over an empty sequence".into()));
    }
    let mean = mean_confidence.iter().sum::<f64>() / mean_confidence.len() as f64;
    Ok(sigmoid(eta * mean))
}

/// Weighted temporal mean of per-frame bone lengths.
pub fn estimate_bone_lengths(
    joints_seq: &[Vec<Vec3>],
    tree: &KinematicTree,
    weights: &[f64],
) -> Result<Vec<f64>> {
    if joints_seq.is_empty() || joints_seq.len() != weights.len() {
        return Err(Error::shape(
            "estimate_bone_lengths",
            format!("{} frames, {} weights", joints_seq.len(), weights.len()),
        ));
    }
    let per_frame: Vec<Vec<f64>> = joints_seq.iter().map(|j| bone_lengths(j, tree)).collect();
    weighted_mean_lengths(&per_frame, weights)
}

pub(crate) fn weighted_mean_lengths(per_frame: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "bone length estimate needs positive total weight".into(),
        ));
    }
    let bones = per_frame[0].len();
    let mut out = vec![0.0; bones];
    for (lengths, w) in per_frame.iter().zip(weights) {
        for (o, l) in out.iter_mut().zip(lengths) {
            *o += w * l;
        }
    }
    Ok(out.into_iter().map(|v| v / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedLengths {
    pub lengths: Vec<f64>,
    /// Bones whose estimate was non-positive and fell back to the template.
    pub fallback: Vec<usize>,
}

/// `B^Z = α B̃ + (1 − α) B̄` per bone.
pub fn calibrate_bone_lengths(estimated: &[f64], template: &[f64], alpha: f64) -> CalibratedLengths {
    let mut fallback = Vec::new();
    let lengths = estimated
        .iter()
        .zip(template)
        .enumerate()
        .map(|(b, (&e, &t))| {
            if e > 0.0 && e.is_finite() {
                alpha * e + (1.0 - alpha) * t
            } else {
                fallback.push(b);
                t
            }
        })
        .collect();
    CalibratedLengths { lengths, fallback }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub mean_confidence: Vec<f64>,
    pub eta: f64,
    /// Zero for frames without a usable metric estimate.
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub estimated: Vec<f64>,
    pub calibrated: Vec<f64>,
    pub fallback_bones: Vec<usize>,
    pub valid_frames: Vec<bool>,
}

/// Runs the weighting, estimation and blending steps. Frames without metric
/// joints get zero weight; with none left the template is returned.
pub fn calibrate(
    per_frame_lengths: &[Option<Vec<f64>>],
    mean_confidence: &[f64],
    eta: f64,
    template_lengths: &[f64],
) -> Result<CalibrationState> {
    if per_frame_lengths.len() != mean_confidence.len() {
        return Err(Error::shape(
            "calibrate",
            format!(
                "{} frames of lengths, {} confidences",
                per_frame_lengths.len(),
                mean_confidence.len()
            ),
        ));
    }
    let alpha = fusion_gate(mean_confidence, eta)?;
    let raw = temporal_weights(mean_confidence, eta);
    let valid_frames: Vec<bool> = per_frame_lengths.iter().map(Option::is_some).collect();
    let weights: Vec<f64> = raw
        .iter()
        .zip(&valid_frames)
        .map(|(w, v)| if *v { *w } else { 0.0 })
        .collect();
    let (estimated, calibrated, fallback_bones) = if valid_frames.iter().any(|v| *v) {
        let frames: Vec<Vec<f64>> = per_frame_lengths
            .iter()
            .map(|l| l.clone().unwrap_or_else(|| vec![0.0; template_lengths.len()]))
            .collect();
        let est = weighted_mean_lengths(&frames, &weights)?;
        let cal = calibrate_bone_lengths(&est, template_lengths, alpha);
        (est, cal.lengths, cal.fallback)
    } else {
        (
            vec![0.0; template_lengths.len()],
            template_lengths.to_vec(),
            (0..template_lengths.len()).collect(),
        )
    };
    Ok(CalibrationState {
        mean_confidence: mean_confidence.to_vec(),
        eta,
        weights,
        alpha,
        estimated,
        calibrated,
        fallback_bones,
        valid_frames,
    })
}

/// Differentiable calibration: input `η` (1×1), output the normalised
/// residual `(B^Z − B̄) / B̄` (1 × bones).
pub struct CalibrateOp {
    per_frame: Vec<Option<Vec<f64>>>,
    mean_confidence: Vec<f64>,
    template: Vec<f64>,
}

impl CalibrateOp {
    pub fn new(
        per_frame: Vec<Option<Vec<f64>>>,
        mean_confidence: Vec<f64>,
        template: Vec<f64>,
    ) -> Self {
        CalibrateOp {
            per_frame,
            mean_confidence,
            template,
        }
    }

    pub fn forward(&self, eta: f64) -> Result<(Matrix, CalibrationState)> {
        let state = calibrate(&self.per_frame, &self.mean_confidence, eta, &self.template)?;
        let r: Vec<f64> = state
            .calibrated
            .iter()
            .zip(&self.template)
            .map(|(z, t)| (z - t) / t)
            .collect();
        Ok((Matrix::row_vector(&r), state))
    }
}

impl CustomOp for CalibrateOp {
    fn name(&self) -> &'static str {
        "calibrate"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let eta = inputs[0].item();
        let Ok(state) = calibrate(&self.per_frame, &self.mean_confidence, eta, &self.template)
        else {
            return vec![Matrix::scalar(0.0)];
        };
        let t = self.mean_confidence.len() as f64;
        let mean_m = self.mean_confidence.iter().sum::<f64>() / t;
        let alpha = state.alpha;
        let dalpha = alpha * (1.0 - alpha) * mean_m;
        let total_w: f64 = state.weights.iter().sum();
        let mut g = 0.0;
        for b in 0..self.template.len() {
            if state.fallback_bones.contains(&b) {
                continue;
            }
            let est = state.estimated[b];
            let mut dest = 0.0;
            for (f, lengths) in self.per_frame.iter().enumerate() {
                if let Some(l) = lengths {
                    let w = state.weights[f];
                    let dw = w * (1.0 - w) * self.mean_confidence[f];
                    dest += dw * (l[b] - est) / total_w;
                }
            }
            let dz = dalpha * (est - self.template[b]) + alpha * dest;
            g += grad.get(0, b) * dz / self.template[b];
        }
        vec![Matrix::scalar(g)]
    }
}

/// Confidence-weighted matched-filter decode of a joint's camera depth from
/// its depth channel pair around the observed keypoint. `None` when too
/// little reliable support remains.
pub fn decode_joint_depth(
    depth: &FeatureGrid,
    confidence: Option<&[f64]>,
    geometry: &GridGeometry,
    joint: usize,
    keypoint: [f64; 2],
    min_support: f64,
) -> Option<f64> {
    let (gy, gx) = geometry.continuous(keypoint);
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..depth.height {
        for c in 0..depth.width {
            let b = geometry.bump(r, c, gy, gx);
            if b < 1e-4 {
                continue;
            }
            let w = confidence.map_or(1.0, |conf| conf[r * depth.width + c]);
            num += w * b * depth.cell(r, c)[2 * joint];
            den += w * b * b;
        }
    }
    (den >= min_support).then(|| num / den)
}

/// Metric 3D joints for one frame: lifted joints scaled so their image-plane
/// spread matches the back-projected keypoints at decoded depths.
pub fn metric_joints(
    lifted: &[Vec3],
    keypoints: &[[f64; 2]],
    depths: &[Option<f64>],
    camera: &CameraModel,
) -> Option<Vec<Vec3>> {
    let valid: Vec<usize> = (0..lifted.len())
        .filter(|&j| depths[j].is_some_and(|z| z > 0.0 && z.is_finite()))
        .collect();
    if valid.len() < 3 {
        return None;
    }
    let metric: Vec<[f64; 2]> = valid
        .iter()
        .map(|&j| {
            let z = depths[j].expect("filtered");
            [
                (keypoints[j][0] - camera.cx) * z / camera.focal,
                -(keypoints[j][1] - camera.cy) * z / camera.focal,
            ]
        })
        .collect();
    let n = valid.len() as f64;
    let mc = [
        metric.iter().map(|m| m[0]).sum::<f64>() / n,
        metric.iter().map(|m| m[1]).sum::<f64>() / n,
    ];
    let lc = [
        valid.iter().map(|&j| lifted[j][0]).sum::<f64>() / n,
        valid.iter().map(|&j| lifted[j][1]).sum::<f64>() / n,
    ];
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &j) in valid.iter().enumerate() {
        let l = [lifted[j][0] - lc[0], lifted[j][1] - lc[1]];
        let m = [metric[k][0] - mc[0], metric[k][1] - mc[1]];
        num += l[0] * m[0] + l[1] * m[1];
        den += l[0] * l[0] + l[1] * l[1];
    }
    let lambda = num / den;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return None;
    }
    Some(lifted.iter().map(|p| scale(*p, lambda)).collect())
}

/// Jacobian of normalised bone-length residuals with respect to shape
/// coefficients (bones × S). Exact because shaping is linear.
pub fn shape_jacobian(template: &BodyTemplate) -> Matrix {
    let bones = template.bone_count();
    let s = template.shape_dims();
    let mut g = Matrix::zeros(bones, s);
    for k in 0..s {
        let joints: Vec<Vec3> = template
            .rest_joints
            .iter()
            .zip(&template.joint_basis[k])
            .map(|(r, d)| crate::rotation::add(*r, *d))
            .collect();
        let lengths = bone_lengths(&joints, &template.tree);
        for b in 0..bones {
            let bar = template.template_bone_lengths[b];
            g.set(b, k, (lengths[b] - bar) / bar);
        }
    }
    g
}

/// Moore–Penrose pseudoinverse of [`shape_jacobian`] (S × bones).
pub fn analytic_shape_weights(template: &BodyTemplate) -> Result<Matrix> {
    let g = shape_jacobian(template);
    let m = DMatrix::from_row_slice(g.rows(), g.cols(), g.data());
    let pinv = m
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidArgument(format!("pseudoinverse failed: {e}")))?;
    let mut out = Matrix::zeros(pinv.nrows(), pinv.ncols());
    for r in 0..pinv.nrows() {
        for c in 0..pinv.ncols() {
            out.set(r, c, pinv[(r, c)]);
        }
    }
    Ok(out)
}

/// Shape coefficients from calibrated lengths through a linear head.
pub fn init_shape(
    calibrated: &[f64],
    template: &BodyTemplate,
    head_weights: &Matrix,
    head_bias: &[f64],
    bound: f64,
) -> Result<ShapeParams> {
    if calibrated.len() != template.bone_count() || head_weights.cols() != calibrated.len() {
        return Err(Error::shape(
            "init_shape",
            format!(
                "{} lengths, {} bones, head {:?}",
                calibrated.len(),
                template.bone_count(),
                head_weights.shape()
            ),
        ));
    }
    let r: Vec<f64> = calibrated
        .iter()
        .zip(&template.template_bone_lengths)
        .map(|(z, t)| (z - t) / t)
        .collect();
    let out = Matrix::row_vector(&r).matmul_t(head_weights);
    Ok(ShapeParams {
        coefficients: out
            .data()
            .iter()
            .zip(head_bias)
            .map(|(v, b)| (v + b).clamp(-bound, bound))
            .collect(),
    })
}

/// How a joint's rotation is obtained from one frame of observed joints.
#[derive(Clone, Debug, PartialEq)]
pub enum ChainLink {
    /// Branching joint: global rotation from two-direction frame alignment.
    Aligned(Mat3),
    /// Single-child joint: unit world direction to the child.
    Bone(Vec3),
    /// Leaf, or a bone whose observed direction was degenerate: twist only.
    Free,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwingChain {
    pub links: Vec<ChainLink>,
    /// Joints whose observed bone or frame was degenerate.
    pub degenerate: Vec<bool>,
}

fn frame_matrix(a: Vec3, b: Vec3) -> Option<Mat3> {
    let e1 = normalize(a)?;
    let e2 = normalize(sub(b, scale(e1, dot(b, e1))))?;
    let e3 = cross(e1, e2);
    Some([
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ])
}

/// Reads bone directions and branching frames off observed joints. Branching
/// joints align two directions (first child, and across the side children).
pub fn swing_chain(template: &BodyTemplate, joints: &[Vec3]) -> SwingChain {
    let n = template.joint_count();
    let mut links = Vec::with_capacity(n);
    let mut degenerate = vec![false; n];
    for k in 0..n {
        let children = template.tree.children(k);
        let link = match template.twist_axis(k) {
            Some(_) if children.len() == 1 => {
                match normalize(sub(joints[children[0]], joints[k])) {
                    Some(d) => ChainLink::Bone(d),
                    None => {
                        degenerate[k] = true;
                        ChainLink::Free
                    }
                }
            }
            Some(_) => ChainLink::Free,
            None => {
                let rest = template.frame_vectors(&template.rest_joints, k);
                let obs = template.frame_vectors(joints, k);
                let aligned = rest.zip(obs).and_then(|((ar, br), (ao, bo))| {
                    Some(mat_mul(&frame_matrix(ao, bo)?, &transpose(&frame_matrix(ar, br)?)))
                });
                match aligned {
                    Some(r) => ChainLink::Aligned(r),
                    None => {
                        degenerate[k] = true;
                        ChainLink::Aligned(IDENTITY3)
                    }
                }
            }
        };
        links.push(link);
    }
    SwingChain { links, degenerate }
}

/// Joints that carry a twist angle, ascending.
pub fn twist_joints(template: &BodyTemplate) -> Vec<usize> {
    (0..template.joint_count())
        .filter(|&j| template.twist_axis(j).is_some())
        .collect()
}

/// Global and local rotations of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrames {
    pub globals: Vec<Mat3>,
    pub locals: Vec<Mat3>,
    /// Swing part of each local rotation (identity for branching joints and leaves).
    pub swings: Vec<Mat3>,
}

/// Root to leaf: each bone direction is expressed in the parent's current
/// frame, the minimal rotation onto it is the swing, and the twist follows
/// about the rest bone axis, so `local = swing · exp(τ u)`.
pub fn compose_pose(template: &BodyTemplate, chain: &SwingChain, tau: &[f64]) -> PoseFrames {
    let n = template.joint_count();
    let mut globals = vec![IDENTITY3; n];
    let mut locals = vec![IDENTITY3; n];
    let mut swings = vec![IDENTITY3; n];
    for k in 0..n {
        let parent = template.tree.parent(k).map_or(IDENTITY3, |p| globals[p]);
        match (&chain.links[k], template.twist_axis(k)) {
            (ChainLink::Aligned(a), _) => {
                globals[k] = *a;
                locals[k] = mat_mul(&transpose(&parent), a);
                continue;
            }
            (ChainLink::Bone(d), Some(u)) => {
                if let Ok(q) = swing_between(u, mat_t_vec(&parent, *d)) {
                    swings[k] = q.to_matrix();
                }
                locals[k] = mat_mul(&swings[k], &exp_so3(scale(u, tau[k])));
            }
            (_, Some(u)) => locals[k] = exp_so3(scale(u, tau[k])),
            (_, None) => {}
        }
        globals[k] = mat_mul(&parent, &locals[k]);
    }
    PoseFrames {
        globals,
        locals,
        swings,
    }
}

/// Twist of each local rotation about its joint's rest bone axis (zero
/// where there is no twist DOF).
pub fn twist_angles(template: &BodyTemplate, locals: &[Mat3]) -> Vec<f64> {
    (0..template.joint_count())
        .map(|k| {
            template.twist_axis(k).map_or(0.0, |u| {
                swing_twist_decompose(UnitQuaternion::from_matrix(&locals[k]), u)
                    .map_or(0.0, |st| st.twist_angle())
            })
        })
        .collect()
}

/// Rotation vectors of local rotations, flattened `[j0x, j0y, j0z, j1x, …]`.
pub fn pose_tokens(locals: &[Mat3]) -> Vec<f64> {
    locals
        .iter()
        .flat_map(|m| UnitQuaternion::from_matrix(m).to_rotation_vector())
        .collect()
}

/// Tape op mapping twist angles of every frame (rows `t · n_twist + k`) to
/// pose tokens (T × 3J).
pub struct PoseComposeOp {
    template: BodyTemplate,
    chains: Vec<SwingChain>,
    twist: Vec<usize>,
}

impl PoseComposeOp {
    pub fn new(template: BodyTemplate, chains: Vec<SwingChain>) -> Self {
        let twist = twist_joints(&template);
        PoseComposeOp {
            template,
            chains,
            twist,
        }
    }

    pub fn twist_count(&self) -> usize {
        self.twist.len()
    }

    fn frame_tau(&self, tau: &Matrix, t: usize) -> Vec<f64> {
        let mut full = vec![0.0; self.template.joint_count()];
        for (k, &j) in self.twist.iter().enumerate() {
            full[j] = tau.get(t * self.twist.len() + k, 0);
        }
        full
    }

    pub fn forward(&self, tau: &Matrix) -> Result<Matrix> {
        let frames = self.chains.len();
        if tau.shape() != (frames * self.twist.len(), 1) {
            return Err(Error::shape(
                "pose_compose",
                format!("tau {:?} for {frames} frames × {} twists", tau.shape(), self.twist.len()),
            ));
        }
        let j = self.template.joint_count();
        let mut out = Matrix::zeros(frames, 3 * j);
        for t in 0..frames {
            let pf = compose_pose(&self.template, &self.chains[t], &self.frame_tau(tau, t));
            out.row_mut(t).copy_from_slice(&pose_tokens(&pf.locals));
        }
        Ok(out)
    }
}

impl CustomOp for PoseComposeOp {
    fn name(&self) -> &'static str {
        "pose_compose"
    }

    // Perturbations are left-multiplied: δG = [ω]× G in world, δL = [λ]× L
    // for locals. A parent perturbation ρ (in the parent frame) moves the
    // observed direction v = G_pᵀ d by v × ρ, and the minimal rotation onto v
    // responds with σ = v × δv − (w · δv / (1 + u·v)) v, w = u × v.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let tau = inputs[0];
        let n = self.template.joint_count();
        let tree = &self.template.tree;
        let mut g_tau = Matrix::zeros(tau.rows(), 1);
        for t in 0..self.chains.len() {
            let chain = &self.chains[t];
            let pf = compose_pose(&self.template, chain, &self.frame_tau(tau, t));
            let mut g_omega = vec![[0.0; 3]; n];
            let mut g_phi = vec![0.0; n];
            for k in (0..n).rev() {
                let a = [
                    output.get(t, 3 * k),
                    output.get(t, 3 * k + 1),
                    output.get(t, 3 * k + 2),
                ];
                let ga = [
                    grad.get(t, 3 * k),
                    grad.get(t, 3 * k + 1),
                    grad.get(t, 3 * k + 2),
                ];
                let mut g_lambda = mat_t_vec(&left_jacobian_inverse(a), ga);
                let parent = tree.parent(k);
                let gp = parent.map_or(IDENTITY3, |p| pf.globals[p]);
                let Some(u) = self.template.twist_axis(k) else {
                    // Branching: λ = −G_pᵀ ω_p.
                    if let Some(p) = parent {
                        g_omega[p] = sub(g_omega[p], mat_vec(&gp, g_lambda));
                    }
                    continue;
                };
                // ω_k = ω_p + G_p λ_k.
                g_lambda = add(g_lambda, mat_t_vec(&gp, g_omega[k]));
                let Some(p) = parent else {
                    g_phi[k] = dot(g_lambda, mat_vec(&pf.swings[k], u));
                    continue;
                };
                g_omega[p] = add(g_omega[p], g_omega[k]);
                match &chain.links[k] {
                    ChainLink::Bone(d) => {
                        let v = mat_t_vec(&gp, *d);
                        g_phi[k] = dot(g_lambda, v);
                        let c = dot(u, v);
                        let w = cross(u, v);
                        let mut g_dv = scale(cross(v, g_lambda), -1.0);
                        if 1.0 + c > 1e-9 {
                            g_dv = sub(g_dv, scale(w, dot(v, g_lambda) / (1.0 + c)));
                        }
                        let g_rho = scale(cross(v, g_dv), -1.0);
                        g_omega[p] = add(g_omega[p], mat_vec(&gp, g_rho));
                    }
                    _ => g_phi[k] = dot(g_lambda, u),
                }
            }
            for (idx, &j) in self.twist.iter().enumerate() {
                g_tau.set(t * self.twist.len() + idx, 0, g_phi[j]);
            }
        }
        vec![g_tau]
    }
}

/// Per-frame motion inputs: lifted pelvis-centred joints and 2D keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTokens {
    pub lifted: Vec<Vec<Vec3>>,
    pub keypoints: Vec<Vec<[f64; 2]>>,
}

impl MotionTokens {
    pub fn new(lifted: Vec<Vec<Vec3>>, keypoints: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        if lifted.is_empty() || lifted.len() != keypoints.len() {
            return Err(Error::shape(
                "MotionTokens::new",
                format!("{} lifted frames, {} keypoint frames", lifted.len(), keypoints.len()),
            ));
        }
        for (l, k) in lifted.iter().zip(&keypoints) {
            if l.len() != k.len() || l.is_empty() {
                return Err(Error::shape("MotionTokens::new", "joint counts differ"));
            }
            if l[0].iter().any(|v| v.abs() > 1e-9) {
                return Err(Error::InvalidArgument("lifted pelvis is not at the origin".into()));
            }
        }
        Ok(MotionTokens { lifted, keypoints })
    }

    pub fn frames(&self) -> usize {
        self.lifted.len()
    }

    pub fn joints(&self) -> usize {
        self.lifted[0].len()
    }

    /// Rows `t · J + j`: `[Ĵ_tj, (u − cx) / (W/2), (v − cy) / (H/2)]`.
    pub fn features(&self, camera: &CameraModel) -> Matrix {
        let (t, j) = (self.frames(), self.joints());
        let mut out = Matrix::zeros(t * j, 5);
        for f in 0..t {
            for k in 0..j {
                let p = self.lifted[f][k];
                let uv = self.keypoints[f][k];
                out.row_mut(f * j + k).copy_from_slice(&[
                    p[0],
                    p[1],
                    p[2],
                    (uv[0] - camera.cx) / (camera.width / 2.0),
                    (uv[1] - camera.cy) / (camera.height / 2.0),
                ]);
            }
        }
        out
    }
}

/// Per-frame bone lengths of depth-decoded metric joints; `None` for frames
/// where fewer than three joints could be decoded.
pub fn observed_bone_lengths(
    obs: &Observation,
    tree: &KinematicTree,
    camera: &CameraModel,
    depth_geometry: &GridGeometry,
    downsample: usize,
    use_confidence: bool,
    min_support: f64,
) -> Vec<Option<Vec<f64>>> {
    (0..obs.frames())
        .map(|t| {
            let depth = &obs.depth[t];
            let full_w = depth.width * downsample;
            let coarse: Vec<f64> = (0..depth.height * depth.width)
                .map(|i| {
                    let (r, c) = (i / depth.width, i % depth.width);
                    obs.confidence[t][r * downsample * full_w + c * downsample]
                })
                .collect();
            let conf = use_confidence.then_some(&coarse[..]);
            let depths: Vec<Option<f64>> = obs.keypoints[t]
                .iter()
                .enumerate()
                .map(|(j, kp)| decode_joint_depth(depth, conf, depth_geometry, j, *kp, min_support))
                .collect();
            metric_joints(&obs.lifted[t], &obs.keypoints[t], &depths, camera)
                .map(|m| bone_lengths(&m, tree))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmapsConfig {
    pub eta_init: f64,
    /// Largest twist angle the head can emit, radians.
    pub twist_max: f64,
    pub attention_width: usize,
    pub kappa_init: f64,
    pub shape_residual_blocks: usize,
    pub shape_bound: f64,
    /// Smallest matched-filter energy accepted when decoding a joint depth.
    pub min_support: f64,
}

impl Default for DmapsConfig {
    fn default() -> Self {
        DmapsConfig {
            eta_init: 4.0,
            twist_max: 1.5,
            attention_width: 16,
            kappa_init: 0.25,
            shape_residual_blocks: 0,
            shape_bound: 5.0,
            min_support: 0.3,
        }
    }
}

impl DmapsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_init > 0.0) || !(self.twist_max > 0.0) || !(self.kappa_init > 0.0) {
            return Err(Error::InvalidArgument(
                "eta_init, twist_max and kappa_init must be positive".into(),
            ));
        }
        if self.attention_width == 0 || !(self.shape_bound > 0.0) || !(self.min_support > 0.0) {
            return Err(Error::InvalidArgument("invalid d-maps sizes".into()));
        }
        Ok(())
    }
}

/// Learned parts of the initialisation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmapsParams {
    /// One row per twist joint over `[fused at joint ‖ 3×3 depth patch]`.
    pub twist_w: Matrix,
    pub twist_b: Matrix,
    pub att_query: Matrix,
    pub att_key: Matrix,
    pub att_out: Matrix,
    pub log_kappa: f64,
    pub eta: f64,
    pub shape_head: LayerParams,
    pub shape_blocks: Vec<(LayerParams, LayerParams)>,
    /// Shape from pooled fused features, used when calibration is off.
    pub baseline_shape: LayerParams,
}

impl DmapsParams {
    pub fn init<R: Rng + ?Sized>(
        config: &DmapsConfig,
        template: &BodyTemplate,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n_twist = twist_joints(template).len();
        let tokens = 3 * template.joint_count();
        let s = template.shape_dims();
        let d = config.attention_width;
        Ok(DmapsParams {
            twist_w: Matrix::zeros(n_twist, 10 * channels),
            twist_b: Matrix::zeros(n_twist, 1),
            att_query: glorot_uniform(rng, d, tokens),
            att_key: glorot_uniform(rng, d, tokens),
            att_out: Matrix::zeros(tokens, tokens),
            log_kappa: config.kappa_init.ln(),
            eta: config.eta_init,
            shape_head: LayerParams {
                weights: analytic_shape_weights(template)?,
                bias: vec![0.0; s],
                kind: Activation::Linear,
            },
            shape_blocks: (0..config.shape_residual_blocks)
                .map(|_| {
                    (
                        LayerParams {
                            weights: glorot_uniform(rng, s, s),
                            bias: vec![0.0; s],
                            kind: Activation::Relu,
                        },
                        LayerParams::zeros(s, s, Activation::Linear),
                    )
                })
                .collect(),
            baseline_shape: LayerParams::zeros(channels, s, Activation::Linear),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmapsIds {
    pub twist_w: ParamId,
    pub twist_b: ParamId,
    pub att_query: ParamId,
    pub att_key: ParamId,
    pub att_out: ParamId,
    pub log_kappa: ParamId,
    pub eta: ParamId,
    pub shape_head: DenseIds,
    pub shape_blocks: Vec<(DenseIds, DenseIds)>,
    pub baseline_shape: DenseIds,
}

impl DmapsIds {
    pub fn register(store: &mut ParamStore, prefix: &str, p: &DmapsParams) -> Self {
        let name = |n: &str| format!("{prefix}.{n}");
        DmapsIds {
            twist_w: store.add(name("twist_w"), p.twist_w.clone()),
            twist_b: store.add(name("twist_b"), p.twist_b.clone()),
            att_query: store.add(name("att_query"), p.att_query.clone()),
            att_key: store.add(name("att_key"), p.att_key.clone()),
            att_out: store.add(name("att_out"), p.att_out.clone()),
            log_kappa: store.add(name("log_kappa"), Matrix::scalar(p.log_kappa)),
            eta: store.add(name("eta"), Matrix::scalar(p.eta)),
            shape_head: DenseIds::register(store, &name("shape_head"), p.shape_head.clone()),
            shape_blocks: p
                .shape_blocks
                .iter()
                .enumerate()
                .map(|(i, (a, b))| {
                    (
                        DenseIds::register(store, &name(&format!("shape_block{i}.in")), a.clone()),
                        DenseIds::register(store, &name(&format!("shape_block{i}.out")), b.clone()),
                    )
                })
                .collect(),
            baseline_shape: DenseIds::register(
                store,
                &name("baseline_shape"),
                p.baseline_shape.clone(),
            ),
        }
    }

    pub fn params(&self, store: &ParamStore) -> DmapsParams {
        DmapsParams {
            twist_w: store.get(self.twist_w).clone(),
            twist_b: store.get(self.twist_b).clone(),
            att_query: store.get(self.att_query).clone(),
            att_key: store.get(self.att_key).clone(),
            att_out: store.get(self.att_out).clone(),
            log_kappa: store.get(self.log_kappa).item(),
            eta: store.get(self.eta).item(),
            shape_head: self.shape_head.layer(store),
            shape_blocks: self
                .shape_blocks
                .iter()
                .map(|(a, b)| (a.layer(store), b.layer(store)))
                .collect(),
            baseline_shape: self.baseline_shape.layer(store),
        }
    }

    /// Twist head and baseline shape head.
    pub fn head_ids(&self) -> Vec<ParamId> {
        vec![
            self.twist_w,
            self.twist_b,
            self.baseline_shape.w,
            self.baseline_shape.b,
        ]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = vec![
            self.twist_w,
            self.twist_b,
            self.att_query,
            self.att_key,
            self.att_out,
            self.log_kappa,
            self.eta,
            self.shape_head.w,
            self.shape_head.b,
        ];
        for (a, b) in &self.shape_blocks {
            out.extend([a.w, a.b, b.w, b.b]);
        }
        out.extend([self.baseline_shape.w, self.baseline_shape.b]);
        out
    }
}

/// Grid cell of each `(frame, twist joint)`, rows `t · n_twist + k`.
pub fn twist_cells(
    keypoints: &[Vec<[f64; 2]>],
    twist: &[usize],
    geometry: &GridGeometry,
) -> Vec<(usize, usize)> {
    keypoints
        .iter()
        .flat_map(|kp| twist.iter().map(move |&j| geometry.cell_of(kp[j])))
        .collect()
}

/// Twist angles `τ_max · tanh(w_k · x + b_k)`, rows `t · n_twist + k`, with `x`
/// the fused feature at the joint's cell followed by the 3×3 depth patch
/// around it (zeros outside the grid). Both streams are frame-stacked
/// `T·H·W × C`.
#[allow(clippy::too_many_arguments)]
pub fn twist_graph(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &DmapsIds,
    fused: Var,
    depth_stream: Var,
    cells: &[(usize, usize)],
    n_twist: usize,
    (height, width): (usize, usize),
    twist_max: f64,
) -> Result<Var> {
    if n_twist == 0 || cells.len() % n_twist != 0 {
        return Err(Error::shape("twist_graph", format!("{} cells", cells.len())));
    }
    let hw = height * width;
    let row_of = |i: usize, dr: isize, dc: isize| -> Vec<usize> {
        let t = i / n_twist;
        let (r, c) = cells[i];
        let (r, c) = (r as isize + dr, c as isize + dc);
        if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
            Vec::new()
        } else {
            vec![t * hw + r as usize * width + c as usize]
        }
    };
    let mut parts =
        vec![tape.gather(fused, Arc::new((0..cells.len()).map(|i| row_of(i, 0, 0)).collect()))?];
    for dr in -1..=1 {
        for dc in -1..=1 {
            let g = Arc::new((0..cells.len()).map(|i| row_of(i, dr, dc)).collect());
            parts.push(tape.gather(depth_stream, g)?);
        }
    }
    let x = tape.concat_cols(&parts)?;
    let w = tape.param(store, ids.twist_w);
    let b = tape.param(store, ids.twist_b);
    let group = Arc::new((0..cells.len()).map(|i| i % n_twist).collect());
    let raw = tape.group_dot(x, w, b, group)?;
    let squashed = tape.tanh(raw)?;
    tape.scale(squashed, twist_max)
}

/// `−(t − s)²` for a sequence of `frames`.
pub fn frame_distance(frames: usize) -> Matrix {
    let mut m = Matrix::zeros(frames, frames);
    for t in 0..frames {
        for s in 0..frames {
            m.set(t, s, -((t as f64 - s as f64).powi(2)));
        }
    }
    m
}

/// `A' = A + (Attn(A W_qᵀ, A W_kᵀ, A; −κ (t − s)²) − A) W_oᵀ` over the
/// per-frame pose tokens `A` (`T × 3J`).
pub fn temporal_graph(tape: &mut Tape, store: &ParamStore, ids: &DmapsIds, tokens: Var) -> Result<Var> {
    let frames = tape.value(tokens).rows();
    let wq = tape.param(store, ids.att_query);
    let wk = tape.param(store, ids.att_key);
    let q = tape.matmul_t(tokens, wq)?;
    let k = tape.matmul_t(tokens, wk)?;
    let width = tape.value(q).cols();
    let log_kappa = tape.param(store, ids.log_kappa);
    let kappa = tape.exp(log_kappa)?;
    let dist = tape.leaf(frame_distance(frames));
    let bias = tape.mul(dist, kappa)?;
    let att = tape.attention(q, k, tokens, Some(bias), 1, 1.0 / (width as f64).sqrt())?;
    let diff = tape.sub(att, tokens)?;
    let wo = tape.param(store, ids.att_out);
    let update = tape.matmul_t(diff, wo)?;
    tape.add(tokens, update)
}

/// Shape from calibrated lengths: normalised residual through the analytic
/// head and optional residual blocks, clamped to `±bound`.
pub fn calibrated_shape_graph(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &DmapsIds,
    calibration: Option<CalibrateOp>,
    bones: usize,
    bound: f64,
) -> Result<Var> {
    let residual = match calibration {
        Some(op) => {
            let eta = tape.param(store, ids.eta);
            let (out, _) = op.forward(tape.value(eta).item())?;
            tape.custom(&[eta], out, Box::new(op))?
        }
        None => tape.leaf(Matrix::zeros(1, bones)),
    };
    let mut h = ids.shape_head.apply(tape, store, residual)?;
    for (a, b) in &ids.shape_blocks {
        let inner = a.apply(tape, store, h)?;
        let out = b.apply(tape, store, inner)?;
        h = tape.add(h, out)?;
    }
    tape.clamp(h, -bound, bound)
}

/// Shape from mean-pooled fused features of the whole sequence.
pub fn baseline_shape_graph(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &DmapsIds,
    fused: Var,
    bound: f64,
) -> Result<Var> {
    let rows = tape.value(fused).rows();
    let pooled = tape.gather(fused, Arc::new(vec![(0..rows).collect()]))?;
    let h = ids.baseline_shape.apply(tape, store, pooled)?;
    tape.clamp(h, -bound, bound)
}
