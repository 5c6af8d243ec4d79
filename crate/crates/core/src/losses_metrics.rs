//! Training objective over posed bodies and the evaluation metrics.
//!
//! Positions are meters internally; metrics report millimeters.

use std::io::Write;
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::body_model::{forward_kinematics_matrices, BodyTemplate, Posed, ShapeParams};
use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Matrix, Tape, Var};
use crate::rotation::{
    add, cross, dot, exp_so3, left_jacobian, mat_mul, mat_t_vec, mat_vec, norm, scale, sub,
    transpose, Mat3, Vec3,
};
use crate::synth::GroundTruth;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mesh: f64,
    pub joint: f64,
    pub pose: f64,
    pub shape: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mesh: 1.0,
            joint: 5.0,
            pose: 1.0,
            shape: 0.1,
            smooth: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mesh, self.joint, self.pose, self.shape, self.smooth];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and >= 0: {all:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mesh: f64,
    pub joint: f64,
    pub pose: f64,
    pub shape: f64,
    pub smooth: f64,
    pub total: f64,
    /// Fewer than three frames, so the smoothness term was forced to zero.
    pub smooth_skipped: bool,
}

/// Supervision for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyTarget {
    pub joints: Vec<Vec<Vec3>>,
    pub vertices: Vec<Vec<Vec3>>,
    pub locals: Vec<Vec<Mat3>>,
    pub shape: Vec<f64>,
    pub translation: Vec<Vec3>,
}

impl BodyTarget {
    pub fn from_truth(truth: &GroundTruth) -> Self {
        BodyTarget {
            joints: truth.joints.clone(),
            vertices: truth.vertices.clone(),
            locals: truth
                .poses
                .iter()
                .map(|p| p.rotations.iter().map(|q| q.to_matrix()).collect())
                .collect(),
            shape: truth.shape.coefficients.clone(),
            translation: truth.poses.iter().map(|p| p.translation).collect(),
        }
    }

    pub fn frames(&self) -> usize {
        self.joints.len()
    }
}

/// Posed joints and vertices of every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BodySequence {
    pub joints: Vec<Vec<Vec3>>,
    pub vertices: Vec<Vec<Vec3>>,
}

/// Forward kinematics and skinning for per-frame local rotations.
pub fn pose_body(
    template: &BodyTemplate,
    locals: &[Vec<Mat3>],
    shape: &[f64],
    translation: &[Vec3],
) -> Result<(BodySequence, Vec<Posed>)> {
    let rest = template.apply_shape(&ShapeParams {
        coefficients: shape.to_vec(),
    })?;
    let mut seq = BodySequence {
        joints: Vec::with_capacity(locals.len()),
        vertices: Vec::with_capacity(locals.len()),
    };
    let mut posed = Vec::with_capacity(locals.len());
    for (l, tr) in locals.iter().zip(translation) {
        let p = forward_kinematics_matrices(&rest.joints, &template.tree, l, *tr)?;
        seq.vertices.push(template.skin_vertices(&rest, &p));
        seq.joints.push(p.joints.clone());
        posed.push(p);
    }
    Ok((seq, posed))
}

fn frobenius_sq(a: &Mat3, b: &Mat3) -> f64 {
    (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| (a[i][j] - b[i][j]).powi(2))
        .sum()
}

/// Every term of the weighted objective.
///
/// `mesh`: mean over vertices of the L1 deviation; `joint`: mean squared
/// joint distance; `pose`: mean squared Frobenius distance of local rotation
/// matrices; `shape`: squared coefficient distance; `smooth`: mean squared
/// second temporal difference of predicted joints.
pub fn total_loss(
    pred: &BodySequence,
    pred_locals: &[Vec<Mat3>],
    pred_shape: &[f64],
    target: &BodyTarget,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let t = target.frames();
    if pred.joints.len() != t
        || pred.vertices.len() != t
        || pred_locals.len() != t
        || pred_shape.len() != target.shape.len()
        || t == 0
    {
        return Err(Error::shape(
            "total_loss",
            format!(
                "{} predicted frames vs {t} target frames, shape {} vs {}",
                pred.joints.len(),
                pred_shape.len(),
                target.shape.len()
            ),
        ));
    }
    let nj = target.joints[0].len();
    let nv = target.vertices[0].len();
    let mut b = LossBreakdown::default();
    for f in 0..t {
        for (p, g) in pred.vertices[f].iter().zip(&target.vertices[f]) {
            b.mesh += (0..3).map(|c| (p[c] - g[c]).abs()).sum::<f64>();
        }
        for (p, g) in pred.joints[f].iter().zip(&target.joints[f]) {
            b.joint += dot(sub(*p, *g), sub(*p, *g));
        }
        for (p, g) in pred_locals[f].iter().zip(&target.locals[f]) {
            b.pose += frobenius_sq(p, g);
        }
    }
    b.mesh /= (t * nv) as f64;
    b.joint /= (t * nj) as f64;
    b.pose /= (t * nj) as f64;
    b.shape = pred_shape
        .iter()
        .zip(&target.shape)
        .map(|(a, c)| (a - c).powi(2))
        .sum();
    if t >= 3 {
        for f in 1..t - 1 {
            for j in 0..nj {
                let acc = second_difference(&pred.joints, f, j);
                b.smooth += dot(acc, acc);
            }
        }
        b.smooth /= ((t - 2) * nj) as f64;
    } else {
        b.smooth_skipped = true;
    }
    b.total = weights.mesh * b.mesh
        + weights.joint * b.joint
        + weights.pose * b.pose
        + weights.shape * b.shape
        + weights.smooth * b.smooth;
    Ok(b)
}

fn second_difference(seq: &[Vec<Vec3>], t: usize, j: usize) -> Vec3 {
    add(sub(seq[t + 1][j], scale(seq[t][j], 2.0)), seq[t - 1][j])
}

/// Local rotations `exp(δ) · exp(a)` from `T × 3J` token matrices.
pub fn compose_locals(base: &Matrix, increments: &Matrix) -> Vec<Vec<Mat3>> {
    let joints = base.cols() / 3;
    (0..base.rows())
        .map(|t| {
            (0..joints)
                .map(|j| {
                    let a = [base.get(t, 3 * j), base.get(t, 3 * j + 1), base.get(t, 3 * j + 2)];
                    let d = [
                        increments.get(t, 3 * j),
                        increments.get(t, 3 * j + 1),
                        increments.get(t, 3 * j + 2),
                    ];
                    mat_mul(&exp_so3(d), &exp_so3(a))
                })
                .collect()
        })
        .collect()
}

/// The objective as a tape node over `(a, δ, s)`: base pose tokens
/// (`T × 3J`), increments (`T × 3J`) and shape (`1 × S`). The root
/// translation is taken from the target.
pub struct BodyLossOp {
    template: BodyTemplate,
    target: BodyTarget,
    weights: LossWeights,
}

impl BodyLossOp {
    pub fn new(template: BodyTemplate, target: BodyTarget, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        Ok(BodyLossOp {
            template,
            target,
            weights,
        })
    }

    fn evaluate(&self, base: &Matrix, inc: &Matrix, shape: &Matrix) -> Result<Evaluated> {
        let t = self.target.frames();
        let nj = self.template.joint_count();
        if base.shape() != (t, 3 * nj) || inc.shape() != base.shape() {
            return Err(Error::shape(
                "body_loss",
                format!("tokens {:?}/{:?} for {t} frames × {nj} joints", base.shape(), inc.shape()),
            ));
        }
        let locals = compose_locals(base, inc);
        let (seq, posed) =
            pose_body(&self.template, &locals, shape.data(), &self.target.translation)?;
        let breakdown = total_loss(&seq, &locals, shape.data(), &self.target, &self.weights)?;
        Ok(Evaluated {
            locals,
            seq,
            posed,
            breakdown,
        })
    }

    pub fn forward(&self, base: &Matrix, inc: &Matrix, shape: &Matrix) -> Result<LossBreakdown> {
        Ok(self.evaluate(base, inc, shape)?.breakdown)
    }

    pub fn apply(self, tape: &mut Tape, base: Var, inc: Var, shape: Var) -> Result<(Var, LossBreakdown)> {
        let b = self.forward(tape.value(base), tape.value(inc), tape.value(shape))?;
        let v = tape.custom(&[base, inc, shape], Matrix::scalar(b.total), Box::new(self))?;
        Ok((v, b))
    }
}

struct Evaluated {
    locals: Vec<Vec<Mat3>>,
    seq: BodySequence,
    posed: Vec<Posed>,
    breakdown: LossBreakdown,
}

fn vee_skew(n: &Mat3) -> Vec3 {
    [n[2][1] - n[1][2], n[0][2] - n[2][0], n[1][0] - n[0][1]]
}

impl CustomOp for BodyLossOp {
    fn name(&self) -> &'static str {
        "body_loss"
    }

    // A left perturbation ω of joint k's global frame rotates everything
    // hanging below k (child joints and the skinned parts of k's subtree)
    // about x_k, so g_ω = Σ (p − x_k) × g_p over those points.
    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let (base, inc, shape) = (inputs[0], inputs[1], inputs[2]);
        let up = grad.item();
        let mut g_base = Matrix::zeros(base.rows(), base.cols());
        let mut g_inc = Matrix::zeros(inc.rows(), inc.cols());
        let mut g_shape = Matrix::zeros(1, shape.cols());
        let Ok(ev) = self.evaluate(base, inc, shape) else {
            return vec![g_base, g_inc, g_shape];
        };
        let w = &self.weights;
        let tpl = &self.template;
        let tree = &tpl.tree;
        let t_len = self.target.frames();
        let nj = tpl.joint_count();
        let nv = tpl.rest_vertices.len();
        let rest = tpl
            .apply_shape(&ShapeParams {
                coefficients: shape.data().to_vec(),
            })
            .expect("validated in forward");

        // Joint-position gradients of every frame (smoothness couples frames).
        let mut g_joints = vec![vec![[0.0; 3]; nj]; t_len];
        let cj = up * w.joint * 2.0 / (t_len * nj) as f64;
        for f in 0..t_len {
            for j in 0..nj {
                g_joints[f][j] = scale(sub(ev.seq.joints[f][j], self.target.joints[f][j]), cj);
            }
        }
        if t_len >= 3 {
            let cs = up * w.smooth * 2.0 / ((t_len - 2) * nj) as f64;
            for f in 1..t_len - 1 {
                for j in 0..nj {
                    let a = scale(second_difference(&ev.seq.joints, f, j), cs);
                    g_joints[f - 1][j] = add(g_joints[f - 1][j], a);
                    g_joints[f][j] = sub(g_joints[f][j], scale(a, 2.0));
                    g_joints[f + 1][j] = add(g_joints[f + 1][j], a);
                }
            }
        }
        let cm = up * w.mesh / (t_len * nv) as f64;
        let cp = up * w.pose * 2.0 / (t_len * nj) as f64;
        let mut g_rest_joints = vec![[0.0; 3]; nj];
        let mut g_rest_verts = vec![[0.0; 3]; nv];

        for f in 0..t_len {
            let posed = &ev.posed[f];
            let mut gx = g_joints[f].clone();
            // Moment and force of the points that move with each joint's frame.
            let mut moment = vec![[0.0; 3]; nj];
            let mut force = vec![[0.0; 3]; nj];
            for v in 0..nv {
                let gv: Vec3 = std::array::from_fn(|c| {
                    let d = ev.seq.vertices[f][v][c] - self.target.vertices[f][v][c];
                    cm * if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                if gv == [0.0; 3] {
                    continue;
                }
                for &(j, wt) in tpl.vertex_weights(v) {
                    let local = sub(rest.vertices[v], rest.joints[j]);
                    let moved = add(mat_vec(&posed.globals[j], local), posed.joints[j]);
                    let g = scale(gv, wt);
                    moment[j] = add(moment[j], cross(moved, g));
                    force[j] = add(force[j], g);
                    gx[j] = add(gx[j], g);
                    let gl = mat_t_vec(&posed.globals[j], g);
                    g_rest_verts[v] = add(g_rest_verts[v], gl);
                    g_rest_joints[j] = sub(g_rest_joints[j], gl);
                }
            }
            // Leaves to root: fold children (their joint plus their subtree) into parents.
            let mut total_gx = gx.clone();
            let mut g_omega = vec![[0.0; 3]; nj];
            for k in (0..nj).rev() {
                let xk = posed.joints[k];
                g_omega[k] = sub(moment[k], cross(xk, force[k]));
                if let Some(p) = tree.parent(k) {
                    let direct = g_joints[f][k];
                    moment[p] = add(add(moment[p], moment[k]), cross(xk, direct));
                    force[p] = add(add(force[p], force[k]), direct);
                    let gk = total_gx[k];
                    total_gx[p] = add(total_gx[p], gk);
                    let gr = mat_t_vec(&posed.globals[p], gk);
                    g_rest_joints[k] = add(g_rest_joints[k], gr);
                    g_rest_joints[p] = sub(g_rest_joints[p], gr);
                } else {
                    g_rest_joints[k] = add(g_rest_joints[k], total_gx[k]);
                }
            }
            for k in 0..nj {
                let gp = tree.parent(k).map_or(crate::rotation::IDENTITY3, |p| posed.globals[p]);
                let r = ev.locals[f][k];
                let diff: Mat3 =
                    std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] - self.target.locals[f][k][i][j]));
                let n = mat_mul(&diff, &transpose(&r));
                let g_lambda = add(mat_t_vec(&gp, g_omega[k]), scale(vee_skew(&n), cp));
                let a = [base.get(f, 3 * k), base.get(f, 3 * k + 1), base.get(f, 3 * k + 2)];
                let d = [inc.get(f, 3 * k), inc.get(f, 3 * k + 1), inc.get(f, 3 * k + 2)];
                let gd = mat_t_vec(&left_jacobian(d), g_lambda);
                let ga = mat_t_vec(&left_jacobian(a), mat_t_vec(&exp_so3(d), g_lambda));
                for c in 0..3 {
                    g_inc.set(f, 3 * k + c, gd[c]);
                    g_base.set(f, 3 * k + c, ga[c]);
                }
            }
        }
        for s in 0..shape.cols() {
            let mut g = 2.0 * up * w.shape * (shape.get(0, s) - self.target.shape[s]);
            g += tpl.joint_basis[s]
                .iter()
                .zip(&g_rest_joints)
                .map(|(b, gr)| dot(*b, *gr))
                .sum::<f64>();
            g += tpl.vertex_basis[s]
                .iter()
                .zip(&g_rest_verts)
                .map(|(b, gr)| dot(*b, *gr))
                .sum::<f64>();
            g_shape.set(0, s, g);
        }
        vec![g_base, g_inc, g_shape]
    }
}

/// Similarity transform `gt ≈ s R pred + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Procrustes {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub aligned: Vec<Vec3>,
    /// Covariance of rank < 2: the rotation is not unique.
    pub degenerate: bool,
}

/// Closed-form least-squares similarity alignment without reflections.
pub fn procrustes_align(pred: &[Vec3], gt: &[Vec3]) -> Result<Procrustes> {
    let n = pred.len();
    if n < 3 || gt.len() != n {
        return Err(Error::shape(
            "procrustes_align",
            format!("{n} predicted, {} target points (need >= 3)", gt.len()),
        ));
    }
    let mean = |pts: &[Vec3]| -> Vec3 {
        let s = pts.iter().fold([0.0; 3], |acc, p| add(acc, *p));
        scale(s, 1.0 / n as f64)
    };
    let (mp, mg) = (mean(pred), mean(gt));
    let gt_spread: f64 = gt.iter().map(|g| dot(sub(*g, mg), sub(*g, mg))).sum();
    if !(gt_spread > 1e-24) {
        return Err(Error::InvalidArgument("target points all coincide".into()));
    }
    let mut cov = Matrix3::<f64>::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (x, y) = (sub(*p, mp), sub(*g, mg));
        var_p += dot(x, x);
        for i in 0..3 {
            for j in 0..3 {
                cov[(i, j)] += y[i] * x[j];
            }
        }
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let sign = if (u.determinant() * v_t.determinant()) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let sv = svd.singular_values;
    let degenerate = sv[1] <= 1e-12 * sv[0].max(1e-300);
    let d = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, sign));
    let r = u * d * v_t;
    let trace = sv[0] + sv[1] + sign * sv[2];
    let s = if var_p > 0.0 { trace / var_p } else { 0.0 };
    let rotation: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]));
    let translation = sub(mg, scale(mat_vec(&rotation, mp), s));
    let aligned = pred
        .iter()
        .map(|p| add(scale(mat_vec(&rotation, *p), s), translation))
        .collect();
    Ok(Procrustes {
        scale: s,
        rotation,
        translation,
        aligned,
        degenerate,
    })
}

fn check_sequences(op: &'static str, pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<()> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape(op, "predicted and target sequences differ in shape"));
    }
    Ok(())
}

/// Root-aligned joint error of one frame in mm, averaged over the non-root joints.
pub fn frame_mpjpe(pred: &[Vec3], gt: &[Vec3], root: usize) -> f64 {
    if pred.len() <= 1 {
        return 0.0;
    }
    let (pr, gr) = (pred[root], gt[root]);
    let total: f64 = (0..pred.len())
        .filter(|&j| j != root)
        .map(|j| norm(sub(sub(pred[j], pr), sub(gt[j], gr))))
        .sum();
    1000.0 * total / (pred.len() - 1) as f64
}

/// Mean per-joint error after root alignment, mm.
pub fn mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], root: usize) -> Result<f64> {
    check_sequences("mpjpe", pred, gt)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("mpjpe of an empty sequence".into()));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| frame_mpjpe(p, g, root)).sum::<f64>() / pred.len() as f64)
}

/// Mean per-joint error after similarity alignment of one frame, mm.
pub fn frame_pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let pa = procrustes_align(pred, gt)?;
    let total: f64 = pa.aligned.iter().zip(gt).map(|(a, g)| norm(sub(*a, *g))).sum();
    Ok(1000.0 * total / gt.len() as f64)
}

pub fn pa_mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    check_sequences("pa_mpjpe", pred, gt)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("pa_mpjpe of an empty sequence".into()));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += frame_pa_mpjpe(p, g)?;
    }
    Ok(total / pred.len() as f64)
}

/// Mean vertex error with each mesh translated by its own root joint, mm.
pub fn mpvpe(
    pred_vertices: &[Vec<Vec3>],
    gt_vertices: &[Vec<Vec3>],
    pred_root: &[Vec3],
    gt_root: &[Vec3],
) -> Result<f64> {
    check_sequences("mpvpe", pred_vertices, gt_vertices)?;
    if pred_root.len() != pred_vertices.len() || gt_root.len() != gt_vertices.len() {
        return Err(Error::shape("mpvpe", "root tracks differ from vertex tracks"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for t in 0..pred_vertices.len() {
        for (p, g) in pred_vertices[t].iter().zip(&gt_vertices[t]) {
            total += norm(sub(sub(*p, pred_root[t]), sub(*g, gt_root[t])));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("mpvpe without vertices".into()));
    }
    Ok(1000.0 * total / count as f64)
}

/// Mean norm of the difference of second-difference accelerations on
/// absolute joints, mm/s².
pub fn accel_error(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], fps: f64) -> Result<f64> {
    check_sequences("accel_error", pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "acceleration needs >= 3 frames, got {}",
            pred.len()
        )));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for t in 1..pred.len() - 1 {
        for j in 0..pred[t].len() {
            let d = sub(second_difference(pred, t, j), second_difference(gt, t, j));
            total += norm(d);
            count += 1;
        }
    }
    Ok(1000.0 * fps * fps * total / count.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub accel: f64,
    pub per_frame_mpjpe: Vec<f64>,
    pub per_frame_pa_mpjpe: Vec<f64>,
}

/// All four metrics for one predicted sequence.
pub fn evaluate_sequence(
    pred: &BodySequence,
    truth: &BodySequence,
    root: usize,
    fps: f64,
) -> Result<MetricReport> {
    check_sequences("evaluate_sequence", &pred.joints, &truth.joints)?;
    let per_frame_mpjpe: Vec<f64> = pred
        .joints
        .iter()
        .zip(&truth.joints)
        .map(|(p, g)| frame_mpjpe(p, g, root))
        .collect();
    let per_frame_pa_mpjpe = pred
        .joints
        .iter()
        .zip(&truth.joints)
        .map(|(p, g)| frame_pa_mpjpe(p, g))
        .collect::<Result<Vec<f64>>>()?;
    let n = per_frame_mpjpe.len() as f64;
    let roots = |s: &BodySequence| s.joints.iter().map(|j| j[root]).collect::<Vec<_>>();
    Ok(MetricReport {
        mpjpe: per_frame_mpjpe.iter().sum::<f64>() / n,
        pa_mpjpe: per_frame_pa_mpjpe.iter().sum::<f64>() / n,
        mpvpe: mpvpe(&pred.vertices, &truth.vertices, &roots(pred), &roots(truth))?,
        accel: accel_error(&pred.joints, &truth.joints, fps)?,
        per_frame_mpjpe,
        per_frame_pa_mpjpe,
    })
}

/// One `metrics.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence: usize,
    pub seed: u64,
    pub frames: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub accel: f64,
}

impl SequenceMetrics {
    pub fn new(sequence: usize, seed: u64, report: &MetricReport) -> Self {
        SequenceMetrics {
            sequence,
            seed,
            frames: report.per_frame_mpjpe.len(),
            mpjpe: report.mpjpe,
            pa_mpjpe: report.pa_mpjpe,
            mpvpe: report.mpvpe,
            accel: report.accel,
        }
    }
}

/// Mean of every metric across sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub sequences: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub accel: f64,
}

pub fn aggregate(rows: &[SequenceMetrics]) -> MetricSummary {
    if rows.is_empty() {
        return MetricSummary::default();
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&SequenceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricSummary {
        sequences: rows.len(),
        mpjpe: mean(|r| r.mpjpe),
        pa_mpjpe: mean(|r| r.pa_mpjpe),
        mpvpe: mean(|r| r.mpvpe),
        accel: mean(|r| r.accel),
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[SequenceMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<SequenceMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::build_template;
    use crate::numerics::{grad_check, ParamStore};
    use crate::rotation::UnitQuaternion;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        [rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)]
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        UnitQuaternion::new_normalized(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .to_matrix()
    }

    #[test]
    fn exact_similarity_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pred: Vec<Vec3> = (0..6).map(|_| rand_vec(&mut rng, 1.0)).collect();
            let r0 = random_rotation(&mut rng);
            let t0 = rand_vec(&mut rng, 2.0);
            let gt: Vec<Vec3> = pred.iter().map(|p| add(scale(mat_vec(&r0, *p), 2.0), t0)).collect();
            let pa = procrustes_align(&pred, &gt).unwrap();
            assert!((pa.scale - 2.0).abs() < 1e-9);
            for (a, g) in pa.aligned.iter().zip(&gt) {
                assert!(norm(sub(*a, *g)) < 1e-9);
            }
            let det = crate::rotation::determinant(&pa.rotation);
            assert!((det - 1.0).abs() < 1e-9);
        }
        let pts: Vec<Vec3> = (0..5).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let pa = procrustes_align(&pts, &pts).unwrap();
        assert!((pa.scale - 1.0).abs() < 1e-12);
        assert!(norm(pa.translation) < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((pa.rotation[i][j] - id).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reflections_are_excluded() {
        let pred = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.3, 0.2, 0.1]];
        let gt: Vec<Vec3> = pred.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let pa = procrustes_align(&pred, &gt).unwrap();
        assert!((crate::rotation::determinant(&pa.rotation) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn procrustes_errors() {
        let p = vec![[0.0; 3]; 2];
        assert!(procrustes_align(&p, &p).is_err());
        let q = vec![[1.0, 2.0, 3.0]; 4];
        let r = vec![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
        assert!(procrustes_align(&r, &q).is_err());
        let collinear: Vec<Vec3> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        let pa = procrustes_align(&collinear, &collinear).unwrap();
        assert!(pa.degenerate);
        for (a, g) in pa.aligned.iter().zip(&collinear) {
            assert!(norm(sub(*a, *g)) < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pre_applied_similarity_is_invisible(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<Vec3> = (0..7).map(|_| rand_vec(&mut rng, 1.0)).collect();
            let gt: Vec<Vec3> = (0..7).map(|_| rand_vec(&mut rng, 1.0)).collect();
            let r = random_rotation(&mut rng);
            let s = rng.random_range(0.3..3.0);
            let t = rand_vec(&mut rng, 2.0);
            let moved: Vec<Vec3> = pred.iter().map(|p| add(scale(mat_vec(&r, *p), s), t)).collect();
            let res = |a: &Procrustes| a.aligned.iter().zip(&gt).map(|(x, g)| dot(sub(*x, *g), sub(*x, *g))).sum::<f64>();
            let a = procrustes_align(&pred, &gt).unwrap();
            let b = procrustes_align(&moved, &gt).unwrap();
            prop_assert!((res(&a) - res(&b)).abs() < 1e-9);
        }

        #[test]
        fn pa_never_exceeds_root_aligned(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: Vec<Vec3> = (0..8).map(|_| rand_vec(&mut rng, 1.0)).collect();
            let pred: Vec<Vec3> = gt.iter().map(|g| add(*g, rand_vec(&mut rng, 0.2))).collect();
            let m = frame_mpjpe(&pred, &gt, 0);
            let pa = frame_pa_mpjpe(&pred, &gt).unwrap();
            prop_assert!(pa <= m + 1e-9);
        }
    }

    #[test]
    fn mpjpe_examples() {
        let gt = vec![vec![[0.0, 0.0, 3.0], [0.1, 0.2, 3.0]]];
        assert_eq!(mpjpe(&gt, &gt, 0).unwrap(), 0.0);
        let shifted: Vec<Vec<Vec3>> =
            vec![gt[0].iter().map(|p| add(*p, [0.5, -1.0, 2.0])).collect()];
        assert!(mpjpe(&shifted, &gt, 0).unwrap() < 1e-9);
        let off = vec![vec![[0.003, 0.004, 3.0], [0.1, 0.2, 3.0]]];
        assert!((mpjpe(&off, &gt, 1).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn accel_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<Vec<Vec3>> =
            (0..6).map(|_| (0..3).map(|_| rand_vec(&mut rng, 1.0)).collect()).collect();
        assert_eq!(accel_error(&gt, &gt, 30.0).unwrap(), 0.0);
        let offset: Vec<Vec<Vec3>> =
            gt.iter().map(|f| f.iter().map(|p| add(*p, [0.2, 0.1, -0.3])).collect()).collect();
        assert!(accel_error(&offset, &gt, 30.0).unwrap() < 1e-6);
        let drift: Vec<Vec<Vec3>> = gt
            .iter()
            .enumerate()
            .map(|(t, f)| f.iter().map(|p| add(*p, scale([0.01, -0.02, 0.03], t as f64))).collect())
            .collect();
        assert!(accel_error(&drift, &gt, 30.0).unwrap() < 1e-6);
        assert!(accel_error(&gt[..2], &gt[..2], 30.0).is_err());
        // One joint displaced at the middle frame of three: |Δa| = 2 · 0.001 m · fps².
        let mut bump = gt[..3].to_vec();
        bump[1][0] = add(bump[1][0], [0.001, 0.0, 0.0]);
        let want = 1000.0 * 900.0 * 0.002 / 3.0;
        assert!((accel_error(&bump, &gt[..3], 30.0).unwrap() - want).abs() < 1e-6);
    }

    fn small_case(seed: u64, frames: usize) -> (BodyTemplate, BodyTarget, Matrix, Matrix, Matrix) {
        let tpl = build_template(6, 2, 12, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nj = tpl.joint_count();
        let gt_locals: Vec<Vec<Mat3>> = (0..frames)
            .map(|_| (0..nj).map(|_| exp_so3(rand_vec(&mut rng, 0.6))).collect())
            .collect();
        let gt_shape = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let trans: Vec<Vec3> = (0..frames).map(|t| [0.1 * t as f64, 0.0, 3.0]).collect();
        let (seq, _) = pose_body(&tpl, &gt_locals, &gt_shape, &trans).unwrap();
        let target = BodyTarget {
            joints: seq.joints,
            vertices: seq.vertices,
            locals: gt_locals,
            shape: gt_shape,
            translation: trans,
        };
        let rnd = |rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-s..s)).collect()).unwrap()
        };
        let base = rnd(&mut rng, frames, 3 * nj, 0.8);
        let inc = rnd(&mut rng, frames, 3 * nj, 0.3);
        let shape = rnd(&mut rng, 1, 2, 1.0);
        (tpl, target, base, inc, shape)
    }

    #[test]
    fn loss_gradients() {
        for (seed, frames) in [(3, 4), (4, 2), (5, 5)] {
            let (tpl, target, base, inc, shape) = small_case(seed, frames);
            let mut store = ParamStore::new();
            let ib = store.add("base", base);
            let ii = store.add("inc", inc);
            let is = store.add("shape", shape);
            let weights = LossWeights {
                mesh: 0.7,
                joint: 3.0,
                pose: 1.3,
                shape: 0.4,
                smooth: 2.0,
            };
            let f = |flat: &[f64]| -> Result<(f64, Vec<f64>)> {
                let mut s = store.clone();
                s.unflatten(flat)?;
                let mut tape = Tape::new();
                let (b, i, sh) = (tape.param(&s, ib), tape.param(&s, ii), tape.param(&s, is));
                let op = BodyLossOp::new(tpl.clone(), target.clone(), weights)?;
                let (loss, _) = op.apply(&mut tape, b, i, sh)?;
                let scaled = tape.scale(loss, 1.7)?;
                let g = tape.backward(&[(scaled, Matrix::scalar(1.0))])?;
                let mut acc = s.zeros_like();
                g.accumulate_params(&mut acc);
                Ok((tape.value(scaled).item(), acc.iter().flat_map(|m| m.data().to_vec()).collect()))
            };
            let report = grad_check(f, &store.flatten(), None, 1e-5, 1e-5).unwrap();
            assert!(report.passed(), "frames {frames}: {report:?}");
        }
    }

    #[test]
    fn truth_has_zero_loss() {
        let (tpl, target, _, _, _) = small_case(6, 4);
        let pred = BodySequence {
            joints: target.joints.clone(),
            vertices: target.vertices.clone(),
        };
        let w = LossWeights {
            smooth: 0.0,
            ..LossWeights::default()
        };
        let b = total_loss(&pred, &target.locals, &target.shape, &target, &w).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(!b.smooth_skipped);
        let op = BodyLossOp::new(tpl.clone(), target.clone(), w).unwrap();
        let zero = Matrix::zeros(4, 3 * tpl.joint_count());
        let base = Matrix::from_vec(
            4,
            3 * tpl.joint_count(),
            target
                .locals
                .iter()
                .flat_map(|f| f.iter().flat_map(|r| UnitQuaternion::from_matrix(r).to_rotation_vector()))
                .collect(),
        )
        .unwrap();
        let shape = Matrix::from_vec(1, target.shape.len(), target.shape.clone()).unwrap();
        assert!(op.forward(&base, &zero, &shape).unwrap().total < 1e-12);
    }

    #[test]
    fn hand_instance() {
        let target = BodyTarget {
            joints: vec![vec![[0.0; 3], [0.0, 1.0, 0.0]]],
            vertices: vec![vec![[0.0; 3], [1.0, 1.0, 1.0]]],
            locals: vec![vec![crate::rotation::IDENTITY3; 2]],
            shape: vec![0.5],
            translation: vec![[0.0; 3]],
        };
        let pred = BodySequence {
            joints: vec![vec![[0.0; 3], [0.0, 1.0, 0.2]]],
            vertices: vec![vec![[0.1, 0.0, 0.0], [1.0, 0.7, 1.2]]],
        };
        let rz = exp_so3([0.0, 0.0, 0.5]);
        let locals = vec![vec![crate::rotation::IDENTITY3, rz]];
        let w = LossWeights {
            mesh: 1.0,
            joint: 1.0,
            pose: 1.0,
            shape: 1.0,
            smooth: 1.0,
        };
        let b = total_loss(&pred, &locals, &[0.25], &target, &w).unwrap();
        assert!((b.mesh - (0.1 + 0.3 + 0.2) / 2.0).abs() < 1e-15);
        assert!((b.joint - 0.04 / 2.0).abs() < 1e-15);
        // ‖R_z(θ) − I‖² = 4 (1 − cos θ).
        assert!((b.pose - 4.0 * (1.0 - 0.5f64.cos()) / 2.0).abs() < 1e-15);
        assert!((b.shape - 0.0625).abs() < 1e-15);
        assert!(b.smooth_skipped && b.smooth == 0.0);
        assert!((b.total - (b.mesh + b.joint + b.pose + b.shape)).abs() < 1e-15);
    }

    #[test]
    fn constant_velocity_is_smooth() {
        let (_, target, _, _, _) = small_case(7, 5);
        let v = [0.02, -0.01, 0.03];
        let joints: Vec<Vec<Vec3>> = (0..5)
            .map(|t| target.joints[0].iter().map(|p| add(*p, scale(v, t as f64))).collect())
            .collect();
        let pred = BodySequence {
            joints,
            vertices: target.vertices.clone(),
        };
        let b = total_loss(&pred, &target.locals, &target.shape, &target, &LossWeights::default())
            .unwrap();
        assert!(b.smooth < 1e-28);
    }

    #[test]
    fn metric_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            SequenceMetrics {
                sequence: 0,
                seed: 9,
                frames: 16,
                mpjpe: 10.5,
                pa_mpjpe: 7.25,
                mpvpe: 12.0,
                accel: 3.0,
            },
            SequenceMetrics {
                sequence: 1,
                seed: 10,
                frames: 16,
                mpjpe: 20.5,
                pa_mpjpe: 9.25,
                mpvpe: 14.0,
                accel: 5.0,
            },
        ];
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &rows).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
        let agg = aggregate(&rows);
        assert_eq!(agg.mpjpe, 15.5);
        assert_eq!(agg.accel, 4.0);
    }
}
