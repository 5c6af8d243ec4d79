//! Motion-depth aligned refinement.
//!
//! Motion tokens (one per frame and joint) attend to the fused feature
//! tokens of their own frame in two stacked cross-attention blocks; the
//! resulting context drives gated residuals on a flattened per-frame
//! parameter vector `x_t = [pose rotation vectors ‖ shape]`, smoothed by a
//! causal recurrence anchored on the initialisation track.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::{PoseParams, ShapeParams};
use crate::error::{Error, Result};
use crate::fusion::frame_groups;
use crate::numerics::{
    glorot_uniform, Activation, CustomOp, DenseIds, LayerParams, Matrix, ParamId, ParamStore,
    Tape, Var,
};
use crate::rotation::{UnitQuaternion, Vec3};

/// Features per motion token: lifted joint (3) and normalised keypoint (2).
pub const MOTION_FEATURES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModarConfig {
    pub width: usize,
    pub ffn_hidden: usize,
    /// Largest per-joint norm of a pose residual, radians.
    pub pose_clamp: f64,
    pub rho_init: f64,
}

impl Default for ModarConfig {
    fn default() -> Self {
        ModarConfig {
            width: 16,
            ffn_hidden: 32,
            pose_clamp: 0.5,
            rho_init: 0.7,
        }
    }
}

impl ModarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.ffn_hidden == 0 {
            return Err(Error::InvalidArgument("modar widths must be positive".into()));
        }
        if !(self.pose_clamp > 0.0) {
            return Err(Error::InvalidArgument("pose_clamp must be positive".into()));
        }
        if !(self.rho_init > 0.0 && self.rho_init <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho_init {} outside (0, 1]",
                self.rho_init
            )));
        }
        Ok(())
    }

    /// Logit of `ρ`; `ρ = 1` maps to a logit whose sigmoid rounds to 1.
    pub fn rho_logit(&self) -> f64 {
        if self.rho_init >= 1.0 {
            40.0
        } else {
            (self.rho_init / (1.0 - self.rho_init)).ln()
        }
    }
}

/// One cross-attention block: projections of queries, keys, values and the
/// output projection of its residual branch. Keys carry no bias: softmax
/// rows are invariant to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: LayerParams,
    pub key: Matrix,
    pub value: LayerParams,
    pub output: LayerParams,
}

impl AttentionParams {
    fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let lin = |w: Matrix| LayerParams {
            weights: w,
            bias: vec![0.0; d],
            kind: Activation::Linear,
        };
        AttentionParams {
            query: lin(glorot_uniform(rng, d, d)),
            key: glorot_uniform(rng, d, d),
            value: lin(glorot_uniform(rng, d, d)),
            output: LayerParams::zeros(d, d, Activation::Linear),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModarParams {
    pub embed: LayerParams,
    pub joint_embed: Matrix,
    pub fused_proj: LayerParams,
    pub block1: AttentionParams,
    pub block2: AttentionParams,
    pub ln_gain: Vec<f64>,
    pub ln_offset: Vec<f64>,
    pub ffn_in: LayerParams,
    pub ffn_out: LayerParams,
    pub pose_delta: LayerParams,
    pub pose_gate: LayerParams,
    pub shape_delta: LayerParams,
    pub shape_gate: LayerParams,
    pub rho_logit: f64,
}

impl ModarParams {
    /// Residual branches and both delta heads start at zero, so the pass is
    /// an exact no-op apart from the temporal filter.
    pub fn init<R: Rng + ?Sized>(
        config: &ModarConfig,
        joints: usize,
        channels: usize,
        shape_dims: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.width;
        let joint_embed = Matrix::from_vec(
            joints,
            d,
            (0..joints * d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .expect("sized");
        ModarParams {
            embed: LayerParams {
                weights: glorot_uniform(rng, d, MOTION_FEATURES),
                bias: vec![0.0; d],
                kind: Activation::Linear,
            },
            joint_embed,
            fused_proj: LayerParams {
                weights: glorot_uniform(rng, d, channels),
                bias: vec![0.0; d],
                kind: Activation::Linear,
            },
            block1: AttentionParams::init(d, rng),
            block2: AttentionParams::init(d, rng),
            ln_gain: vec![1.0; d],
            ln_offset: vec![0.0; d],
            ffn_in: LayerParams {
                weights: glorot_uniform(rng, config.ffn_hidden, d),
                bias: vec![0.0; config.ffn_hidden],
                kind: Activation::Relu,
            },
            ffn_out: LayerParams::zeros(config.ffn_hidden, d, Activation::Linear),
            pose_delta: LayerParams::zeros(d, 3, Activation::Linear),
            pose_gate: LayerParams {
                weights: glorot_uniform(rng, 3, d),
                bias: vec![0.0; 3],
                kind: Activation::Sigmoid,
            },
            shape_delta: LayerParams::zeros(d, shape_dims, Activation::Linear),
            shape_gate: LayerParams {
                weights: glorot_uniform(rng, shape_dims, d),
                bias: vec![0.0; shape_dims],
                kind: Activation::Sigmoid,
            },
            rho_logit: config.rho_logit(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionIds {
    pub query: DenseIds,
    pub key: ParamId,
    pub value: DenseIds,
    pub output: DenseIds,
}

impl AttentionIds {
    fn register(store: &mut ParamStore, prefix: &str, p: &AttentionParams) -> Self {
        AttentionIds {
            query: DenseIds::register(store, &format!("{prefix}.query"), p.query.clone()),
            key: store.add(format!("{prefix}.key"), p.key.clone()),
            value: DenseIds::register(store, &format!("{prefix}.value"), p.value.clone()),
            output: DenseIds::register(store, &format!("{prefix}.output"), p.output.clone()),
        }
    }

    fn params(&self, store: &ParamStore) -> AttentionParams {
        AttentionParams {
            query: self.query.layer(store),
            key: store.get(self.key).clone(),
            value: self.value.layer(store),
            output: self.output.layer(store),
        }
    }

    fn ids(&self) -> [ParamId; 7] {
        [
            self.query.w,
            self.query.b,
            self.key,
            self.value.w,
            self.value.b,
            self.output.w,
            self.output.b,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModarIds {
    pub embed: DenseIds,
    pub joint_embed: ParamId,
    pub fused_proj: DenseIds,
    pub block1: AttentionIds,
    pub block2: AttentionIds,
    pub ln_gain: ParamId,
    pub ln_offset: ParamId,
    pub ffn_in: DenseIds,
    pub ffn_out: DenseIds,
    pub pose_delta: DenseIds,
    pub pose_gate: DenseIds,
    pub shape_delta: DenseIds,
    pub shape_gate: DenseIds,
    pub rho_logit: ParamId,
}

impl ModarIds {
    pub fn register(store: &mut ParamStore, prefix: &str, p: &ModarParams) -> Self {
        let name = |n: &str| format!("{prefix}.{n}");
        ModarIds {
            embed: DenseIds::register(store, &name("embed"), p.embed.clone()),
            joint_embed: store.add(name("joint_embed"), p.joint_embed.clone()),
            fused_proj: DenseIds::register(store, &name("fused_proj"), p.fused_proj.clone()),
            block1: AttentionIds::register(store, &name("block1"), &p.block1),
            block2: AttentionIds::register(store, &name("block2"), &p.block2),
            ln_gain: store.add(name("ln_gain"), Matrix::row_vector(&p.ln_gain)),
            ln_offset: store.add(name("ln_offset"), Matrix::row_vector(&p.ln_offset)),
            ffn_in: DenseIds::register(store, &name("ffn_in"), p.ffn_in.clone()),
            ffn_out: DenseIds::register(store, &name("ffn_out"), p.ffn_out.clone()),
            pose_delta: DenseIds::register(store, &name("pose_delta"), p.pose_delta.clone()),
            pose_gate: DenseIds::register(store, &name("pose_gate"), p.pose_gate.clone()),
            shape_delta: DenseIds::register(store, &name("shape_delta"), p.shape_delta.clone()),
            shape_gate: DenseIds::register(store, &name("shape_gate"), p.shape_gate.clone()),
            rho_logit: store.add(name("rho_logit"), Matrix::scalar(p.rho_logit)),
        }
    }

    pub fn params(&self, store: &ParamStore) -> ModarParams {
        ModarParams {
            embed: self.embed.layer(store),
            joint_embed: store.get(self.joint_embed).clone(),
            fused_proj: self.fused_proj.layer(store),
            block1: self.block1.params(store),
            block2: self.block2.params(store),
            ln_gain: store.get(self.ln_gain).data().to_vec(),
            ln_offset: store.get(self.ln_offset).data().to_vec(),
            ffn_in: self.ffn_in.layer(store),
            ffn_out: self.ffn_out.layer(store),
            pose_delta: self.pose_delta.layer(store),
            pose_gate: self.pose_gate.layer(store),
            shape_delta: self.shape_delta.layer(store),
            shape_gate: self.shape_gate.layer(store),
            rho_logit: store.get(self.rho_logit).item(),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.embed.w, self.embed.b, self.joint_embed];
        out.extend([self.fused_proj.w, self.fused_proj.b]);
        out.extend(self.block1.ids());
        out.extend(self.block2.ids());
        out.extend([self.ln_gain, self.ln_offset]);
        for d in [
            &self.ffn_in,
            &self.ffn_out,
            &self.pose_delta,
            &self.pose_gate,
            &self.shape_delta,
            &self.shape_gate,
        ] {
            out.extend([d.w, d.b]);
        }
        out.push(self.rho_logit);
        out
    }
}

/// Token counts of one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub frames: usize,
    pub joints: usize,
    /// Fused tokens per frame.
    pub cells: usize,
}

/// Per-frame interleave of two frame-stacked streams: rows of frame `t` of
/// `a` (`na` per frame) followed by those of `b` (`nb` per frame), where `b`
/// rows are offset by `a_total` in the concatenation `[a; b]`.
pub fn interleave_groups(frames: usize, na: usize, nb: usize) -> Arc<Vec<Vec<usize>>> {
    let a_total = frames * na;
    Arc::new(
        (0..frames)
            .flat_map(|t| {
                (0..na)
                    .map(move |i| vec![t * na + i])
                    .chain((0..nb).map(move |i| vec![a_total + t * nb + i]))
            })
            .collect(),
    )
}

fn attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &AttentionIds,
    queries: Var,
    memory: Var,
    frames: usize,
) -> Result<Var> {
    let q = ids.query.apply(tape, store, queries)?;
    let kw = tape.param(store, ids.key);
    let k = tape.matmul_t(memory, kw)?;
    let v = ids.value.apply(tape, store, memory)?;
    let width = tape.value(q).cols();
    let att = tape.attention(q, k, v, None, frames, 1.0 / (width as f64).sqrt())?;
    let out = ids.output.apply(tape, store, att)?;
    tape.add(queries, out)
}

/// Context features `F'` (`T·J × d`), rows `t · J + j`.
///
/// `motion` is `T·J × 5`, `fused` is `T·cells × C`. Block 1 attends from the
/// motion tokens to the projected fused tokens of the same frame; block 2
/// attends from its output to that output and the fused tokens together.
pub fn build_context(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &ModarIds,
    motion: Var,
    fused: Var,
    layout: TokenLayout,
) -> Result<Var> {
    let TokenLayout {
        frames,
        joints,
        cells,
    } = layout;
    if tape.value(motion).rows() != frames * joints {
        return Err(Error::shape(
            "build_context",
            format!(
                "{} motion tokens for {frames} frames × {joints} joints",
                tape.value(motion).rows()
            ),
        ));
    }
    if tape.value(fused).rows() != frames * cells {
        return Err(Error::shape(
            "build_context",
            format!(
                "{} fused tokens for {frames} frames × {cells} cells",
                tape.value(fused).rows()
            ),
        ));
    }
    let embedded = ids.embed.apply(tape, store, motion)?;
    let je = tape.param(store, ids.joint_embed);
    let tiled = tape.gather(
        je,
        Arc::new((0..frames * joints).map(|i| vec![i % joints]).collect()),
    )?;
    let tokens = tape.add(embedded, tiled)?;
    let memory = ids.fused_proj.apply(tape, store, fused)?;
    let h1 = attention_block(tape, store, &ids.block1, tokens, memory, frames)?;
    let stacked = tape.concat_rows(&[h1, memory])?;
    let memory2 = tape.gather(stacked, interleave_groups(frames, joints, cells))?;
    let h2 = attention_block(tape, store, &ids.block2, h1, memory2, frames)?;
    let gain = tape.param(store, ids.ln_gain);
    let offset = tape.param(store, ids.ln_offset);
    let normed = tape.layer_norm(h2, gain, offset, 1e-5)?;
    let hidden = ids.ffn_in.apply(tape, store, normed)?;
    let ffn = ids.ffn_out.apply(tape, store, hidden)?;
    tape.add(normed, ffn)
}

/// `x_t = (1 − ρ) x_{t−1} + ρ (x0_t + r_t)` with `x_{−1} = x0_0`.
pub fn causal_filter(x0: &Matrix, residual: &Matrix, rho: f64) -> Result<Matrix> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside (0, 1]")));
    }
    if x0.shape() != residual.shape() || x0.rows() == 0 {
        return Err(Error::shape(
            "causal_filter",
            format!("x0 {:?} vs residual {:?}", x0.shape(), residual.shape()),
        ));
    }
    let mut out = Matrix::zeros(x0.rows(), x0.cols());
    let mut prev = x0.row(0).to_vec();
    for t in 0..x0.rows() {
        let row = out.row_mut(t);
        for k in 0..x0.cols() {
            row[k] = (1.0 - rho) * prev[k] + rho * (x0.get(t, k) + residual.get(t, k));
        }
        prev.copy_from_slice(row);
    }
    Ok(out)
}

/// Tape op for [`causal_filter`]; inputs `x0`, residual, `ρ` (1×1).
pub struct CausalFilterOp;

impl CausalFilterOp {
    pub fn apply(tape: &mut Tape, x0: Var, residual: Var, rho: Var) -> Result<Var> {
        let out = causal_filter(tape.value(x0), tape.value(residual), tape.value(rho).item())?;
        tape.custom(&[x0, residual, rho], out, Box::new(CausalFilterOp))
    }
}

impl CustomOp for CausalFilterOp {
    fn name(&self) -> &'static str {
        "causal_filter"
    }

    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let (x0, r, rho) = (inputs[0], inputs[1], inputs[2].item());
        let (rows, cols) = x0.shape();
        let mut g_x0 = Matrix::zeros(rows, cols);
        let mut g_r = Matrix::zeros(rows, cols);
        let mut g_rho = 0.0;
        let mut carry = vec![0.0; cols];
        for t in (0..rows).rev() {
            for k in 0..cols {
                let gx = grad.get(t, k) + (1.0 - rho) * carry[k];
                carry[k] = gx;
                let prev = if t == 0 { x0.get(0, k) } else { output.get(t - 1, k) };
                g_rho += gx * (x0.get(t, k) + r.get(t, k) - prev);
                g_x0.set(t, k, g_x0.get(t, k) + rho * gx);
                g_r.set(t, k, rho * gx);
            }
        }
        for k in 0..cols {
            g_x0.set(0, k, g_x0.get(0, k) + (1.0 - rho) * carry[k]);
        }
        vec![g_x0, g_r, Matrix::scalar(g_rho)]
    }
}

/// Rescales every consecutive triple of columns to norm at most `limit`.
pub struct NormClampOp {
    pub limit: f64,
}

impl NormClampOp {
    pub fn forward(a: &Matrix, limit: f64) -> Result<Matrix> {
        if a.cols() % 3 != 0 {
            return Err(Error::shape(
                "norm_clamp",
                format!("{} columns are not triples", a.cols()),
            ));
        }
        let mut out = a.clone();
        for r in 0..out.rows() {
            for v in out.row_mut(r).chunks_mut(3) {
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > limit {
                    for x in v {
                        *x *= limit / n;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn apply(tape: &mut Tape, a: Var, limit: f64) -> Result<Var> {
        let out = Self::forward(tape.value(a), limit)?;
        tape.custom(&[a], out, Box::new(NormClampOp { limit }))
    }
}

impl CustomOp for NormClampOp {
    fn name(&self) -> &'static str {
        "norm_clamp"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let a = inputs[0];
        let mut g = grad.clone();
        for r in 0..a.rows() {
            for (v, gv) in a.row(r).chunks(3).zip(g.row_mut(r).chunks_mut(3)) {
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > self.limit {
                    let u = [v[0] / n, v[1] / n, v[2] / n];
                    let proj = u[0] * gv[0] + u[1] * gv[1] + u[2] * gv[2];
                    for k in 0..3 {
                        gv[k] = self.limit / n * (gv[k] - proj * u[k]);
                    }
                }
            }
        }
        vec![g]
    }
}

/// Refined parameter tracks of one sequence.
pub struct RefineGraph {
    /// Filtered pose rotation vectors, `T × 3J`.
    pub pose: Var,
    /// Increments to compose onto the initial local rotations, `T × 3J`.
    pub increments: Var,
    /// Per-sequence shape, `1 × S`, clamped.
    pub shape: Var,
    pub pose_gate: Var,
    pub shape_gate: Var,
    pub rho: Var,
}

/// Gated residuals on `x0_t = [pose_init_t ‖ shape_init]` followed by the
/// causal filter. `pose_init` is `T × 3J`, `shape_init` `1 × S`.
#[allow(clippy::too_many_arguments)]
pub fn refine_graph(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &ModarIds,
    context: Var,
    pose_init: Var,
    shape_init: Var,
    layout: TokenLayout,
    pose_clamp: f64,
    shape_bound: f64,
) -> Result<RefineGraph> {
    let TokenLayout { frames, joints, .. } = layout;
    if tape.value(pose_init).shape() != (frames, 3 * joints) {
        return Err(Error::shape(
            "refine",
            format!("pose_init {:?}", tape.value(pose_init).shape()),
        ));
    }
    let shape_dims = tape.value(shape_init).cols();
    let delta = ids.pose_delta.apply(tape, store, context)?;
    let pose_gate = ids.pose_gate.apply(tape, store, context)?;
    let gated = tape.mul(pose_gate, delta)?;
    let flat = tape.reshape(gated, frames, 3 * joints)?;
    let pose_res = NormClampOp::apply(tape, flat, pose_clamp)?;

    let pooled = tape.gather(context, frame_groups(frames, joints))?;
    let sdelta = ids.shape_delta.apply(tape, store, pooled)?;
    let shape_gate = ids.shape_gate.apply(tape, store, pooled)?;
    let shape_res = tape.mul(shape_gate, sdelta)?;

    let shape_rows = tape.gather(shape_init, Arc::new(vec![vec![0]; frames]))?;
    let x0 = tape.concat_cols(&[pose_init, shape_rows])?;
    let residual = tape.concat_cols(&[pose_res, shape_res])?;
    let logit = tape.param(store, ids.rho_logit);
    let rho = tape.sigmoid(logit)?;
    let x = CausalFilterOp::apply(tape, x0, residual, rho)?;

    let pose = tape.slice_cols(x, 0, 3 * joints)?;
    let increments = tape.sub(pose, pose_init)?;
    // Averaging the offsets rather than the tracks keeps the no-op exact.
    let shape_track = tape.slice_cols(x, 3 * joints, shape_dims)?;
    let offsets = tape.sub(shape_track, shape_rows)?;
    let mean_offset = tape.gather(offsets, Arc::new(vec![(0..frames).collect()]))?;
    let raw_shape = tape.add(shape_init, mean_offset)?;
    let shape = tape.clamp(raw_shape, -shape_bound, shape_bound)?;
    Ok(RefineGraph {
        pose,
        increments,
        shape,
        pose_gate,
        shape_gate,
        rho,
    })
}

/// Left-composes per-joint axis-angle increments onto the initial pose and
/// clamps the refined shape.
pub fn apply_refinement(
    pose_init: &[PoseParams],
    shape: &[f64],
    increments: &[Vec<Vec3>],
    bound: f64,
) -> Result<(Vec<PoseParams>, ShapeParams)> {
    if pose_init.len() != increments.len() {
        return Err(Error::shape(
            "apply_refinement",
            format!("{} poses, {} increment frames", pose_init.len(), increments.len()),
        ));
    }
    let mut out = Vec::with_capacity(pose_init.len());
    for (p, inc) in pose_init.iter().zip(increments) {
        if p.rotations.len() != inc.len() {
            return Err(Error::shape(
                "apply_refinement",
                format!("{} joints, {} increments", p.rotations.len(), inc.len()),
            ));
        }
        out.push(PoseParams {
            rotations: p
                .rotations
                .iter()
                .zip(inc)
                .map(|(q, d)| {
                    if *d == [0.0; 3] {
                        *q
                    } else {
                        UnitQuaternion::from_rotation_vector(*d).compose(*q)
                    }
                })
                .collect(),
            translation: p.translation,
        });
    }
    let shape = ShapeParams {
        coefficients: shape.to_vec(),
    }
    .clamped(bound);
    Ok((out, shape))
}
