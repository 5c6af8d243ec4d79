//! Gated RGB-depth feature fusion.
//!
//! Grids for a whole sequence are stacked frame-major: row `t · H · W + r · W + c`.
//! The pure functions work on one frame and mirror the tape graph built by
//! [`fusion_graph`].

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dense_forward, glorot_uniform, Activation, DenseIds, LayerParams, Matrix, ParamId, ParamStore,
    Tape, Var,
};

/// Per-cell channel vectors; cell `(r, c)` is row `r * width + c` of `cells`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub cells: Matrix,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, cells: Matrix) -> Result<Self> {
        if height == 0 || width == 0 || cells.cols() == 0 || cells.rows() != height * width {
            return Err(Error::shape(
                "FeatureGrid::new",
                format!("{height}x{width} grid with cells {:?}", cells.shape()),
            ));
        }
        if !cells.is_finite() {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(FeatureGrid {
            height,
            width,
            cells,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureGrid {
            height,
            width,
            cells: Matrix::zeros(height * width, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.cells.cols()
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        self.cells.row(r * self.width + c)
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let w = self.width;
        self.cells.row_mut(r * w + c)
    }
}

/// Which parts of the fusion are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionFlags {
    /// Depth stream present at all; off means RGB only.
    pub depth: bool,
    pub mask: bool,
    /// Scale the depth stream by per-cell confidence.
    pub quality: bool,
}

/// Parameters of one pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub mask_hidden: LayerParams,
    pub mask_out: LayerParams,
    pub gate_hidden: LayerParams,
    pub gate_out: LayerParams,
    pub projection: LayerParams,
}

impl LevelParams {
    /// Random hidden layers, zero output layers (mask and gates start at ½),
    /// projection `[½I | ½I]`.
    pub fn init<R: Rng + ?Sized>(channels: usize, gate_hidden: usize, rng: &mut R) -> Self {
        let c = channels;
        let mut proj = Matrix::zeros(c, 2 * c);
        for i in 0..c {
            proj.set(i, i, 0.5);
            proj.set(i, c + i, 0.5);
        }
        LevelParams {
            mask_hidden: LayerParams {
                weights: glorot_uniform(rng, c, c),
                bias: vec![0.0; c],
                kind: Activation::Relu,
            },
            mask_out: LayerParams::zeros(c, c, Activation::Sigmoid),
            gate_hidden: LayerParams {
                weights: glorot_uniform(rng, gate_hidden, 2 * c),
                bias: vec![0.0; gate_hidden],
                kind: Activation::Relu,
            },
            gate_out: LayerParams::zeros(gate_hidden, 2 * c, Activation::Sigmoid),
            projection: LayerParams {
                weights: proj,
                bias: vec![0.0; c],
                kind: Activation::Linear,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// Per-cell refinement of the raw depth grid, identity at init.
    pub refine: LayerParams,
    pub levels: Vec<LevelParams>,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        levels: usize,
        gate_hidden: usize,
        rng: &mut R,
    ) -> Self {
        FusionParams {
            refine: LayerParams {
                weights: Matrix::identity(channels),
                bias: vec![0.0; channels],
                kind: Activation::Linear,
            },
            levels: (0..levels)
                .map(|_| LevelParams::init(channels, gate_hidden, rng))
                .collect(),
        }
    }
}

/// Per-cell refinement then nearest-neighbour upsampling to `height × width`.
pub fn mock_depth_pathway(
    raw: &FeatureGrid,
    refine: &LayerParams,
    height: usize,
    width: usize,
) -> Result<FeatureGrid> {
    if height % raw.height != 0 || width % raw.width != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} depth grid does not divide {height}x{width}",
            raw.height, raw.width
        )));
    }
    let refined = dense_forward(refine, &raw.cells)?;
    let (fy, fx) = (height / raw.height, width / raw.width);
    let mut out = Matrix::zeros(height * width, refined.cols());
    for r in 0..height {
        for c in 0..width {
            out.row_mut(r * width + c)
                .copy_from_slice(refined.row((r / fy) * raw.width + c / fx));
        }
    }
    FeatureGrid::new(height, width, out)
}

/// `σ(W₂ relu(W₁ d + b₁) + b₂)` per cell.
pub fn modulation_mask(d: &FeatureGrid, level: &LevelParams) -> Result<Matrix> {
    dense_forward(&level.mask_out, &dense_forward(&level.mask_hidden, &d.cells)?)
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.iter().map(|v| v / m.rows() as f64).collect()
}

/// Mean-pools both streams, concatenates, and maps through the gate MLP.
pub fn channel_gates(
    fr: &FeatureGrid,
    fd: &FeatureGrid,
    level: &LevelParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = fr.channels();
    if fd.channels() != c {
        return Err(Error::shape(
            "channel_gates",
            format!("{c} vs {} channels", fd.channels()),
        ));
    }
    let mut pooled = column_means(&fr.cells);
    pooled.extend(column_means(&fd.cells));
    let q = dense_forward(
        &level.gate_out,
        &dense_forward(&level.gate_hidden, &Matrix::row_vector(&pooled))?,
    )?;
    Ok((q.data()[..c].to_vec(), q.data()[c..].to_vec()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub fused: FeatureGrid,
    pub mask: Matrix,
    pub q_r: Vec<f64>,
    pub q_d: Vec<f64>,
}

/// One level: `φ([q_r ⊙ M ⊙ r ‖ q_d ⊙ d])`. Without the mask `M ≡ 1`.
pub fn fuse(
    r: &FeatureGrid,
    d: &FeatureGrid,
    level: &LevelParams,
    use_mask: bool,
) -> Result<FusionOutput> {
    if (r.height, r.width, r.channels()) != (d.height, d.width, d.channels()) {
        return Err(Error::shape(
            "fuse",
            format!(
                "rgb {}x{}x{} vs depth {}x{}x{}",
                r.height,
                r.width,
                r.channels(),
                d.height,
                d.width,
                d.channels()
            ),
        ));
    }
    let mask = if use_mask {
        modulation_mask(d, level)?
    } else {
        Matrix::filled(r.cells.rows(), r.channels(), 1.0)
    };
    let fr = FeatureGrid::new(r.height, r.width, r.cells.zip_map(&mask, |a, b| a * b))?;
    let (q_r, q_d) = channel_gates(&fr, d, level)?;
    let c = r.channels();
    let mut cat = Matrix::zeros(r.cells.rows(), 2 * c);
    for i in 0..r.cells.rows() {
        let row = cat.row_mut(i);
        for k in 0..c {
            row[k] = q_r[k] * fr.cells.get(i, k);
            row[c + k] = q_d[k] * d.cells.get(i, k);
        }
    }
    let fused = FeatureGrid::new(r.height, r.width, dense_forward(&level.projection, &cat)?)?;
    Ok(FusionOutput {
        fused,
        mask,
        q_r,
        q_d,
    })
}

/// Average over `factor × factor` blocks.
pub fn pool_grid(g: &FeatureGrid, factor: usize) -> Result<FeatureGrid> {
    if factor == 0 || g.height % factor != 0 || g.width % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "pool factor {factor} does not divide {}x{}",
            g.height, g.width
        )));
    }
    let (h, w) = (g.height / factor, g.width / factor);
    let mut out = Matrix::zeros(h * w, g.channels());
    let norm = 1.0 / (factor * factor) as f64;
    for r in 0..g.height {
        for c in 0..g.width {
            let dst = out.row_mut((r / factor) * w + c / factor);
            for (o, v) in dst.iter_mut().zip(g.cell(r, c)) {
                *o += v * norm;
            }
        }
    }
    FeatureGrid::new(h, w, out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_grid(g: &FeatureGrid, factor: usize) -> Result<FeatureGrid> {
    let (h, w) = (g.height * factor, g.width * factor);
    let mut out = Matrix::zeros(h * w, g.channels());
    for r in 0..h {
        for c in 0..w {
            out.row_mut(r * w + c).copy_from_slice(g.cell(r / factor, c / factor));
        }
    }
    FeatureGrid::new(h, w, out)
}

/// Single-frame reference of the full multi-level fusion. `d` is the
/// refined, upsampled depth stream and `confidence` its per-cell reliability.
pub fn fuse_multiscale(
    r: &FeatureGrid,
    d: &FeatureGrid,
    confidence: &[f64],
    params: &FusionParams,
    flags: FusionFlags,
) -> Result<FeatureGrid> {
    let fd = if !flags.depth {
        FeatureGrid::zeros(d.height, d.width, d.channels())
    } else if flags.quality {
        let mut g = d.clone();
        for (i, c) in confidence.iter().enumerate() {
            for v in g.cells.row_mut(i) {
                *v *= c;
            }
        }
        g
    } else {
        d.clone()
    };
    let mut total = Matrix::zeros(r.cells.rows(), r.channels());
    for (l, level) in params.levels.iter().enumerate() {
        let f = 1 << l;
        let out = fuse(
            &pool_grid(r, f)?,
            &pool_grid(&fd, f)?,
            level,
            flags.depth && flags.mask,
        )?;
        total.add_assign(&upsample_grid(&out.fused, f)?.cells);
    }
    FeatureGrid::new(r.height, r.width, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelIds {
    pub mask_hidden: DenseIds,
    pub mask_out: DenseIds,
    pub gate_hidden: DenseIds,
    pub gate_out: DenseIds,
    pub projection: DenseIds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionIds {
    pub refine: DenseIds,
    pub levels: Vec<LevelIds>,
}

impl FusionIds {
    pub fn register(store: &mut ParamStore, prefix: &str, params: &FusionParams) -> Self {
        let levels = params
            .levels
            .iter()
            .enumerate()
            .map(|(l, p)| {
                let name = |n: &str| format!("{prefix}.level{l}.{n}");
                LevelIds {
                    mask_hidden: DenseIds::register(store, &name("mask_hidden"), p.mask_hidden.clone()),
                    mask_out: DenseIds::register(store, &name("mask_out"), p.mask_out.clone()),
                    gate_hidden: DenseIds::register(store, &name("gate_hidden"), p.gate_hidden.clone()),
                    gate_out: DenseIds::register(store, &name("gate_out"), p.gate_out.clone()),
                    projection: DenseIds::register(store, &name("projection"), p.projection.clone()),
                }
            })
            .collect();
        FusionIds {
            refine: DenseIds::register(store, &format!("{prefix}.refine"), params.refine.clone()),
            levels,
        }
    }

    pub fn params(&self, store: &ParamStore) -> FusionParams {
        FusionParams {
            refine: self.refine.layer(store),
            levels: self
                .levels
                .iter()
                .map(|l| LevelParams {
                    mask_hidden: l.mask_hidden.layer(store),
                    mask_out: l.mask_out.layer(store),
                    gate_hidden: l.gate_hidden.layer(store),
                    gate_out: l.gate_out.layer(store),
                    projection: l.projection.layer(store),
                })
                .collect(),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.refine.w, self.refine.b];
        for l in &self.levels {
            for d in [&l.mask_hidden, &l.mask_out, &l.gate_hidden, &l.gate_out, &l.projection] {
                out.extend([d.w, d.b]);
            }
        }
        out
    }
}

/// Row groups for nearest-neighbour upsampling of frame-stacked grids.
pub fn upsample_groups(frames: usize, h: usize, w: usize, factor: usize) -> Arc<Vec<Vec<usize>>> {
    let (sh, sw) = (h / factor, w / factor);
    Arc::new(
        (0..frames)
            .flat_map(|t| {
                (0..h * w).map(move |i| vec![t * sh * sw + (i / w / factor) * sw + (i % w) / factor])
            })
            .collect(),
    )
}

/// Row groups for `factor × factor` average pooling of frame-stacked grids.
pub fn pool_groups(frames: usize, h: usize, w: usize, factor: usize) -> Arc<Vec<Vec<usize>>> {
    let (ph, pw) = (h / factor, w / factor);
    Arc::new(
        (0..frames)
            .flat_map(|t| {
                (0..ph * pw).map(move |i| {
                    let (r0, c0) = ((i / pw) * factor, (i % pw) * factor);
                    (0..factor * factor)
                        .map(|k| t * h * w + (r0 + k / factor) * w + c0 + k % factor)
                        .collect()
                })
            })
            .collect(),
    )
}

/// One group per frame holding all of its rows (per-frame mean).
pub fn frame_groups(frames: usize, rows: usize) -> Arc<Vec<Vec<usize>>> {
    Arc::new((0..frames).map(|t| (t * rows..(t + 1) * rows).collect()).collect())
}

/// Repeats each frame row `rows` times.
pub fn broadcast_groups(frames: usize, rows: usize) -> Arc<Vec<Vec<usize>>> {
    Arc::new((0..frames * rows).map(|i| vec![i / rows]).collect())
}

/// Frame-stacked inputs of one sequence.
pub struct FusionInputs<'a> {
    pub rgb: &'a [FeatureGrid],
    pub depth: &'a [FeatureGrid],
    pub confidence: &'a [Vec<f64>],
}

fn stack(grids: &[FeatureGrid]) -> Result<Matrix> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidArgument("no frames to stack".into()))?;
    let mut data = Vec::with_capacity(grids.len() * first.cells.data().len());
    for g in grids {
        if (g.height, g.width, g.channels()) != (first.height, first.width, first.channels()) {
            return Err(Error::shape("stack", "frames have different grid shapes"));
        }
        data.extend_from_slice(g.cells.data());
    }
    Matrix::from_vec(grids.len() * first.cells.rows(), first.channels(), data)
}

pub struct FusionGraph {
    /// Fused features, frame-stacked at full resolution.
    pub fused: Var,
    /// Depth stream after refinement, upsampling and confidence scaling
    /// (zeros when depth is off).
    pub depth_stream: Var,
}

/// Records the fusion of a whole sequence on `tape`.
pub fn fusion_graph(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &FusionIds,
    inputs: &FusionInputs<'_>,
    flags: FusionFlags,
) -> Result<FusionGraph> {
    let frames = inputs.rgb.len();
    let (h, w) = (inputs.rgb[0].height, inputs.rgb[0].width);
    let cells = h * w;
    let rgb_m = stack(inputs.rgb)?;
    let c = rgb_m.cols();
    let rgb = tape.leaf(rgb_m);

    let fd = if flags.depth {
        if inputs.depth.len() != frames || inputs.confidence.len() != frames {
            return Err(Error::shape(
                "fusion_graph",
                format!(
                    "{frames} rgb frames, {} depth, {} confidence",
                    inputs.depth.len(),
                    inputs.confidence.len()
                ),
            ));
        }
        let (dh, dw) = (inputs.depth[0].height, inputs.depth[0].width);
        if h % dh != 0 || w % dw != 0 || h / dh != w / dw {
            return Err(Error::InvalidArgument(format!(
                "{dh}x{dw} depth grid does not evenly divide {h}x{w}"
            )));
        }
        let raw = tape.leaf(stack(inputs.depth)?);
        let refined = ids.refine.apply(tape, store, raw)?;
        let up = tape.gather(refined, upsample_groups(frames, h, w, h / dh))?;
        if flags.quality {
            let conf: Vec<f64> = inputs.confidence.iter().flatten().copied().collect();
            if conf.len() != frames * cells {
                return Err(Error::shape("fusion_graph", "confidence size"));
            }
            let cv = tape.leaf(Matrix::from_vec(frames * cells, 1, conf)?);
            tape.mul(up, cv)?
        } else {
            up
        }
    } else {
        tape.leaf(Matrix::zeros(frames * cells, c))
    };

    let mut total: Option<Var> = None;
    for (l, level) in ids.levels.iter().enumerate() {
        let f = 1 << l;
        if h % f != 0 || w % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "{l} pyramid levels do not fit a {h}x{w} grid"
            )));
        }
        let lcells = (h / f) * (w / f);
        let (r_l, d_l) = if f == 1 {
            (rgb, fd)
        } else {
            let g = pool_groups(frames, h, w, f);
            (tape.gather(rgb, g.clone())?, tape.gather(fd, g)?)
        };
        let fr = if flags.depth && flags.mask {
            let hid = level.mask_hidden.apply(tape, store, d_l)?;
            let m = level.mask_out.apply(tape, store, hid)?;
            tape.mul(r_l, m)?
        } else {
            r_l
        };
        let pr = tape.gather(fr, frame_groups(frames, lcells))?;
        let pd = tape.gather(d_l, frame_groups(frames, lcells))?;
        let pooled = tape.concat_cols(&[pr, pd])?;
        let hid = level.gate_hidden.apply(tape, store, pooled)?;
        let q = level.gate_out.apply(tape, store, hid)?;
        let q_cells = tape.gather(q, broadcast_groups(frames, lcells))?;
        let qr = tape.slice_cols(q_cells, 0, c)?;
        let qd = tape.slice_cols(q_cells, c, c)?;
        let a = tape.mul(fr, qr)?;
        let b = tape.mul(d_l, qd)?;
        let cat = tape.concat_cols(&[a, b])?;
        let mut out = level.projection.apply(tape, store, cat)?;
        if f > 1 {
            out = tape.gather(out, upsample_groups(frames, h, w, f))?;
        }
        total = Some(match total {
            None => out,
            Some(t) => tape.add(t, out)?,
        });
    }
    let fused = total.ok_or_else(|| Error::InvalidArgument("fusion needs >= 1 level".into()))?;
    Ok(FusionGraph {
        fused,
        depth_stream: fd,
    })
}
