//! Orchestration: model assembly, two-phase training, evaluation, the
//! ablation matrix and the sequence-length sweep.
//!
//! # Artifacts
//!
//! * `metrics.csv`: one row per evaluated sequence with columns
//!   `sequence, seed, frames, mpjpe, pa_mpjpe, mpvpe, accel` (mm, mm/s²).
//! * `summary.json`: the aggregate [`MetricSummary`] (mean of the CSV rows),
//!   the config echo, content hashes and the loss curve.
//! * `table2.csv`: `cell, rgb_only, mask_fusion, quality_depth, dmaps, modar,
//!   seeds, mpjpe, pa_mpjpe, mpvpe, accel`, medians over seeds.
//! * `sweep.csv`: `frames, seed, mpjpe, pa_mpjpe, mpvpe, accel`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body_model::BodyTemplate;
use crate::dmaps::{
    baseline_shape_graph, calibrated_shape_graph, observed_bone_lengths, swing_chain,
    temporal_graph, twist_cells, twist_graph, twist_joints, CalibrateOp, DmapsConfig, DmapsIds,
    DmapsParams, MotionTokens, PoseComposeOp, SwingChain,
};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::fusion::{fusion_graph, FusionFlags, FusionIds, FusionInputs, FusionParams};
use crate::losses_metrics::{
    aggregate, compose_locals, evaluate_sequence, pose_body, BodyLossOp, BodySequence,
    BodyTarget, LossBreakdown, LossWeights, MetricSummary, SequenceMetrics,
};
use crate::modar::{build_context, refine_graph, ModarConfig, ModarIds, ModarParams, TokenLayout};
use crate::numerics::gradcheck::relative_error_floor;
use crate::numerics::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::synth::{make_dataset, splitmix64, Dataset, SequenceSample, SynthConfig};

/// Which components a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub rgb_only: bool,
    pub mask_fusion: bool,
    pub quality_depth: bool,
    pub dmaps: bool,
    pub modar: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::complete()
    }
}

impl AblationFlags {
    pub fn complete() -> Self {
        AblationFlags {
            rgb_only: false,
            mask_fusion: true,
            quality_depth: true,
            dmaps: true,
            modar: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgb_only && (self.mask_fusion || self.quality_depth || self.dmaps) {
            return Err(Error::InvalidArgument(
                "rgb_only excludes mask_fusion, quality_depth and dmaps".into(),
            ));
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionFlags {
        FusionFlags {
            depth: !self.rgb_only,
            mask: self.mask_fusion,
            quality: self.quality_depth,
        }
    }
}

/// The six rows of the ablation table, in order.
pub fn table2_cells() -> Vec<(&'static str, AblationFlags)> {
    let none = AblationFlags {
        rgb_only: false,
        mask_fusion: false,
        quality_depth: false,
        dmaps: false,
        modar: false,
    };
    vec![
        (
            "rgb_only",
            AblationFlags {
                rgb_only: true,
                ..none
            },
        ),
        (
            "mask_fusion",
            AblationFlags {
                mask_fusion: true,
                ..none
            },
        ),
        (
            "quality_depth",
            AblationFlags {
                mask_fusion: true,
                quality_depth: true,
                ..none
            },
        ),
        (
            "dmaps_only",
            AblationFlags {
                mask_fusion: true,
                quality_depth: true,
                dmaps: true,
                ..none
            },
        ),
        (
            "modar_only",
            AblationFlags {
                mask_fusion: true,
                quality_depth: true,
                modar: true,
                ..none
            },
        ),
        ("complete", AblationFlags::complete()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub fusion_levels: usize,
    pub gate_hidden: usize,
    pub dmaps: DmapsConfig,
    pub modar: ModarConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion_levels: 2,
            gate_hidden: 16,
            dmaps: DmapsConfig::default(),
            modar: ModarConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total sequences generated; the eval split takes `synth.eval_fraction`.
    pub sequences: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub momentum: f64,
    /// Fractions of phase 2 after which the rate is multiplied by `decay_factor`.
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
    /// Fraction of phase 2 before the smoothness term switches on.
    pub smooth_delay: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sequences: 200,
            phase1_epochs: 4,
            phase2_epochs: 12,
            phase1_lr: 1e-2,
            phase2_lr: 3e-3,
            momentum: 0.9,
            decay_points: vec![0.6, 0.85],
            decay_factor: 0.1,
            smooth_delay: 0.5,
            batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.sequences < 2 {
            return bad("need >= 2 sequences".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (n, v) in [
            ("phase1_lr", self.phase1_lr),
            ("phase2_lr", self.phase2_lr),
            ("decay_factor", self.decay_factor),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{n} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if self
            .decay_points
            .iter()
            .chain([&self.smooth_delay])
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return bad("decay points and smooth_delay must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate of phase-2 epoch `epoch`.
    pub fn phase2_rate(&self, epoch: usize) -> f64 {
        let n = self.phase2_epochs as f64;
        let passed = self
            .decay_points
            .iter()
            .filter(|p| epoch as f64 >= (*p * n).floor())
            .count();
        self.phase2_lr * self.decay_factor.powi(passed as i32)
    }

    pub fn smooth_active(&self, epoch: usize) -> bool {
        epoch as f64 >= (self.smooth_delay * self.phase2_epochs as f64).floor()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub lengths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Noise level used for the sweep datasets.
    pub noise_level: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lengths: vec![8, 16, 24, 32],
            seeds: (0..5).collect(),
            noise_level: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Set by the caller; not part of the serialized or hashed config.
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
    pub executor: Executor,
    pub flags: AblationFlags,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub ablation_seeds: Vec<u64>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: None,
            executor: Executor::default(),
            flags: AblationFlags::complete(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            ablation_seeds: (0..5).collect(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        self.synth.validate()?;
        self.model.dmaps.validate()?;
        self.model.modar.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.model.fusion_levels == 0 || self.model.gate_hidden == 0 {
            return Err(Error::InvalidArgument("fusion sizes must be positive".into()));
        }
        if self.synth.grid % (1 << (self.model.fusion_levels - 1)) != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} fusion levels do not fit grid {}",
                self.model.fusion_levels, self.synth.grid
            )));
        }
        if self.sweep.lengths.iter().any(|&t| t < 3) {
            return Err(Error::InvalidArgument("sweep lengths must be >= 3".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    fn init_seed(&self) -> u64 {
        splitmix64(self.seed ^ 0x696e_6974)
    }
}

pub fn generate(config: &RunConfig) -> Result<Dataset> {
    config.validate()?;
    make_dataset(
        &config.synth,
        config.train.sequences,
        config.seed,
        config.executor,
    )
}

/// Hex SHA-256 over the text form of the template and every sample.
pub fn dataset_hash(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(data.template.to_text());
    for s in data.train.iter().chain(&data.eval) {
        h.update(s.to_text());
    }
    hex::encode(h.finalize())
}

pub fn params_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for v in store.flatten() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

/// All learned parameters plus their handles.
#[derive(Clone, Debug)]
pub struct Model {
    pub template: BodyTemplate,
    pub store: ParamStore,
    pub fusion: FusionIds,
    pub dmaps: DmapsIds,
    pub modar: ModarIds,
}

impl Model {
    pub fn init(config: &RunConfig, template: BodyTemplate) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed());
        let c = config.synth.channels;
        let fusion = FusionParams::init(c, config.model.fusion_levels, config.model.gate_hidden, &mut rng);
        let dmaps = DmapsParams::init(&config.model.dmaps, &template, c, &mut rng)?;
        let modar = ModarParams::init(
            &config.model.modar,
            template.joint_count(),
            c,
            template.shape_dims(),
            &mut rng,
        );
        let mut store = ParamStore::new();
        let fusion = FusionIds::register(&mut store, "fusion", &fusion);
        let dmaps = DmapsIds::register(&mut store, "dmaps", &dmaps);
        let modar = ModarIds::register(&mut store, "modar", &modar);
        Ok(Model {
            template,
            store,
            fusion,
            dmaps,
            modar,
        })
    }

    /// Parameters updated in `phase`.
    pub fn trainable(&self, phase: Phase) -> Vec<ParamId> {
        match phase {
            Phase::Warmup => {
                let mut ids = self.fusion.param_ids();
                ids.extend(self.dmaps.head_ids());
                ids
            }
            Phase::Joint => self.store.ids().collect(),
        }
    }

    /// Replaces the parameters after checking names and shapes.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len()
            || self.store.ids().any(|id| {
                store.name(id) != self.store.name(id)
                    || store.get(id).shape() != self.store.get(id).shape()
            })
        {
            return Err(Error::InvalidArgument(
                "checkpoint does not match the configured model".into(),
            ));
        }
        self.store = store;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub flags: AblationFlags,
    pub config_hash: String,
    pub params: ParamStore,
}

pub fn save_checkpoint(path: &Path, model: &Model, config: &RunConfig) -> Result<()> {
    let ck = Checkpoint {
        flags: config.flags,
        config_hash: config.content_hash(),
        params: model.store.clone(),
    };
    std::fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Per-sample inputs that do not depend on the parameters.
pub struct Prepared {
    chains: Vec<SwingChain>,
    cells: Vec<(usize, usize)>,
    bones: Vec<Option<Vec<f64>>>,
    mean_confidence: Vec<f64>,
    motion: Matrix,
    target: BodyTarget,
}

pub fn prepare(
    template: &BodyTemplate,
    sample: &SequenceSample,
    synth: &SynthConfig,
    model: &ModelConfig,
    flags: AblationFlags,
) -> Result<Prepared> {
    let obs = &sample.obs;
    let motion = MotionTokens::new(obs.lifted.clone(), obs.keypoints.clone())?;
    let bones = if flags.dmaps {
        observed_bone_lengths(
            obs,
            &template.tree,
            &synth.camera,
            &synth.depth_geometry(),
            synth.depth_downsample,
            flags.quality_depth,
            model.dmaps.min_support,
        )
    } else {
        Vec::new()
    };
    Ok(Prepared {
        chains: obs.lifted.iter().map(|j| swing_chain(template, j)).collect(),
        cells: twist_cells(&obs.keypoints, &twist_joints(template), &synth.geometry()),
        bones,
        mean_confidence: obs.mean_confidence(),
        motion: motion.features(&synth.camera),
        target: BodyTarget::from_truth(&sample.truth),
    })
}

/// A recorded forward pass of one sequence.
pub struct Forward {
    pub tape: Tape,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Pose tokens entering refinement, `T × 3J`.
    pub base: Var,
    /// Refinement increments, `T × 3J`.
    pub increments: Var,
    pub shape: Var,
}

pub fn forward(
    model: &Model,
    sample: &SequenceSample,
    prep: &Prepared,
    config: &RunConfig,
    weights: LossWeights,
) -> Result<Forward> {
    let flags = config.flags;
    let store = &model.store;
    let obs = &sample.obs;
    let frames = obs.frames();
    let joints = model.template.joint_count();
    let mut tape = Tape::new();
    let fg = fusion_graph(
        &mut tape,
        store,
        &model.fusion,
        &FusionInputs {
            rgb: &obs.rgb,
            depth: &obs.depth,
            confidence: &obs.confidence,
        },
        flags.fusion(),
    )?;
    let grid = (obs.rgb[0].height, obs.rgb[0].width);
    let compose = PoseComposeOp::new(model.template.clone(), prep.chains.clone());
    let n_twist = compose.twist_count();
    let tau = twist_graph(
        &mut tape,
        store,
        &model.dmaps,
        fg.fused,
        fg.depth_stream,
        &prep.cells,
        n_twist,
        grid,
        config.model.dmaps.twist_max,
    )?;
    let tokens_value = compose.forward(tape.value(tau))?;
    let tokens = tape.custom(&[tau], tokens_value, Box::new(compose))?;
    let bound = config.model.dmaps.shape_bound;
    let (base, shape_init) = if flags.dmaps {
        let base = temporal_graph(&mut tape, store, &model.dmaps, tokens)?;
        let op = CalibrateOp::new(
            prep.bones.clone(),
            prep.mean_confidence.clone(),
            model.template.template_bone_lengths.clone(),
        );
        let shape =
            calibrated_shape_graph(&mut tape, store, &model.dmaps, Some(op), model.template.bone_count(), bound)?;
        (base, shape)
    } else {
        let shape = baseline_shape_graph(&mut tape, store, &model.dmaps, fg.fused, bound)?;
        (tokens, shape)
    };
    let (increments, shape) = if flags.modar {
        let layout = TokenLayout {
            frames,
            joints,
            cells: grid.0 * grid.1,
        };
        let motion = tape.leaf(prep.motion.clone());
        let context = build_context(&mut tape, store, &model.modar, motion, fg.fused, layout)?;
        let r = refine_graph(
            &mut tape,
            store,
            &model.modar,
            context,
            base,
            shape_init,
            layout,
            config.model.modar.pose_clamp,
            bound,
        )?;
        (r.increments, r.shape)
    } else {
        (tape.leaf(Matrix::zeros(frames, 3 * joints)), shape_init)
    };
    let op = BodyLossOp::new(model.template.clone(), prep.target.clone(), weights)?;
    let (loss, breakdown) = op.apply(&mut tape, base, increments, shape)?;
    Ok(Forward {
        tape,
        loss,
        breakdown,
        base,
        increments,
        shape,
    })
}

/// Loss and parameter gradients of one sequence.
pub fn loss_and_grad(
    model: &Model,
    sample: &SequenceSample,
    prep: &Prepared,
    config: &RunConfig,
    weights: LossWeights,
) -> Result<(f64, Vec<Matrix>)> {
    let f = forward(model, sample, prep, config, weights)?;
    let grads = f.tape.backward(&[(f.loss, Matrix::scalar(1.0))])?;
    let mut acc = model.store.zeros_like();
    grads.accumulate_params(&mut acc);
    Ok((f.breakdown.total, acc))
}

/// Posed body predicted for one sequence, root translation from the target.
pub fn predict(
    model: &Model,
    sample: &SequenceSample,
    prep: &Prepared,
    config: &RunConfig,
) -> Result<BodySequence> {
    let f = forward(model, sample, prep, config, config.loss)?;
    let locals = compose_locals(f.tape.value(f.base), f.tape.value(f.increments));
    let (seq, _) = pose_body(
        &model.template,
        &locals,
        f.tape.value(f.shape).data(),
        &prep.target.translation,
    )?;
    Ok(seq)
}

fn truth_sequence(sample: &SequenceSample) -> BodySequence {
    BodySequence {
        joints: sample.truth.joints.clone(),
        vertices: sample.truth.vertices.clone(),
    }
}

/// Per-sequence metrics and their aggregate. With `oracle` the ground truth
/// stands in for the prediction.
pub fn evaluate(
    model: &Model,
    samples: &[SequenceSample],
    config: &RunConfig,
    oracle: bool,
) -> Result<(Vec<SequenceMetrics>, MetricSummary)> {
    let flags = config.flags;
    let rows = config.executor.map_range(samples.len(), |i| {
        let s = &samples[i];
        if s.frames() < 3 {
            return Err(Error::InvalidArgument(format!(
                "evaluation needs >= 3 frames, sequence {i} has {}",
                s.frames()
            )));
        }
        if s.truth.joints[0].len() != model.template.joint_count() {
            return Err(Error::shape("evaluate", "dataset and model joint counts differ"));
        }
        let pred = if oracle {
            truth_sequence(s)
        } else {
            let prep = prepare(&model.template, s, &config.synth, &config.model, flags)?;
            predict(model, s, &prep, config)?
        };
        let report = evaluate_sequence(&pred, &truth_sequence(s), 0, config.synth.camera.fps)?;
        Ok(SequenceMetrics::new(i, s.seed, &report))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = aggregate(&rows);
    Ok((rows, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub learning_rate: f64,
    pub smooth: bool,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub curve: Vec<EpochRecord>,
    /// Warm-up objective over the training split before and after phase 1.
    pub phase1_start_loss: f64,
    pub phase1_end_loss: f64,
    pub summary: MetricSummary,
    pub wall_clock_seconds: f64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub params_hash: String,
}

struct Optimizer {
    velocity: Vec<Matrix>,
    momentum: f64,
}

impl Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], ids: &[ParamId], lr: f64) {
        for &id in ids {
            let v = &mut self.velocity[id.0];
            for (vi, gi) in v.data_mut().iter_mut().zip(grads[id.0].data()) {
                *vi = self.momentum * *vi + gi;
            }
            let p = store.get_mut(id);
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
    }
}

fn warmup_weights(w: &LossWeights) -> LossWeights {
    LossWeights {
        mesh: 0.0,
        joint: w.joint,
        pose: w.pose,
        shape: 0.0,
        smooth: 0.0,
    }
}

fn mean_loss(
    model: &Model,
    samples: &[SequenceSample],
    preps: &[Prepared],
    config: &RunConfig,
    weights: LossWeights,
) -> Result<f64> {
    let losses = config.executor.map_range(samples.len(), |i| {
        forward(model, &samples[i], &preps[i], config, weights).map(|f| f.breakdown.total)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn snapshot_on_divergence(model: &Model, config: &RunConfig, phase: Phase, epoch: usize) {
    if let Some(dir) = &config.output_dir {
        let snap = serde_json::json!({
            "phase": phase,
            "epoch": epoch,
            "params_hash": params_hash(&model.store),
            "params": model.store,
        });
        let _ = std::fs::create_dir_all(dir);
        let _ = std::fs::write(dir.join("diverged_snapshot.json"), snap.to_string());
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    opt: &mut Optimizer,
    samples: &[SequenceSample],
    preps: &[Prepared],
    config: &RunConfig,
    phase: Phase,
    epoch: usize,
    lr: f64,
    weights: LossWeights,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let phase_tag = match phase {
        Phase::Warmup => 1u64,
        Phase::Joint => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
        config.seed ^ (phase_tag << 48) ^ (epoch as u64) << 16,
    ));
    order.shuffle(&mut rng);
    let ids = model.trainable(phase);
    let mut total = 0.0;
    for batch in order.chunks(config.train.batch_size) {
        let results = config.executor.map(batch, |&i| {
            loss_and_grad(model, &samples[i], &preps[i], config, weights)
        });
        let mut grads = model.store.zeros_like();
        let mut batch_loss = 0.0;
        for r in results {
            let (l, g) = r?;
            batch_loss += l;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.add_assign(b);
            }
        }
        let name = match phase {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        };
        if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            snapshot_on_divergence(model, config, phase, epoch);
            return Err(Error::Diverged {
                phase: name,
                epoch,
                loss: batch_loss,
            });
        }
        let inv = 1.0 / batch.len() as f64;
        let grads: Vec<Matrix> = grads.iter().map(|g| g.scaled(inv)).collect();
        opt.step(&mut model.store, &grads, &ids, lr);
        total += batch_loss;
    }
    Ok(total / samples.len() as f64)
}

/// Two-phase training on the training split followed by evaluation on the
/// eval split.
pub fn train(config: &RunConfig, data: &Dataset) -> Result<(Model, RunReport, Vec<SequenceMetrics>)> {
    config.validate()?;
    let start = Instant::now();
    let mut model = Model::init(config, data.template.clone())?;
    let preps = data
        .train
        .iter()
        .map(|s| prepare(&model.template, s, &config.synth, &config.model, config.flags))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Optimizer {
        velocity: model.store.zeros_like(),
        momentum: config.train.momentum,
    };
    let tc = &config.train;
    let warm = warmup_weights(&config.loss);
    let mut curve = Vec::new();
    let phase1_start_loss = mean_loss(&model, &data.train, &preps, config, warm)?;
    for epoch in 0..tc.phase1_epochs {
        let loss = run_epoch(
            &mut model,
            &mut opt,
            &data.train,
            &preps,
            config,
            Phase::Warmup,
            epoch,
            tc.phase1_lr,
            warm,
        )?;
        curve.push(EpochRecord {
            phase: Phase::Warmup,
            epoch,
            learning_rate: tc.phase1_lr,
            smooth: false,
            loss,
        });
    }
    let phase1_end_loss = if tc.phase1_epochs == 0 {
        phase1_start_loss
    } else {
        mean_loss(&model, &data.train, &preps, config, warm)?
    };
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join("checkpoint_phase1.json"), &model, config)?;
    }
    opt.velocity = model.store.zeros_like();
    for epoch in 0..tc.phase2_epochs {
        let smooth = tc.smooth_active(epoch);
        let weights = LossWeights {
            smooth: if smooth { config.loss.smooth } else { 0.0 },
            ..config.loss
        };
        let lr = tc.phase2_rate(epoch);
        let loss = run_epoch(
            &mut model,
            &mut opt,
            &data.train,
            &preps,
            config,
            Phase::Joint,
            epoch,
            lr,
            weights,
        )?;
        curve.push(EpochRecord {
            phase: Phase::Joint,
            epoch,
            learning_rate: lr,
            smooth,
            loss,
        });
    }
    if let Some(dir) = &config.output_dir {
        save_checkpoint(&dir.join("checkpoint.json"), &model, config)?;
    }
    let (rows, summary) = evaluate(&model, &data.eval, config, false)?;
    let report = RunReport {
        config: config.clone(),
        curve,
        phase1_start_loss,
        phase1_end_loss,
        summary,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config_hash: config.content_hash(),
        dataset_hash: dataset_hash(data),
        params_hash: params_hash(&model.store),
    };
    Ok((model, report, rows))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub summary: MetricSummary,
    pub dataset_hash: String,
    pub wall_clock_seconds: f64,
}

/// One row of `table2.csv`: medians over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub cell: String,
    pub rgb_only: bool,
    pub mask_fusion: bool,
    pub quality_depth: bool,
    pub dmaps: bool,
    pub modar: bool,
    pub seeds: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub accel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<CellRun>,
    pub table: Vec<Table2Row>,
}

impl AblationReport {
    pub fn row(&self, cell: &str) -> Option<&Table2Row> {
        self.table.iter().find(|r| r.cell == cell)
    }
}

/// Trains and evaluates every ablation cell for every seed; cells of one
/// seed share one dataset.
pub fn ablation_suite(config: &RunConfig, seeds: &[u64]) -> Result<AblationReport> {
    config.validate()?;
    let cells = table2_cells();
    let datasets = seeds
        .iter()
        .map(|&seed| {
            let cfg = RunConfig {
                seed,
                ..config.clone()
            };
            let d = generate(&cfg)?;
            let h = dataset_hash(&d);
            Ok((cfg, d, h))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|s| (0..cells.len()).map(move |c| (s, c)))
        .collect();
    let runs = config.executor.map(&jobs, |&(s, c)| {
        let (base, data, hash) = &datasets[s];
        let cfg = RunConfig {
            flags: cells[c].1,
            output_dir: None,
            ..base.clone()
        };
        let (_, report, _) = train(&cfg, data)?;
        Ok(CellRun {
            cell: cells[c].0.to_string(),
            seed: cfg.seed,
            summary: report.summary,
            dataset_hash: hash.clone(),
            wall_clock_seconds: report.wall_clock_seconds,
        })
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let table = cells
        .iter()
        .map(|(name, f)| {
            let of = |g: fn(&MetricSummary) -> f64| {
                let v: Vec<f64> = runs.iter().filter(|r| r.cell == *name).map(|r| g(&r.summary)).collect();
                median(&v)
            };
            Table2Row {
                cell: name.to_string(),
                rgb_only: f.rgb_only,
                mask_fusion: f.mask_fusion,
                quality_depth: f.quality_depth,
                dmaps: f.dmaps,
                modar: f.modar,
                seeds: seeds.len(),
                mpjpe: of(|m| m.mpjpe),
                pa_mpjpe: of(|m| m.pa_mpjpe),
                mpvpe: of(|m| m.mpvpe),
                accel: of(|m| m.accel),
            }
        })
        .collect();
    Ok(AblationReport { runs, table })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub frames: usize,
    pub seed: u64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub accel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMedian {
    pub frames: usize,
    pub mpjpe: f64,
    pub accel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub medians: Vec<SweepMedian>,
}

/// Complete model trained and evaluated at each sequence length.
pub fn seq_length_sweep(config: &RunConfig, lengths: &[usize], seeds: &[u64]) -> Result<SweepReport> {
    config.validate()?;
    if lengths.is_empty() || lengths.iter().any(|&t| t < 3) {
        return Err(Error::InvalidArgument("sweep lengths must be >= 3".into()));
    }
    let jobs: Vec<(usize, u64)> = lengths
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let rows = config.executor.map(&jobs, |&(frames, seed)| {
        let mut cfg = RunConfig {
            seed,
            output_dir: None,
            flags: AblationFlags::complete(),
            ..config.clone()
        };
        cfg.synth.frames = frames;
        cfg.synth.noise_level = config.sweep.noise_level;
        let data = generate(&cfg)?;
        let (_, report, _) = train(&cfg, &data)?;
        let m = report.summary;
        Ok(SweepRow {
            frames,
            seed,
            mpjpe: m.mpjpe,
            pa_mpjpe: m.pa_mpjpe,
            mpvpe: m.mpvpe,
            accel: m.accel,
        })
    });
    let rows = rows.into_iter().collect::<Result<Vec<SweepRow>>>()?;
    let medians = lengths
        .iter()
        .map(|&t| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.frames == t).collect();
            SweepMedian {
                frames: t,
                mpjpe: median(&sel.iter().map(|r| r.mpjpe).collect::<Vec<_>>()),
                accel: median(&sel.iter().map(|r| r.accel).collect::<Vec<_>>()),
            }
        })
        .collect();
    Ok(SweepReport { rows, medians })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Learned block a parameter belongs to, for per-block gradient checks.
pub fn block_of(name: &str) -> &'static str {
    let rest = |p: &str| name.strip_prefix(p);
    if name.starts_with("fusion.") {
        "fusion"
    } else if let Some(r) = rest("dmaps.") {
        if r.starts_with("twist") {
            "twist_head"
        } else if r.starts_with("att_") || r == "log_kappa" {
            "temporal_attention"
        } else {
            "shape_head"
        }
    } else if let Some(r) = rest("modar.") {
        if r.starts_with("block1") {
            "modar_block1"
        } else if r.starts_with("block2") {
            "modar_block2"
        } else if r.starts_with("pose_gate") || r.starts_with("shape_gate") || r == "rho_logit" {
            "gates"
        } else {
            "residual_heads"
        }
    } else {
        "other"
    }
}

/// A deliberately tiny configuration for gradient checks and smoke runs.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        executor: Executor::Sequential,
        ..RunConfig::default()
    };
    c.synth.frames = 3;
    c.synth.grid = 4;
    c.synth.channels = 12;
    c.synth.template.joints = 6;
    c.synth.template.shape_dims = 2;
    c.synth.template.vertices = 18;
    c.synth.occlusion_rate = 0.3;
    c.model.gate_hidden = 4;
    c.model.dmaps.attention_width = 4;
    c.model.modar.width = 4;
    c.model.modar.ffn_hidden = 6;
    c.train.sequences = 6;
    c.train.phase1_epochs = 1;
    c.train.phase2_epochs = 2;
    c.train.batch_size = 2;
    c.ablation_seeds = vec![seed];
    c.sweep.lengths = vec![3, 4];
    c.sweep.seeds = vec![seed];
    c
}

/// Every parameter moved by a small random amount, so that zero-initialised
/// heads carry gradient through the whole graph.
pub fn perturb_params(store: &mut ParamStore, seed: u64, scale: f64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Denominator floor of the per-block relative error: below it, central
/// differences at step 1e−5 on an O(1) loss cannot resolve 1e−4 relative
/// agreement.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_parameter: String,
}

/// Finite-difference check of the full sequence loss, grouped by block.
/// `per_block` coordinates of every block are drawn at random.
pub fn grad_check_model(
    config: &RunConfig,
    data: &Dataset,
    sample_index: usize,
    per_block: usize,
    seed: u64,
    step: f64,
) -> Result<Vec<BlockCheck>> {
    use rand::Rng;
    let mut model = Model::init(config, data.template.clone())?;
    perturb_params(&mut model.store, seed, 0.05);
    let sample = data
        .train
        .get(sample_index)
        .ok_or_else(|| Error::InvalidArgument(format!("no training sample {sample_index}")))?;
    let prep = prepare(&model.template, sample, &config.synth, &config.model, config.flags)?;
    let offsets = model.store.offsets();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut blocks: Vec<(&'static str, Vec<usize>)> = Vec::new();
    for id in model.store.ids() {
        let b = block_of(model.store.name(id));
        let range = offsets[id.0]..offsets[id.0] + model.store.get(id).data().len();
        match blocks.iter_mut().find(|(n, _)| *n == b) {
            Some((_, v)) => v.extend(range),
            None => blocks.push((b, range.collect())),
        }
    }
    let flat = model.store.flatten();
    let template = model.clone();
    let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut m = template.clone();
        m.store.unflatten(p)?;
        let (l, g) = loss_and_grad(&m, sample, &prep, config, config.loss)?;
        Ok((l, g.iter().flat_map(|x| x.data().to_vec()).collect()))
    };
    let (_, analytic) = f(&flat)?;
    let mut out = Vec::new();
    for (block, idx) in blocks {
        let chosen: Vec<usize> = (0..per_block.min(idx.len()))
            .map(|_| idx[rng.random_range(0..idx.len())])
            .collect();
        let mut worst = (0.0f64, chosen.first().copied().unwrap_or(0));
        for &i in &chosen {
            let mut p = flat.clone();
            p[i] = flat[i] + step;
            let (lp, _) = f(&p)?;
            p[i] = flat[i] - step;
            let (lm, _) = f(&p)?;
            let numeric = (lp - lm) / (2.0 * step);
            let e = relative_error_floor(analytic[i], numeric, GRAD_FLOOR);
            if e > worst.0 || e.is_nan() {
                worst = (e, i);
            }
        }
        let pid = offsets.iter().rposition(|&o| o <= worst.1).unwrap_or(0);
        out.push(BlockCheck {
            block: block.to_string(),
            checked: chosen.len(),
            max_rel_error: worst.0,
            worst_parameter: model.store.name(ParamId(pid)).to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data(c: &RunConfig) -> Dataset {
        generate(c).unwrap()
    }

    #[test]
    fn cells_match_the_table() {
        let names: Vec<&str> = table2_cells().iter().map(|c| c.0).collect();
        assert_eq!(
            names,
            ["rgb_only", "mask_fusion", "quality_depth", "dmaps_only", "modar_only", "complete"]
        );
        for (_, f) in table2_cells() {
            f.validate().unwrap();
        }
        let bad = AblationFlags {
            rgb_only: true,
            ..AblationFlags::complete()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn schedule() {
        let t = TrainConfig {
            phase2_epochs: 20,
            ..TrainConfig::default()
        };
        assert_eq!(t.phase2_rate(0), 3e-3);
        assert_eq!(t.phase2_rate(11), 3e-3);
        assert!((t.phase2_rate(12) - 3e-4).abs() < 1e-15);
        assert!((t.phase2_rate(17) - 3e-5).abs() < 1e-15);
        assert!(!t.smooth_active(9));
        assert!(t.smooth_active(10));
    }

    #[test]
    fn config_round_trip() {
        let c = RunConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let partial = RunConfig::from_toml_str("seed = 7\n[train]\nphase2_epochs = 3\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train.phase2_epochs, 3);
        assert_eq!(partial.train.phase1_lr, 1e-2);
        assert!(RunConfig::from_toml_str("[flags]\nrgb_only = true\n").is_err());
        assert!(RunConfig::from_toml_str("seed = \"x\"").is_err());
        let elsewhere = RunConfig {
            output_dir: Some("elsewhere".into()),
            ..c.clone()
        };
        assert_eq!(elsewhere.content_hash(), c.content_hash());
    }

    #[test]
    fn zero_epochs_keep_initialisation() {
        let mut c = tiny_config(1);
        c.train.phase1_epochs = 0;
        c.train.phase2_epochs = 0;
        let data = tiny_data(&c);
        let init = Model::init(&c, data.template.clone()).unwrap();
        let (model, report, rows) = train(&c, &data).unwrap();
        assert_eq!(model.store, init.store);
        assert!(report.curve.is_empty());
        assert_eq!(rows.len(), data.eval.len());
        assert!(report.summary.mpjpe > 0.0);
    }

    #[test]
    fn oracle_bypass_is_exact() {
        let c = tiny_config(2);
        let data = tiny_data(&c);
        let model = Model::init(&c, data.template.clone()).unwrap();
        let (rows, s) = evaluate(&model, &data.eval, &c, true).unwrap();
        assert!(!rows.is_empty());
        assert_eq!((s.mpjpe, s.mpvpe, s.accel), (0.0, 0.0, 0.0));
        assert!(s.pa_mpjpe < 1e-9);
    }

    #[test]
    fn training_is_deterministic_across_executors() {
        let c = tiny_config(3);
        let data = tiny_data(&c);
        let (_, a, rows_a) = train(&c, &data).unwrap();
        let par = RunConfig {
            executor: Executor::Parallel,
            ..c.clone()
        };
        let (_, b, rows_b) = train(&par, &data).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.params_hash, b.params_hash);
        assert_eq!(rows_a, rows_b);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn rgb_only_ignores_depth() {
        let mut c = tiny_config(4);
        c.flags = table2_cells()[0].1;
        let data = tiny_data(&c);
        let mut model = Model::init(&c, data.template.clone()).unwrap();
        perturb_params(&mut model.store, 9, 0.1);
        let s = &data.train[0];
        let mut noisy = s.clone();
        for g in &mut noisy.obs.depth {
            for v in g.cells.data_mut() {
                *v = *v * 3.0 + 0.7;
            }
        }
        for c in &mut noisy.obs.confidence {
            c.iter_mut().for_each(|v| *v *= 0.5);
        }
        let pa = prepare(&model.template, s, &c.synth, &c.model, c.flags).unwrap();
        let pb = prepare(&model.template, &noisy, &c.synth, &c.model, c.flags).unwrap();
        assert_eq!(
            predict(&model, s, &pa, &c).unwrap(),
            predict(&model, &noisy, &pb, &c).unwrap()
        );
        c.flags = AblationFlags::complete();
        let pa = prepare(&model.template, s, &c.synth, &c.model, c.flags).unwrap();
        let pb = prepare(&model.template, &noisy, &c.synth, &c.model, c.flags).unwrap();
        assert_ne!(
            predict(&model, s, &pa, &c).unwrap(),
            predict(&model, &noisy, &pb, &c).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = tiny_config(5);
        let data = tiny_data(&c);
        let (model, report, _) = train(&c, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&path, &model, &c).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let mut fresh = Model::init(&c, data.template.clone()).unwrap();
        fresh.load_params(ck.params).unwrap();
        let (_, s) = evaluate(&fresh, &data.eval, &c, false).unwrap();
        assert_eq!(s, report.summary);
        let mut other = tiny_config(5);
        other.model.modar.width = 6;
        let mut wrong = Model::init(&other, data.template.clone()).unwrap();
        assert!(wrong.load_params(model.store.clone()).is_err());
    }

    #[test]
    fn aggregate_matches_csv() {
        let c = tiny_config(6);
        let data = tiny_data(&c);
        let model = Model::init(&c, data.template.clone()).unwrap();
        let (rows, s) = evaluate(&model, &data.eval, &c, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_csv(&path, &rows).unwrap();
        let back = crate::losses_metrics::read_metrics_csv(&path).unwrap();
        let mean = back.iter().map(|r| r.mpjpe).sum::<f64>() / back.len() as f64;
        assert!((mean - s.mpjpe).abs() < 1e-9);
    }

    #[test]
    fn full_loss_gradients() {
        let mut c = tiny_config(7);
        c.train.sequences = 3;
        for frames in [2, 3] {
            c.synth.frames = frames;
            let data = tiny_data(&c);
            for check in grad_check_model(&c, &data, 0, 6, frames as u64, 1e-5).unwrap() {
                assert!(check.max_rel_error < 1e-4, "{check:?}");
            }
        }
    }

    #[test]
    fn block_names() {
        assert_eq!(block_of("fusion.level0.mask_out.w"), "fusion");
        assert_eq!(block_of("dmaps.twist_w"), "twist_head");
        assert_eq!(block_of("dmaps.log_kappa"), "temporal_attention");
        assert_eq!(block_of("dmaps.eta"), "shape_head");
        assert_eq!(block_of("modar.block2.key"), "modar_block2");
        assert_eq!(block_of("modar.rho_logit"), "gates");
        assert_eq!(block_of("modar.ffn_in.w"), "residual_heads");
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
