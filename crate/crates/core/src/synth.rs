//! Synthetic sequences: ground-truth motion on the body template, feature
//! grids that carry signal about it, noisy 2D keypoints, a mock lifter and
//! simulated occlusion.
//!
//! Channel layout, shared by the RGB-like and depth-like grids: joint `j`
//! owns channels `2j` and `2j + 1`. The RGB pair holds `[b, b·τ_j]`, the
//! depth pair `[b·z_j, b]`, where `b` is a Gaussian bump centred on the
//! projected joint, `τ_j` the joint's twist angle and `z_j` its camera
//! depth in meters. Remaining channels carry noise only.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_model::{
    build_template, forward_kinematics, parse_numbers, BodyTemplate, PoseParams, ShapeParams,
    TextLines,
};
use crate::dmaps::twist_angles;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::fusion::FeatureGrid;
use crate::numerics::Matrix;
use crate::rotation::{scale, sub, UnitQuaternion, Vec3};

/// Pinhole camera at the origin looking down `+z`, `y` up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub fps: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            focal: 500.0,
            cx: 128.0,
            cy: 128.0,
            width: 256.0,
            height: 256.0,
            fps: 30.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || !(self.fps > 0.0) || !(self.width > 0.0) || !(self.height > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "camera needs positive focal, fps and image size: {self:?}"
            )));
        }
        Ok(())
    }

    /// Pixel coordinates `[u, v]`.
    pub fn project(&self, p: Vec3) -> Result<[f64; 2]> {
        if !(p[2] > 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "point {p:?} is not in front of the camera"
            )));
        }
        Ok([
            self.cx + self.focal * p[0] / p[2],
            self.cy - self.focal * p[1] / p[2],
        ])
    }
}

/// Mapping between image pixels and grid cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub image_width: f64,
    pub image_height: f64,
    /// Bump width in cells.
    pub bump_sigma: f64,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize, camera: &CameraModel, bump_sigma: f64) -> Self {
        GridGeometry {
            height,
            width,
            image_width: camera.width,
            image_height: camera.height,
            bump_sigma,
        }
    }

    /// Continuous `(row, col)` position in cell units.
    pub fn continuous(&self, uv: [f64; 2]) -> (f64, f64) {
        (
            uv[1] * self.height as f64 / self.image_height,
            uv[0] * self.width as f64 / self.image_width,
        )
    }

    /// Cell containing a pixel, clamped to the grid.
    pub fn cell_of(&self, uv: [f64; 2]) -> (usize, usize) {
        let (gy, gx) = self.continuous(uv);
        let clamp = |g: f64, n: usize| (g.floor().max(0.0) as usize).min(n - 1);
        (clamp(gy, self.height), clamp(gx, self.width))
    }

    /// Gaussian bump centred at `(gy, gx)`, evaluated at the centre of cell `(r, c)`.
    pub fn bump(&self, r: usize, c: usize, gy: f64, gx: f64) -> f64 {
        let dy = r as f64 + 0.5 - gy;
        let dx = c as f64 + 0.5 - gx;
        (-(dx * dx + dy * dy) / (2.0 * self.bump_sigma * self.bump_sigma)).exp()
    }
}

/// Occluded frames `[start, end)` and grid rectangle rows `[r0, r1)`, cols `[c0, c1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub start: usize,
    pub end: usize,
    pub region: [usize; 4],
    pub confidence_floor: f64,
}

impl OcclusionSpec {
    pub fn validate(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        let [r0, c0, r1, c1] = self.region;
        if self.start >= self.end || self.end > frames {
            return Err(Error::InvalidArgument(format!(
                "occlusion window {}..{} outside {frames} frames",
                self.start, self.end
            )));
        }
        if r0 >= r1 || c0 >= c1 || r1 > height || c1 > width {
            return Err(Error::InvalidArgument(format!(
                "occlusion region {:?} outside {height}x{width} grid",
                self.region
            )));
        }
        if !(0.0..1.0).contains(&self.confidence_floor) {
            return Err(Error::InvalidArgument(format!(
                "confidence floor {} not in [0, 1)",
                self.confidence_floor
            )));
        }
        Ok(())
    }

    pub fn covers_frame(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }

    pub fn covers_cell(&self, r: usize, c: usize) -> bool {
        let [r0, c0, r1, c1] = self.region;
        (r0..r1).contains(&r) && (c0..c1).contains(&c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub joints: usize,
    pub shape_dims: usize,
    pub vertices: usize,
    pub seed: u64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            joints: 16,
            shape_dims: 4,
            vertices: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames: usize,
    pub grid: usize,
    pub channels: usize,
    /// Depth grid side is `grid / depth_downsample`.
    pub depth_downsample: usize,
    pub noise_level: f64,
    /// Keypoint noise std in pixels per unit of `noise_level`.
    pub keypoint_noise_px: f64,
    /// Mock lifter noise std, meters.
    pub lifter_noise: f64,
    pub occlusion_rate: f64,
    pub confidence_floor: f64,
    /// Upper frequency of the motion sinusoids, Hz.
    pub smoothness_band: f64,
    pub max_amplitude: f64,
    pub shape_bound: f64,
    pub bump_sigma: f64,
    pub mask_radius: f64,
    pub eval_fraction: f64,
    pub camera: CameraModel,
    pub template: TemplateConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 16,
            grid: 8,
            channels: 32,
            depth_downsample: 1,
            noise_level: 0.1,
            keypoint_noise_px: 10.0,
            lifter_noise: 0.01,
            occlusion_rate: 0.2,
            confidence_floor: 0.05,
            smoothness_band: 0.5,
            max_amplitude: 1.2,
            shape_bound: 1.0,
            bump_sigma: 0.8,
            mask_radius: 1.5,
            eval_fraction: 0.2,
            camera: CameraModel::default(),
            template: TemplateConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        if self.grid == 0 || self.depth_downsample == 0 || self.grid % self.depth_downsample != 0
        {
            return bad(format!(
                "depth downsample {} must divide grid {}",
                self.depth_downsample, self.grid
            ));
        }
        if self.channels < 2 * self.template.joints {
            return bad(format!(
                "{} channels cannot hold {} joint groups",
                self.channels, self.template.joints
            ));
        }
        for (name, v) in [
            ("noise_level", self.noise_level),
            ("keypoint_noise_px", self.keypoint_noise_px),
            ("lifter_noise", self.lifter_noise),
            ("smoothness_band", self.smoothness_band),
            ("max_amplitude", self.max_amplitude),
            ("shape_bound", self.shape_bound),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion_rate {} not in [0, 1]", self.occlusion_rate));
        }
        if !(0.0..1.0).contains(&self.confidence_floor) {
            return bad(format!("confidence_floor {} not in [0, 1)", self.confidence_floor));
        }
        if !(self.bump_sigma > 0.0) || !(self.mask_radius > 0.0) {
            return bad("bump_sigma and mask_radius must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad(format!("eval_fraction {} not in [0, 1)", self.eval_fraction));
        }
        Ok(())
    }

    pub fn build_template(&self) -> Result<BodyTemplate> {
        let t = &self.template;
        build_template(t.joints, t.shape_dims, t.vertices, t.seed)
    }

    pub fn depth_grid(&self) -> usize {
        self.grid / self.depth_downsample
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry::new(self.grid, self.grid, &self.camera, self.bump_sigma)
    }

    /// Geometry of the depth grid; bump width scales with the cell size.
    pub fn depth_geometry(&self) -> GridGeometry {
        let d = self.depth_grid();
        GridGeometry::new(
            d,
            d,
            &self.camera,
            self.bump_sigma / self.depth_downsample as f64,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<PoseParams>,
    pub shape: ShapeParams,
    pub joints: Vec<Vec<Vec3>>,
    pub vertices: Vec<Vec<Vec3>>,
    /// Per-frame twist angle of every joint (zero where there is no twist DOF).
    pub twist: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub rgb: Vec<FeatureGrid>,
    /// Raw depth grids at the reduced resolution.
    pub depth: Vec<FeatureGrid>,
    /// Per-frame, per-cell confidence at full grid resolution (row-major).
    pub confidence: Vec<Vec<f64>>,
    pub person_mask: Vec<Vec<bool>>,
    pub keypoints: Vec<Vec<[f64; 2]>>,
    /// Pelvis-centred, divided by the per-frame RMS joint radius.
    pub lifted: Vec<Vec<Vec3>>,
}

impl Observation {
    pub fn frames(&self) -> usize {
        self.rgb.len()
    }

    /// `m̄_t`: mean confidence over the person mask (whole grid if the mask is empty).
    pub fn mean_confidence(&self) -> Vec<f64> {
        self.confidence
            .iter()
            .zip(&self.person_mask)
            .map(|(conf, mask)| {
                let (sum, n) = conf
                    .iter()
                    .zip(mask)
                    .filter(|(_, m)| **m)
                    .fold((0.0, 0usize), |(s, n), (c, _)| (s + c, n + 1));
                if n == 0 {
                    conf.iter().sum::<f64>() / conf.len() as f64
                } else {
                    sum / n as f64
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub seed: u64,
    pub occlusion: Option<OcclusionSpec>,
    pub truth: GroundTruth,
    pub obs: Observation,
}

impl SequenceSample {
    pub fn frames(&self) -> usize {
        self.truth.joints.len()
    }
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index`; distinct indices give distinct seeds.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

struct Sinusoids {
    terms: Vec<(f64, f64, f64)>,
}

impl Sinusoids {
    fn sample(rng: &mut ChaCha8Rng, band: f64, amplitude: f64) -> Self {
        let n = rng.random_range(1..=3usize);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum::<f64>().max(1e-12);
        let budget = amplitude * rng.random::<f64>();
        let terms = raw
            .iter()
            .map(|a| {
                let freq = band * rng.random::<f64>();
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (a / total * budget, freq, phase)
            })
            .collect();
        Sinusoids { terms }
    }

    fn at(&self, time: f64) -> f64 {
        self.terms
            .iter()
            .map(|(a, f, p)| a * (std::f64::consts::TAU * f * time + p).sin())
            .sum()
    }
}

/// Joint trajectories as sums of up to three sinusoids per axis; leaves only
/// twist about their bone. Shape is uniform in `[-shape_bound, shape_bound]`.
pub fn gen_motion(
    template: &BodyTemplate,
    config: &SynthConfig,
    seed: u64,
) -> Result<(Vec<PoseParams>, ShapeParams)> {
    if config.frames == 0 {
        return Err(Error::InvalidArgument("gen_motion needs T >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = template.joint_count();
    let shape = ShapeParams {
        coefficients: (0..template.shape_dims())
            .map(|_| rng.random_range(-1.0..=1.0) * config.shape_bound)
            .collect(),
    };
    let translation = [
        rng.random_range(-0.2..=0.2),
        rng.random_range(-0.1..=0.1),
        rng.random_range(3.0..=5.0),
    ];
    enum Track {
        Free([Sinusoids; 3]),
        Twist(Vec3, Sinusoids),
    }
    let tracks: Vec<Track> = (0..j)
        .map(|k| {
            let amp = if k == 0 {
                0.5 * config.max_amplitude
            } else {
                config.max_amplitude
            };
            let band = config.smoothness_band;
            match (template.tree.children(k).is_empty(), template.twist_axis(k)) {
                (true, Some(u)) => Track::Twist(u, Sinusoids::sample(&mut rng, band, amp)),
                _ => Track::Free([
                    Sinusoids::sample(&mut rng, band, amp),
                    Sinusoids::sample(&mut rng, band, amp),
                    Sinusoids::sample(&mut rng, band, amp),
                ]),
            }
        })
        .collect();
    let poses = (0..config.frames)
        .map(|t| {
            let time = t as f64 / config.camera.fps;
            let rotations = tracks
                .iter()
                .map(|tr| match tr {
                    Track::Free(axes) => UnitQuaternion::from_rotation_vector([
                        axes[0].at(time),
                        axes[1].at(time),
                        axes[2].at(time),
                    ]),
                    Track::Twist(u, s) => UnitQuaternion::from_rotation_vector(scale(*u, s.at(time))),
                })
                .collect();
            PoseParams {
                rotations,
                translation,
            }
        })
        .collect();
    Ok((poses, shape))
}

/// World joints, skinned vertices and twist angles for generated motion.
pub fn pose_sequence(
    template: &BodyTemplate,
    poses: &[PoseParams],
    shape: &ShapeParams,
) -> Result<GroundTruth> {
    let rest = template.apply_shape(shape)?;
    let mut joints = Vec::with_capacity(poses.len());
    let mut vertices = Vec::with_capacity(poses.len());
    let mut twist = Vec::with_capacity(poses.len());
    for pose in poses {
        let posed = forward_kinematics(&rest.joints, &template.tree, pose)?;
        vertices.push(template.skin_vertices(&rest, &posed));
        let locals: Vec<_> = pose.rotations.iter().map(|q| q.to_matrix()).collect();
        twist.push(twist_angles(template, &locals));
        joints.push(posed.joints);
    }
    Ok(GroundTruth {
        poses: poses.to_vec(),
        shape: shape.clone(),
        joints,
        vertices,
        twist,
    })
}

/// Renders grids, confidence, mask, keypoints and lifted joints for one sequence.
pub fn render_features(
    truth: &GroundTruth,
    config: &SynthConfig,
    noise_level: f64,
    occlusion: Option<&OcclusionSpec>,
    seed: u64,
) -> Result<Observation> {
    if !(noise_level >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise_level must be >= 0, got {noise_level}"
        )));
    }
    let frames = truth.joints.len();
    let (h, w, c) = (config.grid, config.grid, config.channels);
    if let Some(o) = occlusion {
        o.validate(frames, h, w)?;
    }
    let k = config.depth_downsample;
    let (dh, dw) = (h / k, w / k);
    let geo = config.geometry();
    let dgeo = config.depth_geometry();
    let camera = &config.camera;
    let normal = |std: f64| Normal::new(0.0, std).expect("std >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Observation {
        rgb: Vec::with_capacity(frames),
        depth: Vec::with_capacity(frames),
        confidence: Vec::with_capacity(frames),
        person_mask: Vec::with_capacity(frames),
        keypoints: Vec::with_capacity(frames),
        lifted: Vec::with_capacity(frames),
    };
    for t in 0..frames {
        let joints = &truth.joints[t];
        let nj = joints.len();
        let proj: Vec<[f64; 2]> = joints
            .iter()
            .map(|p| camera.project(*p))
            .collect::<Result<_>>()?;
        let multiplier = rng.random_range(0.5..=1.5);
        let feature_noise = normal(noise_level * multiplier);

        let mut rgb = FeatureGrid::zeros(h, w, c);
        for r in 0..h {
            for col in 0..w {
                let cell = rgb.cell_mut(r, col);
                for (j, uv) in proj.iter().enumerate() {
                    let (gy, gx) = geo.continuous(*uv);
                    let b = geo.bump(r, col, gy, gx);
                    cell[2 * j] = b;
                    cell[2 * j + 1] = b * truth.twist[t][j];
                }
                for v in cell.iter_mut() {
                    *v += feature_noise.sample(&mut rng);
                }
            }
        }

        let mut depth = FeatureGrid::zeros(dh, dw, c);
        let mut coarse_conf = vec![0.0; dh * dw];
        for r in 0..dh {
            for col in 0..dw {
                let cell = depth.cell_mut(r, col);
                for (j, uv) in proj.iter().enumerate() {
                    let (gy, gx) = dgeo.continuous(*uv);
                    let b = dgeo.bump(r, col, gy, gx);
                    cell[2 * j] = b * joints[j][2];
                    cell[2 * j + 1] = b;
                }
                let mut sq = 0.0;
                for v in cell.iter_mut() {
                    let n = feature_noise.sample(&mut rng);
                    sq += n * n;
                    *v += n;
                }
                coarse_conf[r * dw + col] = (-(sq / c as f64).sqrt()).exp();
            }
        }
        let mut confidence: Vec<f64> = (0..h * w)
            .map(|i| coarse_conf[(i / w / k) * dw + (i % w) / k])
            .collect();

        if let Some(o) = occlusion.filter(|o| o.covers_frame(t)) {
            for r in 0..h {
                for col in 0..w {
                    if o.covers_cell(r, col) {
                        confidence[r * w + col] = o.confidence_floor;
                        rgb.cell_mut(r, col).fill(0.0);
                    }
                }
            }
            for r in 0..dh {
                for col in 0..dw {
                    let overlaps = (0..k)
                        .any(|a| (0..k).any(|b| o.covers_cell(r * k + a, col * k + b)));
                    if overlaps {
                        depth.cell_mut(r, col).fill(0.0);
                    }
                }
            }
        }

        let radius2 = config.mask_radius * config.mask_radius;
        let centres: Vec<(f64, f64)> = proj.iter().map(|uv| geo.continuous(*uv)).collect();
        let person_mask = (0..h * w)
            .map(|i| {
                let (r, col) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                centres
                    .iter()
                    .any(|(gy, gx)| (r - gy).powi(2) + (col - gx).powi(2) <= radius2)
            })
            .collect();

        let kp_noise = normal(noise_level * config.keypoint_noise_px);
        let keypoints = proj
            .iter()
            .map(|uv| [uv[0] + kp_noise.sample(&mut rng), uv[1] + kp_noise.sample(&mut rng)])
            .collect();

        let lift_noise = normal(config.lifter_noise);
        let mut lifted: Vec<Vec3> = (0..nj)
            .map(|j| {
                let mut p = sub(joints[j], joints[0]);
                if j > 0 {
                    for v in p.iter_mut() {
                        *v += lift_noise.sample(&mut rng);
                    }
                }
                p
            })
            .collect();
        let rms = (lifted.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / nj as f64)
            .sqrt();
        if rms > 0.0 {
            for p in lifted.iter_mut() {
                *p = scale(*p, 1.0 / rms);
            }
        }

        obs.rgb.push(rgb);
        obs.depth.push(depth);
        obs.confidence.push(confidence);
        obs.person_mask.push(person_mask);
        obs.keypoints.push(keypoints);
        obs.lifted.push(lifted);
    }
    Ok(obs)
}

/// Contiguous window of `Binomial(T, rate)` frames over a random rectangle
/// at least half the grid on each side.
pub fn sample_occlusion(config: &SynthConfig, seed: u64) -> Option<OcclusionSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = config.frames;
    let count = Binomial::new(t as u64, config.occlusion_rate)
        .expect("rate validated")
        .sample(&mut rng) as usize;
    if count == 0 {
        return None;
    }
    let start = rng.random_range(0..=t - count);
    let g = config.grid;
    let half = g.div_ceil(2);
    let rh = rng.random_range(half..=g);
    let rw = rng.random_range(half..=g);
    let r0 = rng.random_range(0..=g - rh);
    let c0 = rng.random_range(0..=g - rw);
    Some(OcclusionSpec {
        start,
        end: start + count,
        region: [r0, c0, r0 + rh, c0 + rw],
        confidence_floor: config.confidence_floor,
    })
}

/// One sample as a pure function of `(template, config, seed)`.
pub fn generate_sample(
    template: &BodyTemplate,
    config: &SynthConfig,
    seed: u64,
) -> Result<SequenceSample> {
    let (poses, shape) = gen_motion(template, config, splitmix64(seed ^ 0x6d6f_7469_6f6e))?;
    let truth = pose_sequence(template, &poses, &shape)?;
    let occlusion = sample_occlusion(config, splitmix64(seed ^ 0x6f63_636c));
    let obs = render_features(
        &truth,
        config,
        config.noise_level,
        occlusion.as_ref(),
        splitmix64(seed ^ 0x7265_6e64),
    )?;
    Ok(SequenceSample {
        seed,
        occlusion,
        truth,
        obs,
    })
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub template: BodyTemplate,
    pub train: Vec<SequenceSample>,
    pub eval: Vec<SequenceSample>,
}

/// Whether sample `index` lands in the evaluation split.
pub fn is_eval_index(index: usize, fraction: f64) -> bool {
    ((index + 1) as f64 * fraction).floor() > (index as f64 * fraction).floor()
}

pub fn make_dataset(
    config: &SynthConfig,
    n_sequences: usize,
    seed: u64,
    executor: Executor,
) -> Result<Dataset> {
    config.validate()?;
    if n_sequences == 0 {
        return Err(Error::InvalidArgument("dataset needs n >= 1".into()));
    }
    let template = config.build_template()?;
    let samples = executor.map_range(n_sequences, |i| {
        generate_sample(&template, config, sample_seed(seed, i))
    });
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if is_eval_index(i, config.eval_fraction) {
            eval.push(s?);
        } else {
            train.push(s?);
        }
    }
    Ok(Dataset {
        template,
        train,
        eval,
    })
}

const SAMPLE_HEADER: &str = "depthmesh-sample 1";

fn write_row(s: &mut String, values: impl IntoIterator<Item = f64>) {
    let row: Vec<String> = values.into_iter().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(s, "{}", row.join(" "));
}

fn read_row(lines: &mut TextLines<'_>, what: &str, n: usize) -> Result<Vec<f64>> {
    let row = parse_numbers::<f64>(lines.next(what)?)?;
    if row.len() != n {
        return Err(Error::Parse(format!("{what}: expected {n} values, got {}", row.len())));
    }
    Ok(row)
}

impl SequenceSample {
    /// Line-oriented text form; floats round-trip exactly.
    pub fn to_text(&self) -> String {
        let t = self.frames();
        let j = self.truth.joints[0].len();
        let v = self.truth.vertices[0].len();
        let rgb = &self.obs.rgb[0];
        let depth = &self.obs.depth[0];
        let mut s = String::new();
        let _ = writeln!(s, "{SAMPLE_HEADER}");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(
            s,
            "dims {t} {j} {v} {} {} {} {} {} {}",
            self.truth.shape.coefficients.len(),
            rgb.height,
            rgb.width,
            rgb.channels(),
            depth.height,
            depth.width
        );
        match &self.occlusion {
            None => {
                let _ = writeln!(s, "occlusion none");
            }
            Some(o) => {
                let [r0, c0, r1, c1] = o.region;
                let _ = writeln!(
                    s,
                    "occlusion {} {} {r0} {c0} {r1} {c1} {:?}",
                    o.start, o.end, o.confidence_floor
                );
            }
        }
        let _ = writeln!(s, "gt_shape");
        write_row(&mut s, self.truth.shape.coefficients.iter().copied());
        let _ = writeln!(s, "gt_poses");
        for p in &self.truth.poses {
            write_row(
                &mut s,
                p.translation
                    .iter()
                    .copied()
                    .chain(p.rotations.iter().flat_map(|q| [q.w, q.x, q.y, q.z])),
            );
        }
        let vec_rows = |s: &mut String, name: &str, rows: &[Vec<Vec3>]| {
            let _ = writeln!(s, "{name}");
            for frame in rows {
                write_row(s, frame.iter().flatten().copied());
            }
        };
        vec_rows(&mut s, "gt_joints", &self.truth.joints);
        vec_rows(&mut s, "gt_vertices", &self.truth.vertices);
        let _ = writeln!(s, "gt_twist");
        for row in &self.truth.twist {
            write_row(&mut s, row.iter().copied());
        }
        for (name, grids) in [("rgb", &self.obs.rgb), ("depth", &self.obs.depth)] {
            let _ = writeln!(s, "{name}");
            for g in grids {
                for r in 0..g.cells.rows() {
                    write_row(&mut s, g.cells.row(r).iter().copied());
                }
            }
        }
        let _ = writeln!(s, "confidence");
        for row in &self.obs.confidence {
            write_row(&mut s, row.iter().copied());
        }
        let _ = writeln!(s, "person_mask");
        for row in &self.obs.person_mask {
            let bits: Vec<&str> = row.iter().map(|m| if *m { "1" } else { "0" }).collect();
            let _ = writeln!(s, "{}", bits.join(" "));
        }
        let _ = writeln!(s, "keypoints");
        for frame in &self.obs.keypoints {
            write_row(&mut s, frame.iter().flatten().copied());
        }
        vec_rows(&mut s, "lifted", &self.obs.lifted);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = TextLines::new(text);
        lines.expect(SAMPLE_HEADER)?;
        let seed_line = lines.next("seed")?;
        let seed: u64 = seed_line
            .strip_prefix("seed ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad seed line '{seed_line}'")))?;
        let dims_line = lines.next("dims")?;
        let dims = parse_numbers::<usize>(
            dims_line
                .strip_prefix("dims ")
                .ok_or_else(|| Error::Parse(format!("bad dims line '{dims_line}'")))?,
        )?;
        let [t, j, v, sd, h, w, c, dh, dw] = dims[..] else {
            return Err(Error::Parse("dims needs 9 values".into()));
        };
        if t == 0 {
            return Err(Error::Parse("sample has no frames".into()));
        }
        let occ_line = lines.next("occlusion")?;
        let occ = occ_line
            .strip_prefix("occlusion ")
            .ok_or_else(|| Error::Parse(format!("bad occlusion line '{occ_line}'")))?;
        let occlusion = if occ.trim() == "none" {
            None
        } else {
            let r = parse_numbers::<f64>(occ)?;
            if r.len() != 7 {
                return Err(Error::Parse("occlusion needs 7 values".into()));
            }
            Some(OcclusionSpec {
                start: r[0] as usize,
                end: r[1] as usize,
                region: [r[2] as usize, r[3] as usize, r[4] as usize, r[5] as usize],
                confidence_floor: r[6],
            })
        };
        lines.expect("gt_shape")?;
        let shape = ShapeParams {
            coefficients: read_row(&mut lines, "gt_shape", sd)?,
        };
        lines.expect("gt_poses")?;
        let mut poses = Vec::with_capacity(t);
        for _ in 0..t {
            let r = read_row(&mut lines, "gt_poses", 3 + 4 * j)?;
            poses.push(PoseParams {
                translation: [r[0], r[1], r[2]],
                rotations: r[3..]
                    .chunks(4)
                    .map(|q| UnitQuaternion {
                        w: q[0],
                        x: q[1],
                        y: q[2],
                        z: q[3],
                    })
                    .collect(),
            });
        }
        let vec_rows = |lines: &mut TextLines<'_>, name: &str, n: usize| -> Result<Vec<Vec<Vec3>>> {
            lines.expect(name)?;
            (0..t)
                .map(|_| {
                    let r = read_row(lines, name, 3 * n)?;
                    Ok(r.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
                })
                .collect()
        };
        let joints = vec_rows(&mut lines, "gt_joints", j)?;
        let vertices = vec_rows(&mut lines, "gt_vertices", v)?;
        lines.expect("gt_twist")?;
        let twist = (0..t)
            .map(|_| read_row(&mut lines, "gt_twist", j))
            .collect::<Result<_>>()?;
        let mut grids = |name: &str, gh: usize, gw: usize| -> Result<Vec<FeatureGrid>> {
            lines.expect(name)?;
            (0..t)
                .map(|_| {
                    let mut data = Vec::with_capacity(gh * gw * c);
                    for _ in 0..gh * gw {
                        data.extend(read_row(&mut lines, name, c)?);
                    }
                    FeatureGrid::new(gh, gw, Matrix::from_vec(gh * gw, c, data)?)
                })
                .collect()
        };
        let rgb = grids("rgb", h, w)?;
        let depth = grids("depth", dh, dw)?;
        lines.expect("confidence")?;
        let confidence = (0..t)
            .map(|_| read_row(&mut lines, "confidence", h * w))
            .collect::<Result<_>>()?;
        lines.expect("person_mask")?;
        let person_mask = (0..t)
            .map(|_| {
                let r = parse_numbers::<u8>(lines.next("person_mask")?)?;
                if r.len() != h * w {
                    return Err(Error::Parse("person_mask row length".into()));
                }
                Ok(r.into_iter().map(|b| b != 0).collect())
            })
            .collect::<Result<_>>()?;
        lines.expect("keypoints")?;
        let keypoints = (0..t)
            .map(|_| {
                let r = read_row(&mut lines, "keypoints", 2 * j)?;
                Ok(r.chunks(2).map(|p| [p[0], p[1]]).collect())
            })
            .collect::<Result<_>>()?;
        let lifted = vec_rows(&mut lines, "lifted", j)?;
        Ok(SequenceSample {
            seed,
            occlusion,
            truth: GroundTruth {
                poses,
                shape,
                joints,
                vertices,
                twist,
            },
            obs: Observation {
                rgb,
                depth,
                confidence,
                person_mask,
                keypoints,
                lifted,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::bone_lengths;

    fn small_config() -> SynthConfig {
        SynthConfig {
            frames: 8,
            ..SynthConfig::default()
        }
    }

    fn sample(config: &SynthConfig, seed: u64) -> SequenceSample {
        let template = config.build_template().unwrap();
        generate_sample(&template, config, seed).unwrap()
    }

    #[test]
    fn projection_hand_values() {
        let cam = CameraModel::default();
        assert_eq!(cam.project([0.0, 0.0, 4.0]).unwrap(), [128.0, 128.0]);
        assert_eq!(cam.project([0.4, 0.8, 4.0]).unwrap(), [178.0, 28.0]);
        assert!(cam.project([0.0, 0.0, -1.0]).is_err());
        assert!(CameraModel {
            focal: 0.0,
            ..CameraModel::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn gen_motion_is_deterministic() {
        let config = small_config();
        let template = config.build_template().unwrap();
        let a = gen_motion(&template, &config, 9).unwrap();
        let b = gen_motion(&template, &config, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_motion(&template, &config, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_band_gives_constant_pose() {
        let config = SynthConfig {
            smoothness_band: 0.0,
            ..small_config()
        };
        let template = config.build_template().unwrap();
        let (poses, _) = gen_motion(&template, &config, 4).unwrap();
        for p in &poses[1..] {
            assert_eq!(p, &poses[0]);
        }
    }

    #[test]
    fn motion_keeps_shaped_bone_lengths() {
        let config = small_config();
        let template = config.build_template().unwrap();
        let (poses, shape) = gen_motion(&template, &config, 21).unwrap();
        let truth = pose_sequence(&template, &poses, &shape).unwrap();
        let rest = template.apply_shape(&shape).unwrap();
        let want = bone_lengths(&rest.joints, &template.tree);
        for frame in &truth.joints {
            for (a, b) in bone_lengths(frame, &template.tree).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(shape.coefficients.iter().all(|c| c.abs() <= config.shape_bound));
    }

    #[test]
    fn leaves_only_twist() {
        let config = small_config();
        let template = config.build_template().unwrap();
        let (poses, _) = gen_motion(&template, &config, 2).unwrap();
        for k in 0..template.joint_count() {
            if !template.tree.children(k).is_empty() {
                continue;
            }
            let u = template.twist_axis(k).unwrap();
            for p in &poses {
                let v = p.rotations[k].to_rotation_vector();
                let along = crate::rotation::dot(v, u);
                let perp = sub(v, scale(u, along));
                assert!(crate::rotation::norm(perp) < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_render_limits() {
        let config = SynthConfig {
            noise_level: 0.0,
            lifter_noise: 0.0,
            ..small_config()
        };
        let template = config.build_template().unwrap();
        let (poses, shape) = gen_motion(&template, &config, 5).unwrap();
        let truth = pose_sequence(&template, &poses, &shape).unwrap();
        let obs = render_features(&truth, &config, 0.0, None, 1).unwrap();
        for t in 0..config.frames {
            for (kp, p) in obs.keypoints[t].iter().zip(&truth.joints[t]) {
                let want = config.camera.project(*p).unwrap();
                assert!((kp[0] - want[0]).abs() < 1e-9 && (kp[1] - want[1]).abs() < 1e-9);
            }
            assert!(obs.confidence[t].iter().all(|c| *c == 1.0));
            assert_eq!(obs.lifted[t][0], [0.0; 3]);
        }
        assert!(obs.mean_confidence().iter().all(|m| *m == 1.0));
    }

    #[test]
    fn noiseless_depth_decodes_at_joint_cell() {
        let config = SynthConfig {
            noise_level: 0.0,
            ..small_config()
        };
        let s = sample(&config, 12);
        let geo = config.depth_geometry();
        for t in 0..config.frames {
            for (j, p) in s.truth.joints[t].iter().enumerate() {
                let uv = config.camera.project(*p).unwrap();
                let (r, c) = geo.cell_of(uv);
                let cell = s.obs.depth[t].cell(r, c);
                if cell[2 * j + 1] > 1e-6 {
                    assert!((cell[2 * j] / cell[2 * j + 1] - p[2]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn full_occlusion_floors_mean_confidence() {
        let config = small_config();
        let s = sample(&config, 3);
        let occ = OcclusionSpec {
            start: 3,
            end: 6,
            region: [0, 0, 8, 8],
            confidence_floor: 0.05,
        };
        let clear = render_features(&s.truth, &config, 0.1, None, 77).unwrap();
        let occluded = render_features(&s.truth, &config, 0.1, Some(&occ), 77).unwrap();
        let (a, b) = (clear.mean_confidence(), occluded.mean_confidence());
        for t in 0..config.frames {
            if (3..6).contains(&t) {
                assert!(b[t] <= 0.05 + 1e-15);
                assert!(occluded.rgb[t].cells.data().iter().all(|v| *v == 0.0));
            } else {
                assert_eq!(a[t], b[t]);
            }
        }
    }

    #[test]
    fn raising_floor_never_lowers_confidence() {
        let config = small_config();
        let s = sample(&config, 8);
        let spec = |floor| OcclusionSpec {
            start: 1,
            end: 5,
            region: [1, 2, 7, 8],
            confidence_floor: floor,
        };
        let mut prev: Option<Vec<f64>> = None;
        for floor in [0.0, 0.05, 0.3, 0.9] {
            let o = render_features(&s.truth, &config, 0.1, Some(&spec(floor)), 4).unwrap();
            let m = o.mean_confidence();
            if let Some(p) = &prev {
                assert!(m.iter().zip(p).all(|(a, b)| a >= b));
            }
            prev = Some(m);
        }
    }

    #[test]
    fn render_is_deterministic_and_validates() {
        let config = small_config();
        let s = sample(&config, 6);
        let a = render_features(&s.truth, &config, 0.1, None, 5).unwrap();
        let b = render_features(&s.truth, &config, 0.1, None, 5).unwrap();
        assert_eq!(a, b);
        assert!(render_features(&s.truth, &config, -0.1, None, 5).is_err());
        let bad = OcclusionSpec {
            start: 4,
            end: 20,
            region: [0, 0, 2, 2],
            confidence_floor: 0.1,
        };
        assert!(render_features(&s.truth, &config, 0.1, Some(&bad), 5).is_err());
        let mut behind = s.truth.clone();
        behind.joints[0][3][2] = -1.0;
        assert!(render_features(&behind, &config, 0.1, None, 5).is_err());
    }

    #[test]
    fn coarse_depth_grid() {
        let config = SynthConfig {
            depth_downsample: 2,
            ..small_config()
        };
        let s = sample(&config, 1);
        assert_eq!((s.obs.depth[0].height, s.obs.depth[0].width), (4, 4));
        assert_eq!(s.obs.confidence[0].len(), 64);
        assert!(SynthConfig {
            depth_downsample: 3,
            ..small_config()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn split_and_streaming() {
        let config = SynthConfig {
            frames: 4,
            ..SynthConfig::default()
        };
        let eval: Vec<usize> = (0..200).filter(|&i| is_eval_index(i, 0.2)).collect();
        assert_eq!(eval.len(), 40);
        let small = make_dataset(&config, 5, 3, Executor::Sequential).unwrap();
        let big = make_dataset(&config, 10, 3, Executor::Parallel).unwrap();
        assert_eq!((small.train.len(), small.eval.len()), (4, 1));
        assert_eq!(small.train[..], big.train[..4]);
        assert_eq!(small.eval[0], big.eval[0]);
        let mut seeds: Vec<u64> = big.train.iter().chain(&big.eval).map(|s| s.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
    }

    #[test]
    fn occlusion_rate_within_binomial_tolerance() {
        let config = SynthConfig::default();
        let n = 200;
        let total: usize = (0..n)
            .map(|i| {
                sample_occlusion(&config, sample_seed(11, i)).map_or(0, |o| o.end - o.start)
            })
            .sum();
        let trials = (n * config.frames) as f64;
        let p = config.occlusion_rate;
        let sd = (trials * p * (1.0 - p)).sqrt();
        assert!((total as f64 - trials * p).abs() < 4.0 * sd);
    }

    #[test]
    fn occluded_frames_have_lower_mean_confidence() {
        let config = SynthConfig {
            occlusion_rate: 0.5,
            ..SynthConfig::default()
        };
        let data = make_dataset(&config, 20, 2, Executor::Sequential).unwrap();
        let (mut occ, mut clear) = (Vec::new(), Vec::new());
        for s in data.train.iter().chain(&data.eval) {
            let m = s.obs.mean_confidence();
            for (t, v) in m.iter().enumerate() {
                match &s.occlusion {
                    Some(o) if o.covers_frame(t) => occ.push(*v),
                    _ => clear.push(*v),
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&occ) + 0.2 < mean(&clear));
    }

    #[test]
    fn text_round_trip() {
        let config = SynthConfig {
            frames: 3,
            depth_downsample: 2,
            occlusion_rate: 1.0,
            ..SynthConfig::default()
        };
        let s = sample(&config, 14);
        assert!(s.occlusion.is_some());
        let text = s.to_text();
        assert!(text.starts_with("depthmesh-sample 1\n"));
        let back = SequenceSample::from_text(&text).unwrap();
        assert_eq!(back, s);
        assert!(SequenceSample::from_text("depthmesh-sample 2\n").is_err());
        let truncated = &text[..text.len() / 2];
        assert!(SequenceSample::from_text(truncated).is_err());
    }
}
