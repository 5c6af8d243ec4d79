//! SMPL-lite: a small parametric body with a kinematic tree, a linear shape
//! basis, forward kinematics and linear blend skinning.
//!
//! Every shape direction rescales bones along their own rest direction, so
//! rest bone directions do not depend on shape and bone lengths are linear in
//! the coefficients.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rotation::{
    add, cross, dot, mat_mul, mat_vec, norm, normalize, scale, sub, Mat3, UnitQuaternion, Vec3,
    IDENTITY3,
};

/// Rooted tree over joints indexed so that every parent precedes its children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    subtrees: Vec<Vec<usize>>,
}

impl KinematicTree {
    /// Joint 0 must be the only root and `parents[j] < j` for every other joint.
    pub fn new(parents: Vec<Option<usize>>) -> Result<Self> {
        if parents.is_empty() || parents[0].is_some() {
            return Err(Error::InvalidArgument("joint 0 must be the root".into()));
        }
        let mut children = vec![Vec::new(); parents.len()];
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => children[*p].push(j),
                Some(p) => {
                    return Err(Error::InvalidArgument(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )))
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "joint {j} is a second root"
                    )))
                }
            }
        }
        let mut subtrees: Vec<Vec<usize>> = (0..parents.len()).map(|j| vec![j]).collect();
        for j in (1..parents.len()).rev() {
            let p = parents[j].expect("checked above");
            let sub = subtrees[j].clone();
            subtrees[p].extend(sub);
        }
        for s in &mut subtrees {
            s.sort_unstable();
        }
        Ok(KinematicTree {
            parents,
            children,
            subtrees,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn bone_count(&self) -> usize {
        self.parents.len() - 1
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j]
    }

    /// `j` and all of its descendants, ascending.
    pub fn subtree(&self, j: usize) -> &[usize] {
        &self.subtrees[j]
    }

    /// `(parent, child)` edges; bone `b` ends at joint `b + 1`.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..self.parents.len()).map(|c| (self.parents[c].expect("non-root"), c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SegmentEnd {
    Joint(usize),
    /// Continues the incoming bone of the start joint by this fraction of its length.
    Extension(f64),
}

/// A rigid piece of the surface: a bone, or a stub past a leaf joint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub owner: usize,
    pub start: usize,
    pub end: SegmentEnd,
}

/// Vertex position = start + along · segment vector + lateral.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub segment: usize,
    pub along: f64,
    pub lateral: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyTemplate {
    pub tree: KinematicTree,
    pub rest_joints: Vec<Vec3>,
    pub rest_vertices: Vec<Vec3>,
    /// `V × J`, rows sum to one.
    pub skin_weights: Matrix,
    /// Per shape coefficient, displacement of every joint.
    pub joint_basis: Vec<Vec<Vec3>>,
    /// Per shape coefficient, displacement of every vertex.
    pub vertex_basis: Vec<Vec<Vec3>>,
    pub template_bone_lengths: Vec<f64>,
    pub segments: Vec<Segment>,
    pub attachments: Vec<Attachment>,
    sparse_weights: Vec<Vec<(usize, f64)>>,
}

/// Rest pose after shaping or rescaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestPose {
    pub joints: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// Local rotation of each joint relative to its parent.
    pub rotations: Vec<UnitQuaternion>,
    /// World position offset of the root, meters.
    pub translation: Vec3,
}

impl PoseParams {
    pub fn identity(joints: usize) -> Self {
        PoseParams {
            rotations: vec![UnitQuaternion::IDENTITY; joints],
            translation: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub coefficients: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(dims: usize) -> Self {
        ShapeParams {
            coefficients: vec![0.0; dims],
        }
    }

    pub fn clamped(mut self, bound: f64) -> Self {
        for c in &mut self.coefficients {
            *c = c.clamp(-bound, bound);
        }
        self
    }
}

/// World joints and global joint rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Posed {
    pub joints: Vec<Vec3>,
    pub globals: Vec<Mat3>,
}

pub const HUMANOID_JOINTS: usize = 16;

pub const HUMANOID_NAMES: [&str; HUMANOID_JOINTS] = [
    "pelvis",
    "spine",
    "neck",
    "head",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

const SHAPE_STEP: f64 = 0.08;

struct Skeleton {
    parents: Vec<Option<usize>>,
    rest: Vec<Vec3>,
    /// Shape coefficient × bone scale rates.
    rates: Vec<Vec<f64>>,
    leaf_fraction: Vec<f64>,
    radius: Vec<f64>,
    leaf_radius: Vec<f64>,
}

fn humanoid(shape_dims: usize, rng: &mut ChaCha8Rng) -> Skeleton {
    let parents = vec![
        None,
        Some(0),
        Some(1),
        Some(2),
        Some(0),
        Some(4),
        Some(5),
        Some(0),
        Some(7),
        Some(8),
        Some(2),
        Some(10),
        Some(11),
        Some(2),
        Some(13),
        Some(14),
    ];
    let rest = vec![
        [0.0, 0.0, 0.0],
        [0.0, 0.25, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, 0.7, 0.0],
        [0.1, 0.0, 0.0],
        [0.1, -0.42, 0.0],
        [0.1, -0.82, 0.0],
        [-0.1, 0.0, 0.0],
        [-0.1, -0.42, 0.0],
        [-0.1, -0.82, 0.0],
        [0.17, 0.5, 0.0],
        [0.45, 0.5, 0.0],
        [0.7, 0.5, 0.0],
        [-0.17, 0.5, 0.0],
        [-0.45, 0.5, 0.0],
        [-0.7, 0.5, 0.0],
    ];
    // Bone b ends at joint b + 1.
    let legs = [5, 6, 8, 9];
    let arms = [11, 12, 14, 15];
    let width = [4, 7, 10, 13];
    let mut rates = Vec::with_capacity(shape_dims);
    for k in 0..shape_dims {
        let mut r = vec![0.0; 15];
        match k {
            0 => r.iter_mut().for_each(|v| *v = SHAPE_STEP),
            1 => legs.iter().for_each(|&c| r[c - 1] = SHAPE_STEP),
            2 => arms.iter().for_each(|&c| r[c - 1] = SHAPE_STEP),
            3 => width.iter().for_each(|&c| r[c - 1] = SHAPE_STEP),
            _ => r
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.3..0.3) * SHAPE_STEP),
        }
        rates.push(r);
    }
    let mut leaf_fraction = vec![0.0; 16];
    leaf_fraction[3] = 0.75;
    leaf_fraction[6] = 0.2;
    leaf_fraction[9] = 0.2;
    leaf_fraction[12] = 0.4;
    leaf_fraction[15] = 0.4;
    let mut radius = vec![0.05; 15];
    radius[0] = 0.12;
    radius[1] = 0.12;
    radius[2] = 0.05;
    for c in [11, 12, 14, 15] {
        radius[c - 1] = 0.04;
    }
    for c in [4, 7, 10, 13] {
        radius[c - 1] = 0.06;
    }
    let mut leaf_radius = vec![0.0; 16];
    leaf_radius[3] = 0.09;
    leaf_radius[6] = 0.04;
    leaf_radius[9] = 0.04;
    leaf_radius[12] = 0.03;
    leaf_radius[15] = 0.03;
    Skeleton {
        parents,
        rest,
        rates,
        leaf_fraction,
        radius,
        leaf_radius,
    }
}

/// Root with three straight chains (up, down-left, down-right).
fn chains(joint_count: usize, shape_dims: usize, rng: &mut ChaCha8Rng) -> Skeleton {
    let dirs = [[0.0, 1.0, 0.0], [0.3, -1.0, 0.0], [-0.3, -1.0, 0.0]];
    let mut parents = vec![None];
    let mut rest = vec![[0.0; 3]];
    let mut last = [0usize; 3];
    let mut chain_of = vec![usize::MAX];
    for j in 1..joint_count {
        let c = (j - 1) % 3;
        let d = normalize(dirs[c]).expect("nonzero");
        parents.push(Some(last[c]));
        rest.push(add(rest[last[c]], scale(d, 0.25)));
        last[c] = j;
        chain_of.push(c);
    }
    let bones = joint_count - 1;
    let mut rates = Vec::with_capacity(shape_dims);
    for k in 0..shape_dims {
        let r = (0..bones)
            .map(|b| {
                let child = b + 1;
                match k {
                    0 => SHAPE_STEP,
                    1 if chain_of[child] != 0 => SHAPE_STEP,
                    2 if chain_of[child] == 0 => SHAPE_STEP,
                    3 if parents[child] == Some(0) && chain_of[child] != 0 => SHAPE_STEP,
                    1..=3 => 0.0,
                    _ => rng.random_range(-0.3..0.3) * SHAPE_STEP,
                }
            })
            .collect();
        rates.push(r);
    }
    let tree_children = {
        let mut ch = vec![0usize; joint_count];
        for p in parents.iter().flatten() {
            ch[*p] += 1;
        }
        ch
    };
    let leaf_fraction = (0..joint_count)
        .map(|j| if tree_children[j] == 0 { 0.3 } else { 0.0 })
        .collect();
    let leaf_radius = (0..joint_count)
        .map(|j| if tree_children[j] == 0 { 0.04 } else { 0.0 })
        .collect();
    Skeleton {
        parents,
        rest,
        rates,
        leaf_fraction,
        radius: vec![0.05; bones],
        leaf_radius,
    }
}

fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab).max(1e-300)).clamp(0.0, 1.0);
    norm(sub(p, add(a, scale(ab, t))))
}

fn perpendicular(d: Vec3, rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if let Some(p) = normalize(sub(v, scale(d, dot(v, d)))) {
            if norm(sub(v, scale(d, dot(v, d)))) > 0.1 {
                return p;
            }
        }
    }
}

/// Procedural template: the 16-joint humanoid when `joint_count == 16`,
/// otherwise a three-chain skeleton with the same shape directions.
pub fn build_template(
    joint_count: usize,
    shape_dims: usize,
    vertex_count: usize,
    seed: u64,
) -> Result<BodyTemplate> {
    if joint_count < 4 || shape_dims < 1 || vertex_count < joint_count {
        return Err(Error::InvalidArgument(format!(
            "template needs J >= 4, S >= 1, V >= J (got J={joint_count}, S={shape_dims}, V={vertex_count})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sk = if joint_count == HUMANOID_JOINTS {
        humanoid(shape_dims, &mut rng)
    } else {
        chains(joint_count, shape_dims, &mut rng)
    };
    let tree = KinematicTree::new(sk.parents.clone())?;

    let mut segments = Vec::new();
    let mut seg_radius = Vec::new();
    for (p, c) in tree.bones() {
        segments.push(Segment {
            owner: p,
            start: p,
            end: SegmentEnd::Joint(c),
        });
        seg_radius.push(sk.radius[c - 1]);
    }
    for j in 0..joint_count {
        if tree.children(j).is_empty() {
            segments.push(Segment {
                owner: j,
                start: j,
                end: SegmentEnd::Extension(sk.leaf_fraction[j]),
            });
            seg_radius.push(sk.leaf_radius[j]);
        }
    }

    let rest_joints = sk.rest.clone();
    let seg_vec = |s: &Segment| segment_vector(&tree, &rest_joints, s);
    let lengths: Vec<f64> = segments.iter().map(|s| norm(seg_vec(s))).collect();
    let total: f64 = lengths.iter().sum();
    // Largest-remainder allocation of vertices proportional to segment length.
    let quotas: Vec<f64> = lengths
        .iter()
        .map(|l| l / total * vertex_count as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = vertex_count - counts.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[s] += 1;
        missing -= 1;
    }

    let mut attachments = Vec::with_capacity(vertex_count);
    for (s, &n) in counts.iter().enumerate() {
        let dir = normalize(seg_vec(&segments[s])).expect("positive rest length");
        for i in 0..n {
            let along = (i as f64 + rng.random_range(0.0..1.0)) / n as f64;
            let r = seg_radius[s] * rng.random_range(0.7..1.0);
            let lateral = scale(perpendicular(dir, &mut rng), r);
            attachments.push(Attachment {
                segment: s,
                along,
                lateral,
            });
        }
    }

    let rest_vertices = derive_vertices(&tree, &segments, &attachments, &rest_joints);

    let mut sparse_weights = Vec::with_capacity(vertex_count);
    let mut skin_weights = Matrix::zeros(vertex_count, joint_count);
    for (v, pos) in rest_vertices.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = segments
            .iter()
            .enumerate()
            .map(|(s, seg)| {
                let a = rest_joints[seg.start];
                (point_segment_distance(*pos, a, add(a, seg_vec(seg))), s)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut row: Vec<(usize, f64)> = Vec::new();
        for &(dist, s) in d.iter().take(2) {
            let w = 1.0 / (dist + 0.01);
            let owner = segments[s].owner;
            match row.iter_mut().find(|(j, _)| *j == owner) {
                Some(e) => e.1 += w,
                None => row.push((owner, w)),
            }
        }
        row.sort_by_key(|e| e.0);
        let total: f64 = row.iter().map(|e| e.1).sum();
        for e in &mut row {
            e.1 /= total;
            skin_weights.set(v, e.0, e.1);
        }
        sparse_weights.push(row);
    }

    let mut joint_basis = Vec::with_capacity(shape_dims);
    let mut vertex_basis = Vec::with_capacity(shape_dims);
    for rates in &sk.rates {
        let mut disp = vec![[0.0; 3]; joint_count];
        for (p, c) in tree.bones() {
            let offset = sub(rest_joints[c], rest_joints[p]);
            disp[c] = add(disp[p], scale(offset, rates[c - 1]));
        }
        // Vertices are affine in joints; the lateral part is shape-free.
        let zero_lateral: Vec<Attachment> = attachments
            .iter()
            .map(|a| Attachment {
                lateral: [0.0; 3],
                ..*a
            })
            .collect();
        vertex_basis.push(derive_vertices(&tree, &segments, &zero_lateral, &disp));
        joint_basis.push(disp);
    }

    let template_bone_lengths = bone_lengths(&rest_joints, &tree);
    Ok(BodyTemplate {
        tree,
        rest_joints,
        rest_vertices,
        skin_weights,
        joint_basis,
        vertex_basis,
        template_bone_lengths,
        segments,
        attachments,
        sparse_weights,
    })
}

fn segment_vector(tree: &KinematicTree, joints: &[Vec3], s: &Segment) -> Vec3 {
    match s.end {
        SegmentEnd::Joint(c) => sub(joints[c], joints[s.start]),
        SegmentEnd::Extension(f) => match tree.parent(s.start) {
            Some(p) => scale(sub(joints[s.start], joints[p]), f),
            None => [0.0; 3],
        },
    }
}

fn derive_vertices(
    tree: &KinematicTree,
    segments: &[Segment],
    attachments: &[Attachment],
    joints: &[Vec3],
) -> Vec<Vec3> {
    attachments
        .iter()
        .map(|a| {
            let s = &segments[a.segment];
            add(
                add(joints[s.start], scale(segment_vector(tree, joints, s), a.along)),
                a.lateral,
            )
        })
        .collect()
}

/// Euclidean length of every bone, in bone order.
pub fn bone_lengths(joints: &[Vec3], tree: &KinematicTree) -> Vec<f64> {
    tree.bones().map(|(p, c)| norm(sub(joints[c], joints[p]))).collect()
}

/// Rotates rest offsets down the tree. Positions are exact for any local rotations.
pub fn forward_kinematics(
    rest_joints: &[Vec3],
    tree: &KinematicTree,
    pose: &PoseParams,
) -> Result<Posed> {
    let locals: Vec<Mat3> = pose.rotations.iter().map(|q| q.to_matrix()).collect();
    forward_kinematics_matrices(rest_joints, tree, &locals, pose.translation)
}

pub fn forward_kinematics_matrices(
    rest_joints: &[Vec3],
    tree: &KinematicTree,
    locals: &[Mat3],
    translation: Vec3,
) -> Result<Posed> {
    let j = tree.joint_count();
    if rest_joints.len() != j || locals.len() != j {
        return Err(Error::shape(
            "forward_kinematics",
            format!(
                "{} rest joints, {} rotations, tree of {j}",
                rest_joints.len(),
                locals.len()
            ),
        ));
    }
    let mut joints = vec![[0.0; 3]; j];
    let mut globals = vec![IDENTITY3; j];
    joints[0] = add(rest_joints[0], translation);
    globals[0] = locals[0];
    for c in 1..j {
        let p = tree.parent(c).expect("non-root");
        globals[c] = mat_mul(&globals[p], &locals[c]);
        joints[c] = add(joints[p], mat_vec(&globals[p], sub(rest_joints[c], rest_joints[p])));
    }
    Ok(Posed { joints, globals })
}

impl BodyTemplate {
    pub fn joint_count(&self) -> usize {
        self.rest_joints.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn shape_dims(&self) -> usize {
        self.joint_basis.len()
    }

    pub fn bone_count(&self) -> usize {
        self.tree.bone_count()
    }

    /// Nonzero skin weights of vertex `v` as `(joint, weight)`.
    pub fn vertex_weights(&self, v: usize) -> &[(usize, f64)] {
        &self.sparse_weights[v]
    }

    pub fn rest_pose(&self) -> RestPose {
        RestPose {
            joints: self.rest_joints.clone(),
            vertices: self.rest_vertices.clone(),
        }
    }

    pub fn apply_shape(&self, shape: &ShapeParams) -> Result<RestPose> {
        if shape.coefficients.len() != self.shape_dims() {
            return Err(Error::shape(
                "apply_shape",
                format!(
                    "{} coefficients for {} shape dims",
                    shape.coefficients.len(),
                    self.shape_dims()
                ),
            ));
        }
        let mut joints = self.rest_joints.clone();
        let mut vertices = self.rest_vertices.clone();
        for (k, &s) in shape.coefficients.iter().enumerate() {
            for (j, d) in joints.iter_mut().zip(&self.joint_basis[k]) {
                *j = add(*j, scale(*d, s));
            }
            for (v, d) in vertices.iter_mut().zip(&self.vertex_basis[k]) {
                *v = add(*v, scale(*d, s));
            }
        }
        Ok(RestPose { joints, vertices })
    }

    /// Vertices re-derived from their segment attachments on `joints`.
    pub fn vertices_for(&self, joints: &[Vec3]) -> Vec<Vec3> {
        derive_vertices(&self.tree, &self.segments, &self.attachments, joints)
    }

    /// Rescales every bone offset of `rest` to the target length, root first.
    pub fn scale_along_tree(&self, rest: &RestPose, targets: &[f64]) -> Result<RestPose> {
        if targets.len() != self.bone_count() {
            return Err(Error::shape(
                "scale_along_tree",
                format!("{} targets for {} bones", targets.len(), self.bone_count()),
            ));
        }
        if let Some(b) = targets.iter().position(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "target length for bone {b} must be positive, got {}",
                targets[b]
            )));
        }
        let mut joints = rest.joints.clone();
        for (p, c) in self.tree.bones() {
            let dir = normalize(sub(rest.joints[c], rest.joints[p])).ok_or_else(|| {
                Error::InvalidArgument(format!("rest bone {} has zero length", c - 1))
            })?;
            joints[c] = add(joints[p], scale(dir, targets[c - 1]));
        }
        let vertices = self.vertices_for(&joints);
        Ok(RestPose { joints, vertices })
    }

    /// [`Self::scale_along_tree`] applied to the unshaped template.
    pub fn scale_template_along_tree(&self, targets: &[f64]) -> Result<RestPose> {
        self.scale_along_tree(&self.rest_pose(), targets)
    }

    /// Linear blend skinning of `rest` vertices with posed joint transforms.
    pub fn skin_vertices(&self, rest: &RestPose, posed: &Posed) -> Vec<Vec3> {
        rest.vertices
            .iter()
            .enumerate()
            .map(|(v, pos)| {
                let mut out = [0.0; 3];
                for &(j, w) in &self.sparse_weights[v] {
                    let local = sub(*pos, rest.joints[j]);
                    let moved = add(mat_vec(&posed.globals[j], local), posed.joints[j]);
                    out = add(out, scale(moved, w));
                }
                out
            })
            .collect()
    }

    /// Axis used for twist at joint `j`: the rest direction to its only child,
    /// or of its incoming bone for leaves. `None` for branching joints.
    pub fn twist_axis(&self, j: usize) -> Option<Vec3> {
        let ch = self.tree.children(j);
        match ch.len() {
            0 => self
                .tree
                .parent(j)
                .and_then(|p| normalize(sub(self.rest_joints[j], self.rest_joints[p]))),
            1 => normalize(sub(self.rest_joints[ch[0]], self.rest_joints[j])),
            _ => None,
        }
    }

    /// Secondary direction for branching joints: between the second and last
    /// child (hip to hip, shoulder to shoulder), or to the second child when
    /// there are only two.
    pub fn frame_vectors(&self, joints: &[Vec3], j: usize) -> Option<(Vec3, Vec3)> {
        let ch = self.tree.children(j);
        if ch.len() < 2 {
            return None;
        }
        let primary = sub(joints[ch[0]], joints[j]);
        let secondary = if ch.len() >= 3 {
            sub(joints[ch[1]], joints[ch[ch.len() - 1]])
        } else {
            sub(joints[ch[1]], joints[j])
        };
        Some((primary, secondary))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let j = self.joint_count();
        let _ = writeln!(s, "depthmesh-template 1");
        let _ = writeln!(s, "{} {} {}", j, self.vertex_count(), self.shape_dims());
        let _ = writeln!(s, "parents");
        let row: Vec<String> = self
            .tree
            .parents()
            .iter()
            .map(|p| p.map_or("-1".to_string(), |p| p.to_string()))
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
        let vec_rows = |s: &mut String, name: &str, rows: &[Vec3]| {
            let _ = writeln!(s, "{name}");
            for r in rows {
                let _ = writeln!(s, "{:?} {:?} {:?}", r[0], r[1], r[2]);
            }
        };
        vec_rows(&mut s, "rest_joints", &self.rest_joints);
        vec_rows(&mut s, "rest_vertices", &self.rest_vertices);
        let _ = writeln!(s, "skin_weights");
        for v in 0..self.vertex_count() {
            let row: Vec<String> = self.skin_weights.row(v).iter().map(|w| format!("{w:?}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        for k in 0..self.shape_dims() {
            vec_rows(&mut s, &format!("joint_basis {k}"), &self.joint_basis[k]);
            vec_rows(&mut s, &format!("vertex_basis {k}"), &self.vertex_basis[k]);
        }
        let _ = writeln!(s, "segments {}", self.segments.len());
        for seg in &self.segments {
            let (end, frac) = match seg.end {
                SegmentEnd::Joint(c) => (c as i64, 0.0),
                SegmentEnd::Extension(f) => (-1, f),
            };
            let _ = writeln!(s, "{} {} {} {:?}", seg.owner, seg.start, end, frac);
        }
        let _ = writeln!(s, "attachments");
        for a in &self.attachments {
            let _ = writeln!(
                s,
                "{} {:?} {:?} {:?} {:?}",
                a.segment, a.along, a.lateral[0], a.lateral[1], a.lateral[2]
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = TextLines::new(text);
        lines.expect("depthmesh-template 1")?;
        let counts = parse_numbers::<usize>(lines.next("counts")?)?;
        if counts.len() != 3 {
            return Err(Error::Parse("counts line needs J V S".into()));
        }
        let (j, v, sdim) = (counts[0], counts[1], counts[2]);
        lines.expect("parents")?;
        let parents: Vec<Option<usize>> = parse_numbers::<i64>(lines.next("parent row")?)?
            .into_iter()
            .map(|p| usize::try_from(p).ok())
            .collect();
        if parents.len() != j {
            return Err(Error::Parse(format!("{} parents for {j} joints", parents.len())));
        }
        let tree = KinematicTree::new(parents)?;
        let rest_joints = lines.vectors("rest_joints", j)?;
        let rest_vertices = lines.vectors("rest_vertices", v)?;
        lines.expect("skin_weights")?;
        let mut data = Vec::with_capacity(v * j);
        for _ in 0..v {
            let r = parse_numbers::<f64>(lines.next("skin row")?)?;
            if r.len() != j {
                return Err(Error::Parse("skin weight row length".into()));
            }
            data.extend(r);
        }
        let skin_weights = Matrix::from_vec(v, j, data)?;
        let mut joint_basis = Vec::new();
        let mut vertex_basis = Vec::new();
        for k in 0..sdim {
            joint_basis.push(lines.vectors(&format!("joint_basis {k}"), j)?);
            vertex_basis.push(lines.vectors(&format!("vertex_basis {k}"), v)?);
        }
        let header = lines.next("segments")?;
        let nseg: usize = header
            .strip_prefix("segments ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad segments header '{header}'")))?;
        let mut segments = Vec::with_capacity(nseg);
        for _ in 0..nseg {
            let r: Vec<&str> = lines.next("segment")?.split_whitespace().collect();
            if r.len() != 4 {
                return Err(Error::Parse("segment rows need 4 fields".into()));
            }
            let p = |x: &str| x.parse::<f64>().map_err(|e| Error::Parse(e.to_string()));
            let end = p(r[2])? as i64;
            segments.push(Segment {
                owner: p(r[0])? as usize,
                start: p(r[1])? as usize,
                end: if end < 0 {
                    SegmentEnd::Extension(p(r[3])?)
                } else {
                    SegmentEnd::Joint(end as usize)
                },
            });
        }
        lines.expect("attachments")?;
        let mut attachments = Vec::with_capacity(v);
        for _ in 0..v {
            let r = parse_numbers::<f64>(lines.next("attachment")?)?;
            if r.len() != 5 {
                return Err(Error::Parse("attachment rows need 5 values".into()));
            }
            attachments.push(Attachment {
                segment: r[0] as usize,
                along: r[1],
                lateral: [r[2], r[3], r[4]],
            });
        }
        let sparse_weights = (0..v)
            .map(|i| {
                skin_weights
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(j, w)| (j, *w))
                    .collect()
            })
            .collect();
        let template_bone_lengths = bone_lengths(&rest_joints, &tree);
        Ok(BodyTemplate {
            tree,
            rest_joints,
            rest_vertices,
            skin_weights,
            joint_basis,
            vertex_basis,
            template_bone_lengths,
            segments,
            attachments,
            sparse_weights,
        })
    }
}

/// Cursor over the non-empty lines of a text container.
pub(crate) struct TextLines<'a> {
    inner: Box<dyn Iterator<Item = &'a str> + 'a>,
}

impl<'a> TextLines<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        TextLines {
            inner: Box::new(text.lines().filter(|l| !l.trim().is_empty())),
        }
    }

    pub(crate) fn next(&mut self, what: &str) -> Result<&'a str> {
        self.inner
            .next()
            .ok_or_else(|| Error::Parse(format!("input ended before {what}")))
    }

    pub(crate) fn expect(&mut self, want: &str) -> Result<()> {
        let line = self.next(want)?;
        if line.trim() != want {
            return Err(Error::Parse(format!("expected '{want}', found '{line}'")));
        }
        Ok(())
    }

    pub(crate) fn vectors(&mut self, name: &str, n: usize) -> Result<Vec<Vec3>> {
        self.expect(name)?;
        (0..n)
            .map(|_| {
                let r = parse_numbers::<f64>(self.next(name)?)?;
                if r.len() != 3 {
                    return Err(Error::Parse(format!("{name} rows need 3 values")));
                }
                Ok([r[0], r[1], r[2]])
            })
            .collect()
    }
}

pub(crate) fn parse_numbers<T: std::str::FromStr>(line: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    line.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|e| Error::Parse(format!("'{t}': {e}"))))
        .collect()
}

/// Angle between two directions, used by tests and diagnostics.
pub fn direction_error(a: Vec3, b: Vec3) -> f64 {
    match (normalize(a), normalize(b)) {
        (Some(a), Some(b)) => norm(cross(a, b)).atan2(dot(a, b)),
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn template() -> BodyTemplate {
        build_template(16, 4, 128, 7).unwrap()
    }

    fn random_pose(seed: u64, j: usize) -> PoseParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PoseParams {
            rotations: (0..j)
                .map(|_| {
                    UnitQuaternion::from_rotation_vector([
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                    ])
                })
                .collect(),
            translation: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..4.0),
            ],
        }
    }

    #[test]
    fn template_is_deterministic_and_normalized() {
        let a = template();
        assert_eq!(a, template());
        for v in 0..a.vertex_count() {
            let s: f64 = a.skin_weights.row(v).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(a.skin_weights.row(v).iter().all(|w| *w >= 0.0));
        }
        assert!(a.template_bone_lengths.iter().all(|b| *b > 0.0));
        assert!(build_template(3, 4, 128, 0).is_err());
        assert!(build_template(16, 0, 128, 0).is_err());
        assert!(build_template(16, 4, 10, 0).is_err());
    }

    #[test]
    fn generic_trees_build() {
        for j in [4, 7, 10, 24] {
            let t = build_template(j, 5, 3 * j, 1).unwrap();
            assert_eq!(t.joint_count(), j);
            assert_eq!(t.bone_count(), j - 1);
        }
    }

    #[test]
    fn global_scale_scales_every_bone_equally() {
        let t = template();
        let shaped = t.apply_shape(&ShapeParams { coefficients: vec![1.0, 0.0, 0.0, 0.0] }).unwrap();
        let b = bone_lengths(&shaped.joints, &t.tree);
        let ratio = b[0] / t.template_bone_lengths[0];
        for (x, y) in b.iter().zip(&t.template_bone_lengths) {
            assert!((x / y - ratio).abs() < 1e-12);
        }
        assert!((ratio - (1.0 + SHAPE_STEP)).abs() < 1e-12);
    }

    #[test]
    fn leg_shape_leaves_arms_alone() {
        let t = template();
        let shaped = t.apply_shape(&ShapeParams { coefficients: vec![0.0, 1.0, 0.0, 0.0] }).unwrap();
        let b = bone_lengths(&shaped.joints, &t.tree);
        for c in [11, 12, 14, 15, 10, 13] {
            assert!((b[c - 1] - t.template_bone_lengths[c - 1]).abs() < 1e-9);
        }
        for c in [5, 6, 8, 9] {
            assert!(b[c - 1] > t.template_bone_lengths[c - 1] + 1e-3);
        }
    }

    #[test]
    fn zero_shape_and_linearity() {
        let t = template();
        assert_eq!(t.apply_shape(&ShapeParams::zeros(4)).unwrap(), t.rest_pose());
        let s = ShapeParams { coefficients: vec![0.3, -0.7, 1.1, 0.4] };
        let a = 2.5;
        let sa = ShapeParams { coefficients: s.coefficients.iter().map(|c| c * a).collect() };
        let one = t.apply_shape(&s).unwrap();
        let many = t.apply_shape(&sa).unwrap();
        for (i, r) in t.rest_vertices.iter().enumerate() {
            for k in 0..3 {
                let lhs = many.vertices[i][k] - r[k];
                let rhs = a * (one.vertices[i][k] - r[k]);
                assert!((lhs - rhs).abs() < 1e-10);
            }
        }
        assert!(t.apply_shape(&ShapeParams::zeros(3)).is_err());
    }

    #[test]
    fn shaped_vertices_follow_attachments() {
        let t = template();
        let s = ShapeParams { coefficients: vec![0.6, -0.2, 0.9, -1.0] };
        let shaped = t.apply_shape(&s).unwrap();
        let derived = t.vertices_for(&shaped.joints);
        for (a, b) in shaped.vertices.iter().zip(&derived) {
            assert!(norm(sub(*a, *b)) < 1e-12);
        }
    }

    #[test]
    fn fk_identity_and_rigidity() {
        let t = template();
        let posed = forward_kinematics(&t.rest_joints, &t.tree, &PoseParams::identity(16)).unwrap();
        for (a, b) in posed.joints.iter().zip(&t.rest_joints) {
            assert!(norm(sub(*a, *b)) < 1e-15);
        }
        let mut pose = PoseParams::identity(16);
        pose.rotations[0] = UnitQuaternion::from_rotation_vector([0.4, -1.2, 0.3]);
        let posed = forward_kinematics(&t.rest_joints, &t.tree, &pose).unwrap();
        for a in 0..16 {
            for b in 0..16 {
                let d0 = norm(sub(t.rest_joints[a], t.rest_joints[b]));
                let d1 = norm(sub(posed.joints[a], posed.joints[b]));
                assert!((d0 - d1).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bone_length_examples() {
        let tree = KinematicTree::new(vec![None, Some(0)]).unwrap();
        assert_eq!(bone_lengths(&[[0.0; 3], [0.0, 1.0, 0.0]], &tree), vec![1.0]);
        assert_eq!(bone_lengths(&[[0.0; 3], [0.0; 3]], &tree), vec![0.0]);
        let chain = KinematicTree::new(vec![None, Some(0), Some(1)]).unwrap();
        let b = bone_lengths(&[[0.0; 3], [3.0, 4.0, 0.0], [3.0, 4.0, 12.0]], &chain);
        assert_eq!(b, vec![5.0, 12.0]);
    }

    #[test]
    fn tree_validation() {
        assert!(KinematicTree::new(vec![Some(0)]).is_err());
        assert!(KinematicTree::new(vec![None, None]).is_err());
        assert!(KinematicTree::new(vec![None, Some(2), Some(0)]).is_err());
        let t = template();
        assert_eq!(t.tree.subtree(2), &[2, 3, 10, 11, 12, 13, 14, 15]);
    }

    #[test]
    fn skinning_cases() {
        let t = template();
        let rest = t.rest_pose();
        let posed = forward_kinematics(&rest.joints, &t.tree, &PoseParams::identity(16)).unwrap();
        let v = t.skin_vertices(&rest, &posed);
        for (a, b) in v.iter().zip(&rest.vertices) {
            assert!(norm(sub(*a, *b)) < 1e-12);
        }

        // Independent dense recomputation over every joint.
        let pose = random_pose(3, 16);
        let posed = forward_kinematics(&rest.joints, &t.tree, &pose).unwrap();
        let fast = t.skin_vertices(&rest, &posed);
        for (i, pos) in rest.vertices.iter().enumerate() {
            let mut want = [0.0; 3];
            for j in 0..16 {
                let w = t.skin_weights.get(i, j);
                let g = pose_global_quat(&pose, &t.tree, j);
                let moved = add(g.rotate(sub(*pos, rest.joints[j])), posed.joints[j]);
                want = add(want, scale(moved, w));
            }
            assert!(norm(sub(fast[i], want)) < 1e-10);
        }
    }

    fn pose_global_quat(pose: &PoseParams, tree: &KinematicTree, j: usize) -> UnitQuaternion {
        let mut q = pose.rotations[j];
        let mut cur = j;
        while let Some(p) = tree.parent(cur) {
            q = pose.rotations[p].compose(q);
            cur = p;
        }
        q
    }

    #[test]
    fn one_hot_skin_is_rigid() {
        let mut t = template();
        let v = 5;
        let j = 11;
        t.sparse_weights[v] = vec![(j, 1.0)];
        let pose = random_pose(8, 16);
        let rest = t.rest_pose();
        let posed = forward_kinematics(&rest.joints, &t.tree, &pose).unwrap();
        let out = t.skin_vertices(&rest, &posed);
        let want = add(mat_vec(&posed.globals[j], sub(rest.vertices[v], rest.joints[j])), posed.joints[j]);
        assert!(norm(sub(out[v], want)) < 1e-12);
    }

    #[test]
    fn template_scaling_cases() {
        let t = template();
        let same = t.scale_template_along_tree(&t.template_bone_lengths).unwrap();
        for (a, b) in same.joints.iter().zip(&t.rest_joints) {
            assert!(norm(sub(*a, *b)) < 1e-10);
        }
        for (a, b) in same.vertices.iter().zip(&t.rest_vertices) {
            assert!(norm(sub(*a, *b)) < 1e-10);
        }
        let doubled: Vec<f64> = t.template_bone_lengths.iter().map(|b| 2.0 * b).collect();
        let d = t.scale_template_along_tree(&doubled).unwrap();
        for (p, c) in t.tree.bones() {
            let want = scale(sub(t.rest_joints[c], t.rest_joints[p]), 2.0);
            assert!(norm(sub(sub(d.joints[c], d.joints[p]), want)) < 1e-12);
        }
        let mut bad = t.template_bone_lengths.clone();
        bad[3] = 0.0;
        assert!(t.scale_template_along_tree(&bad).is_err());
    }

    #[test]
    fn scaling_to_shaped_lengths_reproduces_shape() {
        let t = template();
        let shaped = t.apply_shape(&ShapeParams { coefficients: vec![0.5, -0.8, 0.3, 1.0] }).unwrap();
        let b = bone_lengths(&shaped.joints, &t.tree);
        let scaled = t.scale_template_along_tree(&b).unwrap();
        for (a, b) in scaled.vertices.iter().zip(&shaped.vertices) {
            assert!(norm(sub(*a, *b)) < 1e-10);
        }
    }

    #[test]
    fn text_round_trip() {
        let t = template();
        let back = BodyTemplate::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
        assert!(BodyTemplate::from_text("depthmesh-template 1\n16 4").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fk_preserves_bone_lengths(seed in 0u64..10_000) {
            let t = template();
            let pose = random_pose(seed, 16);
            let posed = forward_kinematics(&t.rest_joints, &t.tree, &pose).unwrap();
            let b = bone_lengths(&posed.joints, &t.tree);
            for (x, y) in b.iter().zip(&t.template_bone_lengths) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn scaling_hits_targets_and_is_idempotent(seed in 0u64..10_000) {
            let t = template();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let targets: Vec<f64> = t
                .template_bone_lengths
                .iter()
                .map(|b| b * rng.random_range(0.5..1.6))
                .collect();
            let once = t.scale_template_along_tree(&targets).unwrap();
            for (x, y) in bone_lengths(&once.joints, &t.tree).iter().zip(&targets) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let twice = t.scale_along_tree(&once, &targets).unwrap();
            for (a, b) in once.joints.iter().chain(&once.vertices).zip(twice.joints.iter().chain(&twice.vertices)) {
                prop_assert!(norm(sub(*a, *b)) < 1e-10);
            }
        }
    }
}
