//! Unit quaternions, swing-twist factorisation and SO(3) helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// `None` for the zero vector.
pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| scale(a, 1.0 / n))
}

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `mᵀ v`.
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn skew(v: Vec3) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

pub fn determinant(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalises and applies the canonical sign.
    pub fn new_normalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        UnitQuaternion {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
        .canonical()
    }

    /// `w ≥ 0`; when `w = 0` the first nonzero vector entry is positive.
    pub fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            [self.x, self.y, self.z]
                .into_iter()
                .find(|v| *v != 0.0)
                .is_some_and(|v| v < 0.0)
        };
        if flip {
            UnitQuaternion {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        if (norm(axis) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "rotation axis must be unit length, got norm {}",
                norm(axis)
            )));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Ok(Self::new_normalized(c, axis[0] * s, axis[1] * s, axis[2] * s))
    }

    /// Exponential map of a rotation vector (axis × angle).
    pub fn from_rotation_vector(v: Vec3) -> Self {
        let theta = norm(v);
        if theta < 1e-12 {
            return Self::new_normalized(1.0, v[0] / 2.0, v[1] / 2.0, v[2] / 2.0);
        }
        let (s, c) = (theta / 2.0).sin_cos();
        let k = s / theta;
        Self::new_normalized(c, v[0] * k, v[1] * k, v[2] * k)
    }

    /// Logarithm map; the angle lies in `[0, π]`.
    pub fn to_rotation_vector(self) -> Vec3 {
        let q = self.canonical();
        let v = [q.x, q.y, q.z];
        let n = norm(v);
        if n < 1e-12 {
            return scale(v, 2.0 / q.w);
        }
        scale(v, 2.0 * n.atan2(q.w) / n)
    }

    pub fn angle(self) -> f64 {
        norm(self.to_rotation_vector())
    }

    pub fn vector(self) -> Vec3 {
        [self.x, self.y, self.z]
    }

    pub fn to_matrix(self) -> Mat3 {
        let UnitQuaternion { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Quaternion of an orthonormal, right-handed matrix.
    pub fn from_matrix(m: &Mat3) -> Self {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z);
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[2][1] - m[1][2]) / s;
            y = (m[0][2] - m[2][0]) / s;
            z = (m[1][0] - m[0][1]) / s;
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            w = (m[2][1] - m[1][2]) / s;
            x = 0.25 * s;
            y = (m[0][1] + m[1][0]) / s;
            z = (m[0][2] + m[2][0]) / s;
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            w = (m[0][2] - m[2][0]) / s;
            x = (m[0][1] + m[1][0]) / s;
            y = 0.25 * s;
            z = (m[1][2] + m[2][1]) / s;
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            w = (m[1][0] - m[0][1]) / s;
            x = (m[0][2] + m[2][0]) / s;
            y = (m[1][2] + m[2][1]) / s;
            z = 0.25 * s;
        }
        Self::new_normalized(w, x, y, z)
    }

    /// Hamilton product `self · other`, renormalised.
    pub fn compose(self, other: UnitQuaternion) -> Self {
        let (a, b) = (self, other);
        Self::new_normalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn inverse(self) -> Self {
        UnitQuaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
        .canonical()
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = [self.x, self.y, self.z];
        let t = scale(cross(u, v), 2.0);
        add(add(v, scale(t, self.w)), cross(u, t))
    }

    /// Largest componentwise difference after canonicalisation.
    pub fn max_abs_diff(self, other: UnitQuaternion) -> f64 {
        let (a, b) = (self.canonical(), other.canonical());
        [a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Minimal rotation taking the direction of `v_from` to that of `v_to`.
pub fn swing_between(v_from: Vec3, v_to: Vec3) -> Result<UnitQuaternion> {
    let (a, b) = match (normalize(v_from), normalize(v_to)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidArgument(
                "swing_between needs nonzero vectors".into(),
            ))
        }
    };
    let c = dot(a, b).clamp(-1.0, 1.0);
    let axis = cross(a, b);
    if c < -1.0 + 1e-12 || (norm(axis) < 1e-15 && c < 0.0) {
        let axis = antiparallel_axis(a);
        return UnitQuaternion::from_axis_angle(axis, std::f64::consts::PI);
    }
    // Half-way quaternion: (1 + a·b, a × b) normalised.
    Ok(UnitQuaternion::new_normalized(
        1.0 + c,
        axis[0],
        axis[1],
        axis[2],
    ))
}

fn antiparallel_axis(a: Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if a[i].abs() < a[best].abs() {
            best = i;
        }
    }
    let mut e = [0.0; 3];
    e[best] = 1.0;
    normalize(cross(a, e)).expect("e is not parallel to a")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwingTwist {
    pub swing: UnitQuaternion,
    pub twist: UnitQuaternion,
    pub axis: Vec3,
}

impl SwingTwist {
    /// Signed twist angle about `axis`, in `(−π, π]`.
    pub fn twist_angle(&self) -> f64 {
        let t = self.twist;
        let s = dot([t.x, t.y, t.z], self.axis);
        let mut a = 2.0 * s.atan2(t.w);
        if a > std::f64::consts::PI {
            a -= 2.0 * std::f64::consts::PI;
        }
        a
    }
}

/// Factors `q = swing · twist` with `twist` about `axis`.
pub fn swing_twist_decompose(q: UnitQuaternion, axis: Vec3) -> Result<SwingTwist> {
    if (norm(axis) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("twist axis must be unit length".into()));
    }
    let p = dot([q.x, q.y, q.z], axis);
    let proj = [q.w, axis[0] * p, axis[1] * p, axis[2] * p];
    let n = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
    let twist = if n < 1e-15 {
        UnitQuaternion::IDENTITY
    } else {
        UnitQuaternion::new_normalized(proj[0], proj[1], proj[2], proj[3])
    };
    let swing = q.compose(twist.inverse());
    Ok(SwingTwist { swing, twist, axis })
}

/// Rotation matrix of a rotation vector.
pub fn exp_so3(v: Vec3) -> Mat3 {
    UnitQuaternion::from_rotation_vector(v).to_matrix()
}

/// Left Jacobian: `exp(v + δ) ≈ exp(J_l(v) δ) · exp(v)`.
pub fn left_jacobian(v: Vec3) -> Mat3 {
    let theta = norm(v);
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let (a, b) = if theta < 1e-5 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let mut out = IDENTITY3;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

pub fn left_jacobian_inverse(v: Vec3) -> Mat3 {
    let theta = norm(v);
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    let mut out = IDENTITY3;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += -0.5 * k[i][j] + c * k2[i][j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn unit(v: Vec3) -> Vec3 {
        normalize(v).unwrap()
    }

    fn mat_close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    #[test]
    fn axis_angle_basics() {
        let q = UnitQuaternion::from_axis_angle([0.0, 1.0, 0.0], 0.0).unwrap();
        assert_eq!(q, UnitQuaternion::IDENTITY);
        let q = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], PI / 2.0).unwrap();
        let r = q.rotate([1.0, 0.0, 0.0]);
        assert!((r[0]).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12 && r[2].abs() < 1e-12);
        assert!(UnitQuaternion::from_axis_angle([1.0, 1.0, 0.0], 0.3).is_err());
    }

    #[test]
    fn swing_between_cases() {
        let q = swing_between([0.0, 2.0, 0.0], [0.0, 0.5, 0.0]).unwrap();
        assert!(q.max_abs_diff(UnitQuaternion::IDENTITY) < 1e-15);
        let q = swing_between([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        let expect = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], PI / 2.0).unwrap();
        assert!(q.max_abs_diff(expect) < 1e-12);
        let from = [0.3, -1.0, 0.2];
        let q = swing_between(from, scale(from, -2.0)).unwrap();
        let r = q.rotate(from);
        for i in 0..3 {
            assert!((r[i] + from[i]).abs() < 1e-9);
        }
        // Least aligned basis vector of (0.3, -1, 0.2) is z.
        let axis = unit(cross(from, [0.0, 0.0, 1.0]));
        let v = unit(q.vector());
        assert!((dot(axis, v).abs() - 1.0).abs() < 1e-12);
        assert!(swing_between([0.0; 3], [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn swing_twist_cases() {
        let st = swing_twist_decompose(UnitQuaternion::IDENTITY, [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(st.swing, UnitQuaternion::IDENTITY);
        assert_eq!(st.twist, UnitQuaternion::IDENTITY);
        let q = UnitQuaternion::from_axis_angle([0.0, 1.0, 0.0], 0.8).unwrap();
        let st = swing_twist_decompose(q, [0.0, 1.0, 0.0]).unwrap();
        assert!(st.swing.max_abs_diff(UnitQuaternion::IDENTITY) < 1e-15);
        assert!(st.twist.max_abs_diff(q) < 1e-15);
        assert!((st.twist_angle() - 0.8).abs() < 1e-12);
        // Vector part perpendicular to the axis: pure swing.
        let q = UnitQuaternion::from_axis_angle([1.0, 0.0, 0.0], PI).unwrap();
        let st = swing_twist_decompose(q, [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(st.twist, UnitQuaternion::IDENTITY);
    }

    #[test]
    fn compose_and_inverse() {
        let a = UnitQuaternion::from_axis_angle(unit([1.0, 2.0, -0.5]), 1.1).unwrap();
        assert!(a.compose(UnitQuaternion::IDENTITY).max_abs_diff(a) < 1e-15);
        assert!(a.compose(a.inverse()).max_abs_diff(UnitQuaternion::IDENTITY) < 1e-15);
    }

    #[test]
    fn jacobian_inverse_pair() {
        for v in [[0.3, -0.2, 0.9], [1e-7, 0.0, 2e-7], [2.5, 0.4, -0.3]] {
            let p = mat_mul(&left_jacobian(v), &left_jacobian_inverse(v));
            assert!(mat_close(&p, &IDENTITY3, 1e-9));
        }
    }

    #[test]
    fn left_jacobian_matches_finite_difference() {
        let v = [0.4, -0.7, 0.25];
        let j = left_jacobian(v);
        let r0 = exp_so3(v);
        let h = 1e-6;
        for k in 0..3 {
            let mut vp = v;
            vp[k] += h;
            // exp(v + h e_k) exp(v)ᵀ ≈ I + h [J e_k]×
            let d = mat_mul(&exp_so3(vp), &transpose(&r0));
            let w = [
                (d[2][1] - d[1][2]) / (2.0 * h),
                (d[0][2] - d[2][0]) / (2.0 * h),
                (d[1][0] - d[0][1]) / (2.0 * h),
            ];
            for i in 0..3 {
                assert!((w[i] - j[i][k]).abs() < 1e-5);
            }
        }
    }

    fn arb_unit() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-1.0f64..1.0).prop_filter_map("nonzero", |v| {
            (norm(v) > 0.1).then(|| unit(v))
        })
    }

    proptest! {
        #[test]
        fn matrix_is_rotation(axis in arb_unit(), angle in -PI..PI) {
            let m = UnitQuaternion::from_axis_angle(axis, angle).unwrap().to_matrix();
            prop_assert!((determinant(&m) - 1.0).abs() < 1e-10);
            prop_assert!(mat_close(&mat_mul(&transpose(&m), &m), &IDENTITY3, 1e-10));
        }

        #[test]
        fn swing_twist_recomposes(axis in arb_unit(), qa in arb_unit(), angle in -PI..PI) {
            let q = UnitQuaternion::from_axis_angle(qa, angle).unwrap();
            let st = swing_twist_decompose(q, axis).unwrap();
            prop_assert!(st.swing.compose(st.twist).max_abs_diff(q) < 1e-8);
            let again = swing_twist_decompose(st.swing, axis).unwrap();
            prop_assert!(again.twist.max_abs_diff(UnitQuaternion::IDENTITY) < 1e-8);
            let tv = st.twist.vector();
            prop_assert!(norm(cross(tv, axis)) < 1e-9);
        }

        #[test]
        fn swing_angle_is_arccos(a in arb_unit(), b in arb_unit()) {
            let q = swing_between(a, b).unwrap();
            let want = dot(a, b).clamp(-1.0, 1.0).acos();
            prop_assert!((q.angle() - want).abs() < 1e-9);
            let r = q.rotate(a);
            for i in 0..3 {
                prop_assert!((r[i] - b[i]).abs() < 1e-9);
            }
            if norm(cross(a, b)) > 1e-6 {
                let v = q.vector();
                prop_assert!(dot(v, a).abs() < 1e-9 && dot(v, b).abs() < 1e-9);
            }
        }

        #[test]
        fn axis_angle_round_trip(axis in arb_unit(), angle in 1e-3..(PI - 1e-3)) {
            let q = UnitQuaternion::from_axis_angle(axis, angle).unwrap();
            let back = UnitQuaternion::from_matrix(&q.to_matrix());
            let rv = back.to_rotation_vector();
            for i in 0..3 {
                prop_assert!((rv[i] - axis[i] * angle).abs() < 1e-8);
            }
        }

        #[test]
        fn compose_matches_matrix_product(a in arb_unit(), b in arb_unit(), x in -PI..PI, y in -PI..PI) {
            let qa = UnitQuaternion::from_axis_angle(a, x).unwrap();
            let qb = UnitQuaternion::from_axis_angle(b, y).unwrap();
            let lhs = qa.compose(qb).to_matrix();
            let rhs = mat_mul(&qa.to_matrix(), &qb.to_matrix());
            prop_assert!(mat_close(&lhs, &rhs, 1e-10));
        }
    }
}
