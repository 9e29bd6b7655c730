//! Rotation representations and conversions.
//!
//! Three interchangeable encodings: unit quaternions `(w, x, y, z)` with a
//! nonnegative-scalar hemisphere convention, intrinsic ZYX Euler angles in
//! radians, and the 6-value encoding holding the first two columns of the
//! rotation matrix (orthonormalized on decode).

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::JOINT_COUNT;

pub type Vec3 = [f64; 3];
pub type Quat = [f64; 4];
pub type Mat3 = [[f64; 3]; 3];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];
pub const MAT3_IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    #[serde(alias = "quat")]
    Quaternion,
    Euler,
    #[serde(alias = "6d")]
    SixD,
}

impl Representation {
    /// Number of channels per joint.
    pub fn width(self) -> usize {
        match self {
            Representation::Quaternion => 4,
            Representation::Euler => 3,
            Representation::SixD => 6,
        }
    }

    pub fn identity(self) -> Vec<f64> {
        match self {
            Representation::Quaternion => vec![1.0, 0.0, 0.0, 0.0],
            Representation::Euler => vec![0.0, 0.0, 0.0],
            Representation::SixD => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quat" | "quaternion" => Ok(Representation::Quaternion),
            "euler" => Ok(Representation::Euler),
            "sixd" | "6d" => Ok(Representation::SixD),
            other => Err(Error::Config(format!("unknown rotation representation '{other}'"))),
        }
    }
}

// --- small fixed-size linear algebra ---------------------------------------

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            out[j][i] = x;
        }
    }
    out
}

pub fn mat_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(v: &Vec3) -> f64 {
    dot(v, v).sqrt()
}

// --- quaternions ------------------------------------------------------------

/// Normalize to unit length and flip into the w >= 0 hemisphere. On the w = 0
/// boundary the first nonzero vector component is made positive so the
/// representative stays unique.
pub fn quat_normalize(q: &Quat) -> Result<Quat> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::DegenerateRotation(format!("quaternion norm {n}")));
    }
    let mut u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let flip = if u[0] != 0.0 {
        u[0] < 0.0
    } else {
        let first = u.iter().skip(1).find(|&&c| c != 0.0).copied().unwrap_or(1.0);
        first < 0.0
    };
    if flip {
        for c in &mut u {
            *c = -*c;
        }
    }
    Ok(u)
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_about_axis(axis: usize, angle: f64) -> Quat {
    let (s, c) = (angle * 0.5).sin_cos();
    let mut q = [c, 0.0, 0.0, 0.0];
    q[1 + axis] = s;
    q
}

/// Rotation matrix of a (not necessarily unit) quaternion; normalized first.
pub fn quat_to_matrix(q: &Quat) -> Result<Mat3> {
    let [w, x, y, z] = quat_normalize(q)?;
    Ok([
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
    ])
}

/// Shepperd's method, stable for all rotation matrices.
pub fn matrix_to_quat(m: &Mat3) -> Result<Quat> {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    quat_normalize(&q)
}

// --- Euler angles (intrinsic ZYX, radians) ----------------------------------

/// `angles = [x, y, z]`; the matrix is `Rz(z) * Ry(y) * Rx(x)`.
pub fn euler_to_matrix(angles: &Vec3) -> Mat3 {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    [
        [cy * cz, cz * sx * sy - cx * sz, cx * cz * sy + sx * sz],
        [cy * sz, cx * cz + sx * sy * sz, cx * sy * sz - cz * sx],
        [-sy, cy * sx, cx * cy],
    ]
}

pub fn euler_to_quat(angles: &Vec3) -> Quat {
    let qz = quat_about_axis(2, angles[2]);
    let qy = quat_about_axis(1, angles[1]);
    let qx = quat_about_axis(0, angles[0]);
    quat_mul(&quat_mul(&qz, &qy), &qx)
}

/// Inverse of [`euler_to_matrix`]. At the gimbal-lock boundary (|sin y| = 1)
/// the x angle is fixed to zero.
pub fn matrix_to_euler(m: &Mat3) -> Vec3 {
    let sy = -m[2][0];
    if sy.abs() < 1.0 - 1e-9 {
        [
            m[2][1].atan2(m[2][2]),
            sy.asin(),
            m[1][0].atan2(m[0][0]),
        ]
    } else {
        let y = if sy > 0.0 { std::f64::consts::FRAC_PI_2 } else { -std::f64::consts::FRAC_PI_2 };
        [0.0, y, (-m[0][1]).atan2(m[1][1])]
    }
}

pub fn quat_to_euler(q: &Quat) -> Result<Vec3> {
    Ok(matrix_to_euler(&quat_to_matrix(q)?))
}

// --- 6D representation --------------------------------------------------------

/// First two matrix columns, flattened `[col0; col1]`.
pub fn matrix_to_sixd(m: &Mat3) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Gram-Schmidt decode of the 6-value encoding.
pub fn sixd_to_matrix(v: &[f64; 6]) -> Result<Mat3> {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = norm(&a1);
    if n1 < 1e-12 {
        return Err(Error::DegenerateRotation("6d first column near zero".into()));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = dot(&b1, &a2);
    let u2 = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(&u2);
    if n2 < 1e-12 {
        return Err(Error::DegenerateRotation("6d columns are collinear".into()));
    }
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = cross(&b1, &b2);
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

// --- rotation sequences -------------------------------------------------------

/// Per-frame rotations for all 17 rotated joints (root orientation plus the
/// 16 internal joints), stored as `(T, 17, Q)`.
#[derive(Debug, Clone)]
pub struct RotationSeq {
    pub repr: Representation,
    pub values: Array3<f64>,
}

impl RotationSeq {
    pub fn new(repr: Representation, values: Array3<f64>) -> Result<Self> {
        let (_, j, q) = values.dim();
        if j != JOINT_COUNT || q != repr.width() {
            return Err(Error::Shape(format!(
                "rotation sequence must be (T, {JOINT_COUNT}, {}), got {:?}",
                repr.width(),
                values.dim()
            )));
        }
        Ok(Self { repr, values })
    }

    /// All-identity rotations.
    pub fn identity(repr: Representation, frames: usize) -> Self {
        let ident = repr.identity();
        let mut values = Array3::zeros((frames, JOINT_COUNT, repr.width()));
        for t in 0..frames {
            for j in 0..JOINT_COUNT {
                for (k, &v) in ident.iter().enumerate() {
                    values[[t, j, k]] = v;
                }
            }
        }
        Self { repr, values }
    }

    pub fn frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn quat(&self, t: usize, j: usize) -> Result<Quat> {
        match self.repr {
            Representation::Quaternion => {
                let v = [
                    self.values[[t, j, 0]],
                    self.values[[t, j, 1]],
                    self.values[[t, j, 2]],
                    self.values[[t, j, 3]],
                ];
                quat_normalize(&v)
            }
            Representation::Euler => {
                let a = [self.values[[t, j, 0]], self.values[[t, j, 1]], self.values[[t, j, 2]]];
                quat_normalize(&euler_to_quat(&a))
            }
            Representation::SixD => {
                let v = [
                    self.values[[t, j, 0]],
                    self.values[[t, j, 1]],
                    self.values[[t, j, 2]],
                    self.values[[t, j, 3]],
                    self.values[[t, j, 4]],
                    self.values[[t, j, 5]],
                ];
                matrix_to_quat(&sixd_to_matrix(&v)?)
            }
        }
    }

    pub fn matrix(&self, t: usize, j: usize) -> Result<Mat3> {
        match self.repr {
            Representation::Quaternion => {
                let v = [
                    self.values[[t, j, 0]],
                    self.values[[t, j, 1]],
                    self.values[[t, j, 2]],
                    self.values[[t, j, 3]],
                ];
                quat_to_matrix(&v)
            }
            Representation::Euler => {
                let a = [self.values[[t, j, 0]], self.values[[t, j, 1]], self.values[[t, j, 2]]];
                Ok(euler_to_matrix(&a))
            }
            Representation::SixD => {
                let v = [
                    self.values[[t, j, 0]],
                    self.values[[t, j, 1]],
                    self.values[[t, j, 2]],
                    self.values[[t, j, 3]],
                    self.values[[t, j, 4]],
                    self.values[[t, j, 5]],
                ];
                sixd_to_matrix(&v)
            }
        }
    }

    /// Convert into another representation (identity when it already matches).
    pub fn convert(&self, repr: Representation) -> Result<Self> {
        if repr == self.repr {
            return Ok(self.clone());
        }
        let t_len = self.frames();
        let mut values = Array3::zeros((t_len, JOINT_COUNT, repr.width()));
        for t in 0..t_len {
            for j in 0..JOINT_COUNT {
                let out: Vec<f64> = match repr {
                    Representation::Quaternion => self.quat(t, j)?.to_vec(),
                    Representation::Euler => {
                        let m = self.matrix(t, j)?;
                        matrix_to_euler(&m).to_vec()
                    }
                    Representation::SixD => {
                        let m = self.matrix(t, j)?;
                        matrix_to_sixd(&m).to_vec()
                    }
                };
                for (k, v) in out.into_iter().enumerate() {
                    values[[t, j, k]] = v;
                }
            }
        }
        Ok(Self { repr, values })
    }

    /// Flattened `(T, 17 * Q)` view-copy, for operations over generic channels.
    pub fn flat(&self) -> Array2<f64> {
        let (t, j, q) = self.values.dim();
        self.values.to_shape((t, j * q)).unwrap().to_owned()
    }
}

/// Forward temporal differences: `out[t] = seq[t + 1] - seq[t]`.
pub fn temporal_difference(seq: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (t, d) = seq.dim();
    if t < 2 {
        return Err(Error::InsufficientFrames { need: 2, got: t });
    }
    let mut out = Array2::zeros((t - 1, d));
    for ti in 0..t - 1 {
        for di in 0..d {
            out[[ti, di]] = seq[[ti + 1, di]] - seq[[ti, di]];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn assert_mat_eq(a: &Mat3, b: &Mat3, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(a[i][j], b[i][j], epsilon = tol);
            }
        }
    }

    fn is_orthonormal(m: &Mat3, tol: f64) -> bool {
        let mt = mat_transpose(m);
        let prod = mat_mul(&mt, m);
        let mut ok = true;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                ok &= (prod[i][j] - expect).abs() < tol;
            }
        }
        ok && (mat_det(m) - 1.0).abs() < tol
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let m = quat_to_matrix(&QUAT_IDENTITY).unwrap();
        assert_mat_eq(&m, &MAT3_IDENTITY, 1e-15);
    }

    #[test]
    fn euler_x_90_matches_analytic_matrix() {
        let q = euler_to_quat(&[std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
        let m = quat_to_matrix(&q).unwrap();
        let expect = [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]];
        assert_mat_eq(&m, &expect, 1e-12);
    }

    #[test]
    fn zero_quaternion_is_degenerate() {
        assert!(matches!(
            quat_normalize(&[0.0; 4]),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn hemisphere_convention_gives_unique_representative() {
        let q = quat_normalize(&[-0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(q[0] > 0.0);
        let q2 = quat_normalize(&[0.0, -0.6, 0.8, 0.0]).unwrap();
        assert!(q2[1] > 0.0);
    }

    #[test]
    fn temporal_difference_basics() {
        let seq = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 3.0]).unwrap();
        let d = temporal_difference(seq.view()).unwrap();
        assert_eq!(d.as_slice().unwrap(), &[1.0, 2.0]);

        let constant = Array2::from_elem((5, 2), 4.2);
        let d = temporal_difference(constant.view()).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));

        let short = Array2::from_elem((1, 2), 0.0);
        assert!(matches!(
            temporal_difference(short.view()),
            Err(Error::InsufficientFrames { need: 2, got: 1 })
        ));
    }

    proptest! {
        #[test]
        fn quat_matrix_round_trip(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!((w*w + x*x + y*y + z*z).sqrt() > 1e-3);
            let q = quat_normalize(&[w, x, y, z]).unwrap();
            let m = quat_to_matrix(&q).unwrap();
            prop_assert!(is_orthonormal(&m, 1e-9));
            let q2 = matrix_to_quat(&m).unwrap();
            for k in 0..4 {
                prop_assert!((q[k] - q2[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn sixd_round_trip(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!((w*w + x*x + y*y + z*z).sqrt() > 1e-3);
            let m = quat_to_matrix(&[w, x, y, z]).unwrap();
            let v = matrix_to_sixd(&m);
            let m2 = sixd_to_matrix(&v).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((m[i][j] - m2[i][j]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn euler_round_trip_up_to_wrapping(a in -1.5f64..1.5, b in -1.5f64..1.5, c in -1.5f64..1.5) {
            // stay away from the gimbal boundary where x/z are not unique
            prop_assume!(b.abs() < 1.45);
            let m = euler_to_matrix(&[a, b, c]);
            prop_assert!(is_orthonormal(&m, 1e-9));
            let e = matrix_to_euler(&m);
            let m2 = euler_to_matrix(&e);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((m[i][j] - m2[i][j]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn euler_quat_matrix_agree(a in -1.4f64..1.4, b in -1.4f64..1.4, c in -1.4f64..1.4) {
            let via_quat = quat_to_matrix(&euler_to_quat(&[a, b, c])).unwrap();
            let direct = euler_to_matrix(&[a, b, c]);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((via_quat[i][j] - direct[i][j]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn temporal_difference_telescopes(values in proptest::collection::vec(-10.0f64..10.0, 4..40)) {
            let t = values.len();
            let seq = Array2::from_shape_vec((t, 1), values.clone()).unwrap();
            let d = temporal_difference(seq.view()).unwrap();
            let mut acc = values[0];
            for ti in 0..t - 1 {
                acc += d[[ti, 0]];
                prop_assert!((acc - values[ti + 1]).abs() < 1e-12);
            }
        }
    }
}
