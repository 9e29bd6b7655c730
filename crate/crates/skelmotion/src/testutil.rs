//! Independent oracles and random generators backing the test suites.
//!
//! Everything here deliberately avoids the production code paths it is used
//! to check: the FK oracle multiplies explicit 4x4 homogeneous transforms
//! down each root-to-leaf path instead of accumulating rotations, and the
//! contact oracle re-evaluates the two threshold predicates frame by frame.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rotation::{quat_normalize, Representation, RotationSeq};
use crate::skeleton::{Skeleton, TPose};
use crate::topology::{GROUP_COUNT, JOINT_COUNT, TOPOLOGY};

pub fn random_skeleton(rng: &mut ChaCha8Rng) -> Skeleton {
    let mut lengths = [0.0; GROUP_COUNT];
    for l in &mut lengths {
        *l = rng.random_range(0.2..1.5);
    }
    Skeleton::new(lengths).unwrap()
}

pub fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if let Ok(u) = quat_normalize(&q) {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.2 {
                return u;
            }
        }
    }
}

pub fn random_rotation_seq(frames: usize, rng: &mut ChaCha8Rng) -> RotationSeq {
    let mut values = Array3::zeros((frames, JOINT_COUNT, 4));
    for t in 0..frames {
        for j in 0..JOINT_COUNT {
            let q = random_unit_quat(rng);
            for (k, &v) in q.iter().enumerate() {
                values[[t, j, k]] = v;
            }
        }
    }
    RotationSeq::new(Representation::Quaternion, values).unwrap()
}

type Mat4 = [[f64; 4]; 4];

fn mat4_identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rotation_mat4(r: &crate::rotation::Mat3) -> Mat4 {
    let mut m = mat4_identity();
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j];
        }
    }
    m
}

fn translation_mat4(v: &[f64; 3]) -> Mat4 {
    let mut m = mat4_identity();
    for i in 0..3 {
        m[i][3] = v[i];
    }
    m
}

/// Brute-force FK oracle: for every joint, multiply the explicit homogeneous
/// transforms `R(q_k) * T(offset_k)` along the whole chain from the root and
/// read the translation column.
pub fn fk_homogeneous_oracle(tpose: &TPose, rotations: &RotationSeq) -> Result<Array3<f64>> {
    let frames = rotations.frames();
    let mut out = Array3::zeros((frames, JOINT_COUNT, 3));
    for t in 0..frames {
        for n in 0..JOINT_COUNT {
            // path from root down to n
            let mut path = vec![n];
            let mut cur = n;
            while let Some(p) = TOPOLOGY.parent[cur] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            let mut world = mat4_identity();
            for &k in &path {
                let r = rotation_mat4(&rotations.matrix(t, k)?);
                let tr = translation_mat4(&tpose.offsets[k]);
                world = mat4_mul(&world, &mat4_mul(&r, &tr));
            }
            for k in 0..3 {
                out[[t, n, k]] = world[k][3];
            }
        }
    }
    Ok(out)
}

/// Literal per-frame re-evaluation of the foot-contact definition: height
/// above the lowest-20-percentile ground below 20mm AND mean speed over the
/// surrounding 5-frame window below 1mm per frame.
pub fn contact_predicate_oracle(
    positions: &Array3<f64>,
    units_per_mm: f64,
    foot_joints: [usize; 2],
) -> Array2<u8> {
    let t_len = positions.dim().0;
    let h_thresh = 20.0 * units_per_mm;
    let v_thresh = 1.0 * units_per_mm;

    let mut all_heights = Vec::with_capacity(2 * t_len);
    for &f in &foot_joints {
        for t in 0..t_len {
            all_heights.push(positions[[t, f, 1]]);
        }
    }
    all_heights.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((all_heights.len() as f64) * 0.2).floor().max(1.0) as usize;
    let ground = all_heights[..k].iter().sum::<f64>() / k as f64;

    let mut out = Array2::zeros((t_len, 2));
    for (fi, &f) in foot_joints.iter().enumerate() {
        for t in 0..t_len {
            let height_ok = positions[[t, f, 1]] - ground < h_thresh;
            // speeds between consecutive frames inside the clamped window
            let lo = t.saturating_sub(2);
            let hi = (t + 2).min(t_len - 1);
            let mut speed_sum = 0.0;
            let mut n = 0usize;
            for u in lo..hi {
                let dx = positions[[u + 1, f, 0]] - positions[[u, f, 0]];
                let dy = positions[[u + 1, f, 1]] - positions[[u, f, 1]];
                let dz = positions[[u + 1, f, 2]] - positions[[u, f, 2]];
                speed_sum += (dx * dx + dy * dy + dz * dz).sqrt();
                n += 1;
            }
            let velocity_ok = n > 0 && speed_sum / (n as f64) < v_thresh;
            if height_ok && velocity_ok {
                out[[t, fi]] = 1;
            }
        }
    }
    out
}

/// Random root-local position sequence with plausible magnitudes.
pub fn random_positions(frames: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut p = Array3::zeros((frames, JOINT_COUNT, 3));
    for v in p.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    p
}
