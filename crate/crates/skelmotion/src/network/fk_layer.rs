//! The forward-kinematics layer as tape operations, differentiable with
//! respect to both bone lengths and rotations.

use revad::{Arr, Tape, Var};

use crate::error::{Error, Result};
use crate::rotation::Representation;
use crate::topology::{JOINT_COUNT, REST_DIRECTIONS, TOPOLOGY};

/// Expands `(B, 9)` group lengths into `(B, 17, 3)` rest offsets along the
/// canonical directions. The root row stays zero.
pub fn tpose_offsets_graph(tape: &mut Tape, lengths: Var) -> Result<Var> {
    let shape = tape.value(lengths).shape().to_vec();
    if shape.len() != 2 || shape[1] != crate::topology::GROUP_COUNT {
        return Err(Error::Shape(format!(
            "lengths must be (B, {}), got {shape:?}",
            crate::topology::GROUP_COUNT
        )));
    }
    let batch = shape[0];
    let mut per_joint: Vec<Var> = Vec::with_capacity(JOINT_COUNT);
    let zero = tape.constant(Arr::zeros(ndarray::IxDyn(&[batch, 1, 3])));
    per_joint.push(zero);
    for j in 1..JOINT_COUNT {
        let g = TOPOLOGY.bone_group(j);
        let len = tape.narrow(lengths, 1, g, 1); // (B, 1)
        let len = tape.reshape(len, &[batch, 1, 1]);
        let dir = tape.constant(
            Arr::from_shape_vec(ndarray::IxDyn(&[1, 1, 3]), REST_DIRECTIONS[j].to_vec()).unwrap(),
        );
        per_joint.push(tape.mul(len, dir)); // (B, 1, 3)
    }
    Ok(tape.concat(&per_joint, 1))
}

fn slice_last(tape: &mut Tape, x: Var, idx: usize) -> Var {
    let ndim = tape.value(x).ndim();
    tape.narrow(x, ndim - 1, idx, 1)
}

/// `(B, T, 17, Q)` rotations to `(B, T, 17, 3, 3)` matrices. Quaternions are
/// assumed pre-normalized; the 6D encoding is orthonormalized in-graph.
pub fn rotations_to_matrices_graph(
    tape: &mut Tape,
    rotations: Var,
    repr: Representation,
) -> Result<Var> {
    let shape = tape.value(rotations).shape().to_vec();
    if shape.len() != 4 || shape[2] != JOINT_COUNT || shape[3] != repr.width() {
        return Err(Error::Shape(format!(
            "rotations must be (B, T, {JOINT_COUNT}, {}), got {shape:?}",
            repr.width()
        )));
    }
    let (b, t) = (shape[0], shape[1]);
    let entries: [Var; 9] = match repr {
        Representation::Quaternion => {
            let w = slice_last(tape, rotations, 0);
            let x = slice_last(tape, rotations, 1);
            let y = slice_last(tape, rotations, 2);
            let z = slice_last(tape, rotations, 3);
            let xx = tape.mul(x, x);
            let yy = tape.mul(y, y);
            let zz = tape.mul(z, z);
            let xy = tape.mul(x, y);
            let xz = tape.mul(x, z);
            let yz = tape.mul(y, z);
            let wx = tape.mul(w, x);
            let wy = tape.mul(w, y);
            let wz = tape.mul(w, z);

            let two = 2.0;
            let yyzz = tape.add(yy, zz);
            let r00 = {
                let s = tape.scale(yyzz, -two);
                tape.add_scalar(s, 1.0)
            };
            let r01 = {
                let d = tape.sub(xy, wz);
                tape.scale(d, two)
            };
            let r02 = {
                let s = tape.add(xz, wy);
                tape.scale(s, two)
            };
            let r10 = {
                let s = tape.add(xy, wz);
                tape.scale(s, two)
            };
            let xxzz = tape.add(xx, zz);
            let r11 = {
                let s = tape.scale(xxzz, -two);
                tape.add_scalar(s, 1.0)
            };
            let r12 = {
                let d = tape.sub(yz, wx);
                tape.scale(d, two)
            };
            let r20 = {
                let d = tape.sub(xz, wy);
                tape.scale(d, two)
            };
            let r21 = {
                let s = tape.add(yz, wx);
                tape.scale(s, two)
            };
            let xxyy = tape.add(xx, yy);
            let r22 = {
                let s = tape.scale(xxyy, -two);
                tape.add_scalar(s, 1.0)
            };
            [r00, r01, r02, r10, r11, r12, r20, r21, r22]
        }
        Representation::Euler => {
            // intrinsic ZYX: R = Rz * Ry * Rx
            let ax = slice_last(tape, rotations, 0);
            let ay = slice_last(tape, rotations, 1);
            let az = slice_last(tape, rotations, 2);
            let sx = tape.sin(ax);
            let cx = tape.cos(ax);
            let sy = tape.sin(ay);
            let cy = tape.cos(ay);
            let sz = tape.sin(az);
            let cz = tape.cos(az);
            let r00 = tape.mul(cy, cz);
            let r01 = {
                let a = tape.mul(cz, sx);
                let a = tape.mul(a, sy);
                let b2 = tape.mul(cx, sz);
                tape.sub(a, b2)
            };
            let r02 = {
                let a = tape.mul(cx, cz);
                let a = tape.mul(a, sy);
                let b2 = tape.mul(sx, sz);
                tape.add(a, b2)
            };
            let r10 = tape.mul(cy, sz);
            let r11 = {
                let a = tape.mul(cx, cz);
                let b2 = tape.mul(sx, sy);
                let b2 = tape.mul(b2, sz);
                tape.add(a, b2)
            };
            let r12 = {
                let a = tape.mul(cx, sy);
                let a = tape.mul(a, sz);
                let b2 = tape.mul(cz, sx);
                tape.sub(a, b2)
            };
            let r20 = tape.neg(sy);
            let r21 = tape.mul(cy, sx);
            let r22 = tape.mul(cx, cy);
            [r00, r01, r02, r10, r11, r12, r20, r21, r22]
        }
        Representation::SixD => {
            // Gram-Schmidt on the two encoded columns, third from the cross
            let a1 = tape.narrow(rotations, 3, 0, 3);
            let a2 = tape.narrow(rotations, 3, 3, 3);
            let normalize = |tape: &mut Tape, v: Var| -> Var {
                let sq = tape.square(v);
                let s = tape.sum_axes(sq, &[3], true);
                let s = tape.add_scalar(s, 1e-12);
                let n = tape.sqrt(s);
                tape.div(v, n)
            };
            let b1 = normalize(tape, a1);
            let prod = tape.mul(b1, a2);
            let d = tape.sum_axes(prod, &[3], true);
            let proj = tape.mul(d, b1);
            let u2 = tape.sub(a2, proj);
            let b2 = normalize(tape, u2);
            let comp = |tape: &mut Tape, v: Var, k: usize| slice_last(tape, v, k);
            let (b1x, b1y, b1z) = (comp(tape, b1, 0), comp(tape, b1, 1), comp(tape, b1, 2));
            let (b2x, b2y, b2z) = (comp(tape, b2, 0), comp(tape, b2, 1), comp(tape, b2, 2));
            let cross = |tape: &mut Tape, a: (Var, Var), b2t: (Var, Var)| -> Var {
                let p = tape.mul(a.0, b2t.1);
                let q = tape.mul(a.1, b2t.0);
                tape.sub(p, q)
            };
            let b3x = cross(tape, (b1y, b1z), (b2y, b2z));
            let b3y = cross(tape, (b1z, b1x), (b2z, b2x));
            let b3z = cross(tape, (b1x, b1y), (b2x, b2y));
            // columns are b1, b2, b3
            [b1x, b2x, b3x, b1y, b2y, b3y, b1z, b2z, b3z]
        }
    };
    let flat = tape.concat(&entries, 3); // (B, T, 17, 9)
    Ok(tape.reshape(flat, &[b, t, JOINT_COUNT, 3, 3]))
}

/// Root-local FK on the tape: composes rotations down the tree and
/// accumulates rotated offsets. Returns `(B, T, 17, 3)`.
pub fn fk_local_graph(tape: &mut Tape, offsets: Var, matrices: Var) -> Result<Var> {
    let off_shape = tape.value(offsets).shape().to_vec();
    let mat_shape = tape.value(matrices).shape().to_vec();
    if off_shape.len() != 3 || off_shape[1] != JOINT_COUNT {
        return Err(Error::Shape(format!("offsets must be (B, 17, 3), got {off_shape:?}")));
    }
    if mat_shape.len() != 5 || mat_shape[2] != JOINT_COUNT {
        return Err(Error::Shape(format!(
            "matrices must be (B, T, 17, 3, 3), got {mat_shape:?}"
        )));
    }
    if off_shape[0] != mat_shape[0] {
        return Err(Error::Shape(format!(
            "batch mismatch: offsets {} vs matrices {}",
            off_shape[0], mat_shape[0]
        )));
    }
    let (b, t) = (mat_shape[0], mat_shape[1]);

    let joint_mat = |tape: &mut Tape, j: usize| -> Var {
        let m = tape.narrow(matrices, 2, j, 1); // (B, T, 1, 3, 3)
        tape.reshape(m, &[b, t, 3, 3])
    };
    let joint_off = |tape: &mut Tape, j: usize| -> Var {
        let o = tape.narrow(offsets, 1, j, 1); // (B, 1, 3)
        tape.reshape(o, &[b, 1, 3, 1]) // broadcasts over T in batch_matmul
    };

    let mut global_rot: Vec<Option<Var>> = vec![None; JOINT_COUNT];
    let mut position: Vec<Option<Var>> = vec![None; JOINT_COUNT];
    let root_mat = joint_mat(tape, 0);
    global_rot[0] = Some(root_mat);
    position[0] = Some(tape.constant(Arr::zeros(ndarray::IxDyn(&[b, t, 3, 1]))));

    for j in 1..JOINT_COUNT {
        let parent = TOPOLOGY.parent[j].unwrap();
        let local = joint_mat(tape, j);
        let parent_rot = global_rot[parent].unwrap();
        let rot = tape.batch_matmul(parent_rot, local);
        global_rot[j] = Some(rot);
        let off = joint_off(tape, j);
        let limb = tape.batch_matmul(rot, off); // (B, T, 3, 1)
        let parent_pos = position[parent].unwrap();
        position[j] = Some(tape.add(parent_pos, limb));
    }

    let slices: Vec<Var> = (0..JOINT_COUNT)
        .map(|j| tape.reshape(position[j].unwrap(), &[b, t, 1, 3]))
        .collect();
    Ok(tape.concat(&slices, 2))
}

/// Convenience: rotations in any representation plus per-sample lengths to
/// root-local positions.
pub fn fk_from_rotations_graph(
    tape: &mut Tape,
    lengths: Var,
    rotations: Var,
    repr: Representation,
) -> Result<Var> {
    let offsets = tpose_offsets_graph(tape, lengths)?;
    let mats = rotations_to_matrices_graph(tape, rotations, repr)?;
    fk_local_graph(tape, offsets, mats)
}
