//! Forward kinematics: compose per-joint rotations down the tree and turn a
//! rest pose plus rotations into world-space joint positions.
//!
//! The convention follows the tree recurrence `P[n] = P[parent] + R[n] * o[n]`
//! where `R[n]` is the global rotation accumulated from the root down to and
//! including joint `n`, and `o[n]` is joint `n`'s rest offset. The root has a
//! zero offset; its rotation orients the whole body.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::rotation::{mat_mul, mat_vec, Mat3, RotationSeq};
use crate::skeleton::TPose;
use crate::topology::{JOINT_COUNT, TOPOLOGY};

/// Root-local positions: the root sits at the origin in every frame.
pub fn fk_local(tpose: &TPose, rotations: &RotationSeq) -> Result<Array3<f64>> {
    let frames = rotations.frames();
    let (_, j, _) = rotations.values.dim();
    if j != JOINT_COUNT {
        return Err(Error::Shape(format!("rotations cover {j} joints, need {JOINT_COUNT}")));
    }
    let mut out = Array3::zeros((frames, JOINT_COUNT, 3));
    let mut global: [Mat3; JOINT_COUNT] = [[[0.0; 3]; 3]; JOINT_COUNT];
    for t in 0..frames {
        global[0] = rotations.matrix(t, 0)?;
        for n in 1..JOINT_COUNT {
            let p = TOPOLOGY.parent[n].unwrap();
            global[n] = mat_mul(&global[p], &rotations.matrix(t, n)?);
            let limb = mat_vec(&global[n], &tpose.offsets[n]);
            for k in 0..3 {
                out[[t, n, k]] = out[[t, p, k]] + limb[k];
            }
        }
    }
    Ok(out)
}

/// Full pose: local FK plus the root trajectory.
pub fn fk_global(
    tpose: &TPose,
    rotations: &RotationSeq,
    root_positions: &Array2<f64>,
) -> Result<Array3<f64>> {
    let frames = rotations.frames();
    if root_positions.dim() != (frames, 3) {
        return Err(Error::Shape(format!(
            "root trajectory is {:?}, rotations cover {frames} frames",
            root_positions.dim()
        )));
    }
    let mut out = fk_local(tpose, rotations)?;
    for t in 0..frames {
        for n in 0..JOINT_COUNT {
            for k in 0..3 {
                out[[t, n, k]] += root_positions[[t, k]];
            }
        }
    }
    Ok(out)
}
