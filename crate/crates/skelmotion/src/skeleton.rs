//! Symmetry-grouped bone lengths and the rest-pose ("T-pose") construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{JointTopology, BONE_COUNT, GROUP_COUNT, JOINT_COUNT, REST_DIRECTIONS, TOPOLOGY};

/// A skeleton is nine positive lengths, one per symmetry group. Mirrored
/// limbs therefore share a length by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub lengths: [f64; GROUP_COUNT],
}

impl Skeleton {
    pub fn new(lengths: [f64; GROUP_COUNT]) -> Result<Self> {
        for (g, &l) in lengths.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidSkeleton(format!("group {g} has length {l}")));
            }
        }
        Ok(Self { lengths })
    }

    pub fn topology(&self) -> &'static JointTopology {
        &TOPOLOGY
    }

    /// Length of the bone ending at `child`.
    pub fn bone_length(&self, child: usize) -> f64 {
        self.lengths[TOPOLOGY.bone_group(child)]
    }

    /// The 16 per-bone lengths, indexed by child joint minus one.
    pub fn expanded(&self) -> [f64; BONE_COUNT] {
        let mut out = [0.0; BONE_COUNT];
        for j in 1..JOINT_COUNT {
            out[j - 1] = self.bone_length(j);
        }
        out
    }

    /// Mean over the 16 expanded bone lengths; the dataset normalization
    /// rescales everything so this equals one.
    pub fn mean_bone_length(&self) -> f64 {
        self.expanded().iter().sum::<f64>() / BONE_COUNT as f64
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let mut lengths = self.lengths;
        for l in &mut lengths {
            *l *= factor;
        }
        Skeleton::new(lengths)
    }
}

/// Rest pose: per-joint 3D offsets from the parent, root at the origin,
/// everything in the XY plane.
#[derive(Debug, Clone, PartialEq)]
pub struct TPose {
    pub offsets: [[f64; 3]; JOINT_COUNT],
}

/// Lays the skeleton out in the canonical rest pose: the spine chain along
/// +Y, legs along -Y, left limbs along +X and right limbs along -X.
pub fn build_tpose(skeleton: &Skeleton) -> Result<TPose> {
    Skeleton::new(skeleton.lengths)?; // revalidate: lengths must be positive
    let mut offsets = [[0.0; 3]; JOINT_COUNT];
    for j in 1..JOINT_COUNT {
        let len = skeleton.bone_length(j);
        let d = REST_DIRECTIONS[j];
        offsets[j] = [d[0] * len, d[1] * len, d[2] * len];
    }
    Ok(TPose { offsets })
}

impl TPose {
    /// Joint positions of the rest pose itself (identity rotations).
    pub fn joint_positions(&self) -> [[f64; 3]; JOINT_COUNT] {
        let mut pos = [[0.0; 3]; JOINT_COUNT];
        for j in 1..JOINT_COUNT {
            let p = TOPOLOGY.parent[j].unwrap();
            for k in 0..3 {
                pos[j][k] = pos[p][k] + self.offsets[j][k];
            }
        }
        pos
    }
}
