//! The canonical 17-joint skeleton tree.
//!
//! Joint order is fixed: pelvis, the spine chain up to the head, then the
//! left and right arm chains, then the left and right leg chains. Every bone
//! is identified by its child joint, and each bone belongs to exactly one of
//! nine symmetry groups so mirrored limbs always share a length.

pub const JOINT_COUNT: usize = 17;
pub const BONE_COUNT: usize = 16;
pub const GROUP_COUNT: usize = 9;

/// Canonical joint indices.
pub mod joint {
    pub const PELVIS: usize = 0;
    pub const SPINE: usize = 1;
    pub const THORAX: usize = 2;
    pub const NECK: usize = 3;
    pub const HEAD: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_SHOULDER: usize = 8;
    pub const R_ELBOW: usize = 9;
    pub const R_WRIST: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_FOOT: usize = 13;
    pub const R_HIP: usize = 14;
    pub const R_KNEE: usize = 15;
    pub const R_FOOT: usize = 16;
}

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_foot",
    "right_hip",
    "right_knee",
    "right_foot",
];

/// Symmetry group indices.
pub mod group {
    /// Pelvis->spine and spine->thorax: the spine joint is a midpoint, so
    /// both halves share one length.
    pub const SPINE_HALF: usize = 0;
    pub const NECK: usize = 1;
    pub const HEAD: usize = 2;
    pub const SHOULDER: usize = 3;
    pub const UPPER_ARM: usize = 4;
    pub const FOREARM: usize = 5;
    pub const HIP: usize = 6;
    pub const THIGH: usize = 7;
    pub const SHIN: usize = 8;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointTopology {
    pub joint_names: [&'static str; JOINT_COUNT],
    /// Parent index per joint; the pelvis root has none.
    pub parent: [Option<usize>; JOINT_COUNT],
    /// Symmetry group of the bone ending at each non-root joint.
    bone_group: [usize; JOINT_COUNT],
    pub end_effectors: [usize; 5],
    pub left_right_pairs: [(usize, usize); 6],
}

pub const TOPOLOGY: JointTopology = JointTopology {
    joint_names: JOINT_NAMES,
    parent: [
        None,                     // pelvis
        Some(joint::PELVIS),      // spine
        Some(joint::SPINE),       // thorax
        Some(joint::THORAX),      // neck
        Some(joint::NECK),        // head
        Some(joint::THORAX),      // left_shoulder
        Some(joint::L_SHOULDER),  // left_elbow
        Some(joint::L_ELBOW),     // left_wrist
        Some(joint::THORAX),      // right_shoulder
        Some(joint::R_SHOULDER),  // right_elbow
        Some(joint::R_ELBOW),     // right_wrist
        Some(joint::PELVIS),      // left_hip
        Some(joint::L_HIP),       // left_knee
        Some(joint::L_KNEE),      // left_foot
        Some(joint::PELVIS),      // right_hip
        Some(joint::R_HIP),       // right_knee
        Some(joint::R_KNEE),      // right_foot
    ],
    bone_group: [
        usize::MAX, // pelvis has no bone
        group::SPINE_HALF,
        group::SPINE_HALF,
        group::NECK,
        group::HEAD,
        group::SHOULDER,
        group::UPPER_ARM,
        group::FOREARM,
        group::SHOULDER,
        group::UPPER_ARM,
        group::FOREARM,
        group::HIP,
        group::THIGH,
        group::SHIN,
        group::HIP,
        group::THIGH,
        group::SHIN,
    ],
    end_effectors: [joint::HEAD, joint::L_WRIST, joint::R_WRIST, joint::L_FOOT, joint::R_FOOT],
    left_right_pairs: [
        (joint::L_SHOULDER, joint::R_SHOULDER),
        (joint::L_ELBOW, joint::R_ELBOW),
        (joint::L_WRIST, joint::R_WRIST),
        (joint::L_HIP, joint::R_HIP),
        (joint::L_KNEE, joint::R_KNEE),
        (joint::L_FOOT, joint::R_FOOT),
    ],
};

/// Unit direction of each bone in the rest pose, indexed by child joint.
/// The spine chain runs along +Y, legs along -Y, left limbs extend along +X
/// and right limbs along -X; everything lies in the XY plane.
pub const REST_DIRECTIONS: [[f64; 3]; JOINT_COUNT] = [
    [0.0, 0.0, 0.0],  // pelvis (root, zero offset)
    [0.0, 1.0, 0.0],  // spine
    [0.0, 1.0, 0.0],  // thorax
    [0.0, 1.0, 0.0],  // neck
    [0.0, 1.0, 0.0],  // head
    [1.0, 0.0, 0.0],  // left_shoulder
    [1.0, 0.0, 0.0],  // left_elbow
    [1.0, 0.0, 0.0],  // left_wrist
    [-1.0, 0.0, 0.0], // right_shoulder
    [-1.0, 0.0, 0.0], // right_elbow
    [-1.0, 0.0, 0.0], // right_wrist
    [1.0, 0.0, 0.0],  // left_hip
    [0.0, -1.0, 0.0], // left_knee
    [0.0, -1.0, 0.0], // left_foot
    [-1.0, 0.0, 0.0], // right_hip
    [0.0, -1.0, 0.0], // right_knee
    [0.0, -1.0, 0.0], // right_foot
];

impl JointTopology {
    /// Symmetry group of the bone ending at `child`. Panics for the root.
    pub fn bone_group(&self, child: usize) -> usize {
        assert!(child > 0 && child < JOINT_COUNT, "joint {child} has no bone");
        self.bone_group[child]
    }

    /// Child-joint indices of the 16 bones, in joint order.
    pub fn bones(&self) -> impl Iterator<Item = usize> {
        1..JOINT_COUNT
    }

    pub fn is_end_effector(&self, j: usize) -> bool {
        self.end_effectors.contains(&j)
    }

    /// The mirrored counterpart of a joint; unpaired joints map to themselves.
    pub fn mirror(&self, j: usize) -> usize {
        for &(l, r) in &self.left_right_pairs {
            if j == l {
                return r;
            }
            if j == r {
                return l;
            }
        }
        j
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|&n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parent_relation_is_a_single_tree_with_16_bones() {
        let topo = &TOPOLOGY;
        assert!(topo.parent[joint::PELVIS].is_none());
        let mut bone_count = 0;
        for j in 1..JOINT_COUNT {
            let p = topo.parent[j].expect("non-root joint has a parent");
            assert!(p < j, "parents precede children in index order");
            bone_count += 1;
            // every joint reaches the root
            let mut cur = j;
            let mut steps = 0;
            while let Some(p) = topo.parent[cur] {
                cur = p;
                steps += 1;
                assert!(steps <= JOINT_COUNT, "cycle in parent relation");
            }
            assert_eq!(cur, joint::PELVIS);
        }
        assert_eq!(bone_count, BONE_COUNT);
    }

    #[test]
    fn every_bone_in_exactly_one_group_and_mirrors_share_groups() {
        let topo = &TOPOLOGY;
        let mut members = vec![0usize; GROUP_COUNT];
        for j in topo.bones() {
            let g = topo.bone_group(j);
            assert!(g < GROUP_COUNT);
            members[g] += 1;
        }
        assert_eq!(members.iter().sum::<usize>(), BONE_COUNT);
        assert!(members.iter().all(|&m| m >= 1));
        for &(l, r) in &topo.left_right_pairs {
            assert_eq!(topo.bone_group(l), topo.bone_group(r));
        }
    }

    #[test]
    fn left_right_pairing_is_an_involution() {
        let topo = &TOPOLOGY;
        for j in 0..JOINT_COUNT {
            assert_eq!(topo.mirror(topo.mirror(j)), j);
        }
    }

    #[test]
    fn end_effectors_are_leaves() {
        let topo = &TOPOLOGY;
        for &e in &topo.end_effectors {
            assert!(
                !topo.parent.iter().any(|p| *p == Some(e)),
                "end effector {e} has children"
            );
        }
    }

    #[test]
    fn rest_directions_are_unit_and_planar() {
        for j in 1..JOINT_COUNT {
            let d = REST_DIRECTIONS[j];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert_eq!(d[2], 0.0, "rest pose lies in the XY plane");
        }
    }
}
