//! Motion clips: positions, optional rotations, root trajectory, contacts.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::fk::fk_global;
use crate::rotation::{matrix_to_quat, quat_to_matrix, Representation, RotationSeq};
use crate::skeleton::{build_tpose, Skeleton};
use crate::topology::{joint, JOINT_COUNT, TOPOLOGY};

pub const FOOT_JOINTS: [usize; 2] = [joint::L_FOOT, joint::R_FOOT];

/// Height threshold of the contact definition, in millimetres.
pub const CONTACT_HEIGHT_MM: f64 = 20.0;
/// Velocity threshold of the contact definition, in millimetres per frame.
pub const CONTACT_VELOCITY_MM_PER_FRAME: f64 = 1.0;

/// One ingested clip. Positions are `(T, 17, 3)` in dataset space (+Y up),
/// `root` duplicates the pelvis trajectory, contacts are `(T, 2)` for the
/// left and right foot. `units_per_mm` declares the clip's unit scale so the
/// millimetre contact thresholds can be applied before normalization.
#[derive(Debug, Clone)]
pub struct MotionSequence {
    pub positions: Array3<f64>,
    pub rotations: Option<RotationSeq>,
    pub root: Array2<f64>,
    pub contacts: Array2<u8>,
    pub skeleton: Skeleton,
    pub source_id: String,
    pub units_per_mm: f64,
    pub fps: f64,
}

impl MotionSequence {
    pub fn frames(&self) -> usize {
        self.positions.dim().0
    }

    /// Ingestion consistency: when rotations are present, FK of the canonical
    /// rest pose must reproduce the stored positions.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        let Some(rots) = &self.rotations else { return Ok(()) };
        let tpose = build_tpose(&self.skeleton)?;
        let rebuilt = fk_global(&tpose, rots, &self.root)?;
        let max_dev = rebuilt
            .iter()
            .zip(self.positions.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if max_dev > tol {
            return Err(Error::Ingestion(format!(
                "clip '{}': FK of stored rotations deviates from positions by {max_dev:.3e}",
                self.source_id
            )));
        }
        Ok(())
    }

    /// Root-local positions (root subtracted per frame).
    pub fn local_positions(&self) -> Array3<f64> {
        let (t_len, j_len, _) = self.positions.dim();
        let mut out = self.positions.clone();
        for t in 0..t_len {
            for j in 0..j_len {
                for k in 0..3 {
                    out[[t, j, k]] -= self.root[[t, k]];
                }
            }
        }
        out
    }
}

/// Rescales a clip so the mean of its 16 expanded bone lengths is one.
/// Returns the divisor so outputs can be mapped back to source units.
pub fn normalize_scale(seq: &MotionSequence) -> Result<(MotionSequence, f64)> {
    let factor = seq.skeleton.mean_bone_length();
    if !(factor.is_finite() && factor > 1e-12) {
        return Err(Error::InvalidSkeleton(format!(
            "mean bone length {factor} cannot be normalized"
        )));
    }
    let mut out = seq.clone();
    out.positions.mapv_inplace(|v| v / factor);
    out.root.mapv_inplace(|v| v / factor);
    out.skeleton = seq.skeleton.scaled(1.0 / factor)?;
    out.units_per_mm = seq.units_per_mm / factor;
    Ok((out, factor))
}

/// Ground-truth foot contacts: a foot is planted when its height above the
/// ground estimate is below 20mm and its mean speed over the surrounding
/// 5-frame window is below 1mm/frame. The ground is the average of the lowest
/// 20-percentile of all foot heights in the clip; windows shrink at the clip
/// boundaries.
pub fn extract_foot_contacts(seq: &MotionSequence) -> Result<Array2<u8>> {
    let t_len = seq.frames();
    if t_len < 5 {
        return Err(Error::InsufficientFrames { need: 5, got: t_len });
    }
    let h_thresh = CONTACT_HEIGHT_MM * seq.units_per_mm;
    let v_thresh = CONTACT_VELOCITY_MM_PER_FRAME * seq.units_per_mm;

    let mut heights: Vec<f64> = Vec::with_capacity(2 * t_len);
    for &f in &FOOT_JOINTS {
        for t in 0..t_len {
            heights.push(seq.positions[[t, f, 1]]);
        }
    }
    heights.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((heights.len() as f64) * 0.2).floor().max(1.0) as usize;
    let ground = heights[..k].iter().sum::<f64>() / k as f64;

    let mut contacts = Array2::zeros((t_len, 2));
    for (fi, &f) in FOOT_JOINTS.iter().enumerate() {
        // per-frame speeds between consecutive frames
        let mut speed = vec![0.0; t_len - 1];
        for (u, s) in speed.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..3 {
                let d = seq.positions[[u + 1, f, k]] - seq.positions[[u, f, k]];
                acc += d * d;
            }
            *s = acc.sqrt();
        }
        for t in 0..t_len {
            let low = seq.positions[[t, f, 1]] - ground < h_thresh;
            let lo = t.saturating_sub(2);
            let hi = (t + 2).min(t_len - 1);
            let window = &speed[lo..hi];
            let slow = !window.is_empty()
                && window.iter().sum::<f64>() / (window.len() as f64) < v_thresh;
            if low && slow {
                contacts[[t, fi]] = 1;
            }
        }
    }
    Ok(contacts)
}

/// Mirror a quaternion through the YZ plane: conjugation by diag(-1,1,1).
fn mirror_quat(q: &[f64; 4]) -> [f64; 4] {
    [q[0], q[1], -q[2], -q[3]]
}

/// Left-right flip: x coordinates are negated and mirrored joints swap.
/// Contacts swap columns; rotations are conjugated through the mirror plane.
pub fn flip_sequence(seq: &MotionSequence) -> Result<MotionSequence> {
    let (t_len, j_len, _) = seq.positions.dim();
    let mut positions = Array3::zeros((t_len, j_len, 3));
    for j in 0..j_len {
        let m = TOPOLOGY.mirror(j);
        for t in 0..t_len {
            positions[[t, j, 0]] = -seq.positions[[t, m, 0]];
            positions[[t, j, 1]] = seq.positions[[t, m, 1]];
            positions[[t, j, 2]] = seq.positions[[t, m, 2]];
        }
    }
    let mut root = seq.root.clone();
    for t in 0..t_len {
        root[[t, 0]] = -root[[t, 0]];
    }
    let mut contacts = Array2::zeros((t_len, 2));
    for t in 0..t_len {
        contacts[[t, 0]] = seq.contacts[[t, 1]];
        contacts[[t, 1]] = seq.contacts[[t, 0]];
    }
    let rotations = match &seq.rotations {
        None => None,
        Some(r) => {
            let quat = r.convert(Representation::Quaternion)?;
            let mut values = Array3::zeros((t_len, JOINT_COUNT, 4));
            for t in 0..t_len {
                for j in 0..JOINT_COUNT {
                    let m = TOPOLOGY.mirror(j);
                    let q = [
                        quat.values[[t, m, 0]],
                        quat.values[[t, m, 1]],
                        quat.values[[t, m, 2]],
                        quat.values[[t, m, 3]],
                    ];
                    let flipped = mirror_quat(&q);
                    for (k, &v) in flipped.iter().enumerate() {
                        values[[t, j, k]] = v;
                    }
                }
            }
            let flipped = RotationSeq::new(Representation::Quaternion, values)?;
            Some(flipped.convert(r.repr)?)
        }
    };
    Ok(MotionSequence {
        positions,
        rotations,
        root,
        contacts,
        skeleton: seq.skeleton.clone(),
        source_id: seq.source_id.clone(),
        units_per_mm: seq.units_per_mm,
        fps: seq.fps,
    })
}

/// Sanity check used by tests: the mirror conjugation above agrees with the
/// explicit matrix sandwich S * R * S.
pub fn mirror_quat_reference(q: &[f64; 4]) -> Result<[f64; 4]> {
    let r = quat_to_matrix(q)?;
    let s = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let m = crate::rotation::mat_mul(&s, &crate::rotation::mat_mul(&r, &s));
    matrix_to_quat(&m)
}
