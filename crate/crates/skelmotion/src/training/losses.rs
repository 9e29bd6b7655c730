//! The individual training loss terms, all built as tape operations so
//! gradients flow back into the encoders.

use ndarray::{ArrayD, IxDyn};
use revad::{Arr, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::Representation;
use crate::topology::{JOINT_COUNT, TOPOLOGY};

/// Loss term weights. The four fixed weights follow the training recipe;
/// the end-effector emphasis and reference-pose weight are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub skeleton: f64,
    pub adversarial: f64,
    pub root: f64,
    pub contact: f64,
    pub contact_velocity: f64,
    pub end_effector: f64,
    pub tpose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            skeleton: 0.1,
            adversarial: 1.0,
            root: 1.3,
            contact: 0.5,
            contact_velocity: 0.5,
            end_effector: 2.0,
            tpose: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.skeleton,
            self.adversarial,
            self.root,
            self.contact,
            self.contact_velocity,
            self.end_effector,
            self.tpose,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContactLossForm {
    /// Binary cross-entropy on the contact logits.
    Bce,
    /// Squared error between the contact probabilities and the labels.
    Squared,
}

/// Mean squared error between predicted group lengths `(B, 9)` and targets.
pub fn loss_skeleton(tape: &mut Tape, pred: Var, gt: &Arr) -> Var {
    let gt = tape.constant(gt.clone());
    tape.mse(pred, gt)
}

/// Joint position loss over root-local poses `(B, T, 17, 3)`: a weighted sum
/// of squared errors where end-effector entries count `end_effector_weight`
/// times, normalized by the total entry count. With weight 1 this is exactly
/// the plain MSE over all joints.
pub fn loss_position(tape: &mut Tape, pred_local: Var, gt_local: &Arr, end_effector_weight: f64) -> Var {
    let mut joint_weights = ArrayD::from_elem(IxDyn(&[1, 1, JOINT_COUNT, 1]), 1.0);
    for &e in &TOPOLOGY.end_effectors {
        joint_weights[[0, 0, e, 0]] = end_effector_weight;
    }
    let total = gt_local.len() as f64;
    let gt = tape.constant(gt_local.clone());
    let w = tape.constant(joint_weights);
    let d = tape.sub(pred_local, gt);
    let sq = tape.square(d);
    let weighted = tape.mul(sq, w);
    let sum = tape.sum_all(weighted);
    tape.scale(sum, 1.0 / total)
}

/// Mean squared error between predicted and true root depths `(B, T)`.
pub fn loss_root_depth(tape: &mut Tape, pred: Var, gt: &Arr) -> Var {
    let gt = tape.constant(gt.clone());
    tape.mse(pred, gt)
}

/// Contact-label loss on logits `(B, T, 2)` against binary targets.
pub fn loss_contact(tape: &mut Tape, logits: Var, gt: &Arr, form: ContactLossForm) -> Var {
    match form {
        ContactLossForm::Bce => {
            let l = tape.bce_with_logits(logits, gt.clone());
            tape.mean_all(l)
        }
        ContactLossForm::Squared => {
            let p = tape.sigmoid(logits);
            let gt = tape.constant(gt.clone());
            tape.mse(p, gt)
        }
    }
}

/// Contact-velocity loss: squared magnitude of each foot's frame-to-frame
/// displacement, masked by the ground-truth contact of the earlier frame,
/// averaged over masked entries. Returns exactly zero when no frame is in
/// contact.
pub fn loss_contact_velocity(tape: &mut Tape, pred_positions: Var, gt_contacts: &Arr) -> Var {
    let shape = tape.value(pred_positions).shape().to_vec();
    let t_len = shape[1];
    assert_eq!(gt_contacts.shape(), &[shape[0], t_len, 2], "contact shape mismatch");
    if t_len < 2 {
        return tape.constant_scalar(0.0);
    }
    let foot_joints = crate::motion::FOOT_JOINTS;
    // mask of frame t applies to the displacement t -> t+1
    let mut mask = ArrayD::zeros(IxDyn(&[shape[0], t_len - 1, 2]));
    let mut count = 0.0;
    for b in 0..shape[0] {
        for t in 0..t_len - 1 {
            for f in 0..2 {
                let m = gt_contacts[[b, t, f]];
                mask[[b, t, f]] = m;
                count += m;
            }
        }
    }
    if count == 0.0 {
        return tape.constant_scalar(0.0);
    }
    let later = tape.narrow(pred_positions, 1, 1, t_len - 1);
    let earlier = tape.narrow(pred_positions, 1, 0, t_len - 1);
    let delta = tape.sub(later, earlier); // (B, T-1, 17, 3)
    let mut per_foot = Vec::with_capacity(2);
    for &fj in &foot_joints {
        let d = tape.narrow(delta, 2, fj, 1); // (B, T-1, 1, 3)
        let d = tape.reshape(d, &[shape[0], t_len - 1, 3]);
        let sq = tape.square(d);
        let mag = tape.sum_axes(sq, &[2], false); // (B, T-1)
        per_foot.push(tape.reshape(mag, &[shape[0], t_len - 1, 1]));
    }
    let mags = tape.concat(&per_foot, 2); // (B, T-1, 2)
    let mask = tape.constant(mask);
    let masked = tape.mul(mags, mask);
    let sum = tape.sum_all(masked);
    tape.scale(sum, 1.0 / count)
}

/// Reference-pose loss: squared deviation of the predicted rotations from
/// the identity rotation of the active representation, averaged over all
/// entries.
pub fn loss_tpose_reference(tape: &mut Tape, rotations: Var, repr: Representation) -> Var {
    let shape = tape.value(rotations).shape().to_vec();
    let ident = repr.identity();
    let target = ArrayD::from_shape_fn(IxDyn(&shape), |idx| ident[idx[3]]);
    let t = tape.constant(target);
    tape.mse(rotations, t)
}

/// Least-squares GAN, discriminator side: real scores pushed to one, fake
/// scores (already detached) pushed to zero.
pub fn lsgan_d_loss(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Var {
    let one = tape.add_scalar(real_scores, -1.0);
    let real_term = tape.square(one);
    let real_term = tape.mean_all(real_term);
    let fake_term = tape.square(fake_scores);
    let fake_term = tape.mean_all(fake_term);
    tape.add(real_term, fake_term)
}

/// Least-squares GAN, generator side: fake scores pushed to one.
pub fn lsgan_g_loss(tape: &mut Tape, fake_scores: Var) -> Var {
    let d = tape.add_scalar(fake_scores, -1.0);
    let sq = tape.square(d);
    tape.mean_all(sq)
}
