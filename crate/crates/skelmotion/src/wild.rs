//! Bridging clean projections and in-the-wild detections: per-joint
//! confidence simulation, displacement noise, and keypoint-file import.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::topology::{joint, JOINT_COUNT, TOPOLOGY};

/// Number of joints a 2D detector reports: the canonical set minus the
/// synthesized spine joint.
pub const DETECTOR_JOINT_COUNT: usize = 16;

/// Largest detector gap that is filled by linear interpolation; longer gaps
/// become zero-confidence frames.
pub const MAX_INTERP_GAP: usize = 5;

/// Per-joint confidence distribution: a point mass at zero with probability
/// `delta`, otherwise a Gaussian `(mu, sigma)` clipped to (0, 1]. `beta`
/// scales the displacement noise, in preprocessed 2D coordinate units.
#[derive(Debug, Clone)]
pub struct ConfidenceModel {
    pub delta: [f64; JOINT_COUNT],
    pub mu: [f64; JOINT_COUNT],
    pub sigma: [f64; JOINT_COUNT],
    pub beta: f64,
}

impl Default for ConfidenceModel {
    /// Joints close to the end effectors are occluded far more often than
    /// torso joints, so they get a heavier zero mass and a wider, lower
    /// Gaussian.
    fn default() -> Self {
        let mut delta = [0.02; JOINT_COUNT];
        let mut mu = [0.9; JOINT_COUNT];
        let mut sigma = [0.07; JOINT_COUNT];
        for &e in &TOPOLOGY.end_effectors {
            delta[e] = 0.15;
            mu[e] = 0.75;
            sigma[e] = 0.15;
        }
        Self { delta, mu, sigma, beta: 6.0 }
    }
}

impl ConfidenceModel {
    pub fn validate(&self) -> Result<()> {
        for j in 0..JOINT_COUNT {
            if !(0.0..=1.0).contains(&self.delta[j]) {
                return Err(Error::Config(format!("delta[{j}] = {} outside [0,1]", self.delta[j])));
            }
            if self.sigma[j] < 0.0 {
                return Err(Error::Config(format!("sigma[{j}] = {} negative", self.sigma[j])));
            }
        }
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta = {} must be positive", self.beta)));
        }
        Ok(())
    }
}

fn sample_gaussian(mu: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the rng stream easy to reason about
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    mu + sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draws a `(T, J)` confidence map. Each value is 0 with probability
/// `delta_j`, otherwise Gaussian clipped to (0, 1]: draws above 1 clamp to 1,
/// nonpositive draws are resampled once and then floored at 0.01.
pub fn sample_confidence(
    model: &ConfidenceModel,
    rng: &mut ChaCha8Rng,
    frames: usize,
    joints: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((frames, joints));
    for t in 0..frames {
        for j in 0..joints {
            let jj = j.min(JOINT_COUNT - 1);
            let u: f64 = rng.random_range(0.0..1.0);
            out[[t, j]] = if u < model.delta[jj] {
                0.0
            } else {
                let mut x = sample_gaussian(model.mu[jj], model.sigma[jj], rng);
                if x <= 0.0 {
                    x = sample_gaussian(model.mu[jj], model.sigma[jj], rng).max(0.01);
                }
                x.min(1.0)
            };
        }
    }
    out
}

/// Displacement noise: each joint moves by a magnitude drawn from
/// `[0, beta * (1 - c)]` in a direction uniform over the circle. Confidence-0
/// joints are zeroed out entirely.
pub fn perturb_keypoints(
    keypoints: &Array3<f64>,
    confidence: &Array2<f64>,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (t_len, j_len, _) = keypoints.dim();
    assert_eq!(confidence.dim(), (t_len, j_len), "confidence shape mismatch");
    let mut out = keypoints.clone();
    for t in 0..t_len {
        for j in 0..j_len {
            let c = confidence[[t, j]];
            if c == 0.0 {
                out[[t, j, 0]] = 0.0;
                out[[t, j, 1]] = 0.0;
                continue;
            }
            let theta: f64 = rng.random_range(0.0..(2.0 * std::f64::consts::PI));
            let bound = beta * (1.0 - c);
            let magnitude: f64 = if bound > 0.0 { rng.random_range(0.0..bound) } else { 0.0 };
            out[[t, j, 0]] += magnitude * theta.cos();
            out[[t, j, 1]] += magnitude * theta.sin();
        }
    }
    out
}

// --- keypoint file import ------------------------------------------------------

/// Detector joint order: canonical order with the spine removed.
pub fn detector_joint_order() -> [usize; DETECTOR_JOINT_COUNT] {
    let mut out = [0usize; DETECTOR_JOINT_COUNT];
    let mut i = 0;
    for j in 0..JOINT_COUNT {
        if j != joint::SPINE {
            out[i] = j;
            i += 1;
        }
    }
    out
}

#[derive(Deserialize)]
struct KeypointFile {
    width: f64,
    height: f64,
    /// One entry per frame: 16 `[x, y, c]` triplets in image pixels, or null
    /// for frames where the detector produced nothing.
    frames: Vec<Option<Vec<[f64; 3]>>>,
}

/// Imports a detector keypoint file: maps pixels to the normalized camera
/// plane, synthesizes the spine joint as the 2D midpoint of root and neck,
/// and linearly interpolates detector dropouts of up to 5 frames (longer
/// gaps, and gaps touching the clip ends, become zero-confidence frames).
///
/// Returns `(keypoints, confidence)` on the canonical 17-joint set.
pub fn import_keypoints(path: &Path) -> Result<(Array3<f64>, Array2<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let file: KeypointFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display(), e.to_string()))?;
    if file.width <= 0.0 || file.height <= 0.0 {
        return Err(Error::Format(format!(
            "image size {}x{} must be positive",
            file.width, file.height
        )));
    }
    let t_len = file.frames.len();
    if t_len == 0 {
        return Err(Error::Format("keypoint file contains no frames".into()));
    }

    let order = detector_joint_order();
    let half_w = file.width / 2.0;
    let half_h = file.height / 2.0;
    let mut keypoints = Array3::zeros((t_len, JOINT_COUNT, 2));
    let mut confidence = Array2::zeros((t_len, JOINT_COUNT));
    let mut present = vec![false; t_len];

    for (t, frame) in file.frames.iter().enumerate() {
        let Some(triplets) = frame else { continue };
        if triplets.len() != DETECTOR_JOINT_COUNT {
            return Err(Error::Format(format!(
                "frame {t} has {} joints, expected {DETECTOR_JOINT_COUNT}",
                triplets.len()
            )));
        }
        present[t] = true;
        for (d, &[px, py, c]) in triplets.iter().enumerate() {
            let j = order[d];
            // pixels -> camera plane: x right, y up, unit = half image width
            keypoints[[t, j, 0]] = (px - half_w) / half_w;
            keypoints[[t, j, 1]] = (half_h - py) / half_w;
            confidence[[t, j]] = c.clamp(0.0, 1.0);
        }
        // synthesized spine: 2D midpoint between root and neck
        for k in 0..2 {
            keypoints[[t, joint::SPINE, k]] =
                (keypoints[[t, joint::PELVIS, k]] + keypoints[[t, joint::NECK, k]]) / 2.0;
        }
        confidence[[t, joint::SPINE]] =
            confidence[[t, joint::PELVIS]].min(confidence[[t, joint::NECK]]);
    }

    fill_gaps(&mut keypoints, &mut confidence, &present);
    Ok((keypoints, confidence))
}

/// Linear interpolation across interior detector dropouts of length at most
/// [`MAX_INTERP_GAP`]; anything else keeps confidence 0 and keypoints (0,0).
fn fill_gaps(keypoints: &mut Array3<f64>, confidence: &mut Array2<f64>, present: &[bool]) {
    let t_len = present.len();
    let mut t = 0;
    while t < t_len {
        if present[t] {
            t += 1;
            continue;
        }
        let gap_start = t;
        while t < t_len && !present[t] {
            t += 1;
        }
        let gap_end = t; // exclusive
        let gap = gap_end - gap_start;
        if gap_start == 0 || gap_end == t_len || gap > MAX_INTERP_GAP {
            continue; // stays zero-confidence
        }
        let before = gap_start - 1;
        let after = gap_end;
        for g in gap_start..gap_end {
            let alpha = (g - before) as f64 / (after - before) as f64;
            for j in 0..JOINT_COUNT {
                for k in 0..2 {
                    keypoints[[g, j, k]] = (1.0 - alpha) * keypoints[[before, j, k]]
                        + alpha * keypoints[[after, j, k]];
                }
                confidence[[g, j]] = (1.0 - alpha) * confidence[[before, j]]
                    + alpha * confidence[[after, j]];
            }
        }
    }
}
