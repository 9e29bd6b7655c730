//! 2D input normalization: root-relative coordinates standardized per joint
//! with corpus statistics, plus the global 2D root-velocity channel.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{joint, JOINT_COUNT};

/// Per-joint mean and standard deviation of root-relative 2D coordinates,
/// accumulated once over the training corpus. The root itself is exempt: its
/// root-relative coordinates are identically zero by construction, so it
/// keeps `(mean 0, std 1)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusStats2d {
    pub mean: Vec<[f64; 2]>,
    pub std: Vec<[f64; 2]>,
}

impl CorpusStats2d {
    /// Single-pass reduction over projected training keypoints `(T, 17, 2)`.
    pub fn compute<'a>(clips: impl Iterator<Item = &'a Array3<f64>>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = vec![[0.0f64; 2]; JOINT_COUNT];
        let mut sum_sq = vec![[0.0f64; 2]; JOINT_COUNT];
        for kp in clips {
            let (t_len, j_len, _) = kp.dim();
            if j_len != JOINT_COUNT {
                return Err(Error::Shape(format!("keypoints have {j_len} joints")));
            }
            for t in 0..t_len {
                for j in 0..JOINT_COUNT {
                    for k in 0..2 {
                        let v = kp[[t, j, k]] - kp[[t, joint::PELVIS, k]];
                        sum[j][k] += v;
                        sum_sq[j][k] += v * v;
                    }
                }
            }
            count += t_len;
        }
        if count == 0 {
            return Err(Error::Stats("no frames in corpus".into()));
        }
        let mut mean = vec![[0.0f64; 2]; JOINT_COUNT];
        let mut std = vec![[1.0f64; 2]; JOINT_COUNT];
        for j in 0..JOINT_COUNT {
            if j == joint::PELVIS {
                continue;
            }
            for k in 0..2 {
                mean[j][k] = sum[j][k] / count as f64;
                let var = (sum_sq[j][k] / count as f64 - mean[j][k] * mean[j][k]).max(0.0);
                let s = var.sqrt();
                if s < 1e-9 {
                    return Err(Error::Stats(format!(
                        "joint {j} coordinate {k} has zero standard deviation over the corpus"
                    )));
                }
                std[j][k] = s;
            }
        }
        Ok(Self { mean, std })
    }
}

/// A preprocessed 2D clip ready for the encoders: standardized root-relative
/// keypoints, per-joint confidence, and the raw global root-velocity channel.
/// `root_start` retains the first raw root position so the transform stays
/// exactly invertible.
#[derive(Debug, Clone)]
pub struct Pose2DSequence {
    pub keypoints: Array3<f64>,
    pub confidence: Array2<f64>,
    pub root_velocity_2d: Array2<f64>,
    pub root_start: [f64; 2],
    pub stats: CorpusStats2d,
}

impl Pose2DSequence {
    pub fn frames(&self) -> usize {
        self.keypoints.dim().0
    }

    /// Raw root trajectory recovered from the start position and the
    /// velocity channel (whose final entry repeats the previous one and is
    /// skipped here).
    pub fn root_trajectory(&self) -> Array2<f64> {
        let t_len = self.frames();
        let mut out = Array2::zeros((t_len, 2));
        out[[0, 0]] = self.root_start[0];
        out[[0, 1]] = self.root_start[1];
        for t in 1..t_len {
            for k in 0..2 {
                out[[t, k]] = out[[t - 1, k]] + self.root_velocity_2d[[t - 1, k]];
            }
        }
        out
    }
}

/// Root-relative standardization plus the appended global 2D root velocity
/// (forward differences; the last frame repeats the previous value).
pub fn preprocess_2d(
    raw_keypoints: &Array3<f64>,
    confidence: &Array2<f64>,
    stats: &CorpusStats2d,
) -> Result<Pose2DSequence> {
    let (t_len, j_len, _) = raw_keypoints.dim();
    if j_len != JOINT_COUNT {
        return Err(Error::Shape(format!("keypoints have {j_len} joints")));
    }
    if confidence.dim() != (t_len, j_len) {
        return Err(Error::Shape(format!(
            "confidence {:?} does not match keypoints {:?}",
            confidence.dim(),
            raw_keypoints.dim()
        )));
    }
    if t_len == 0 {
        return Err(Error::InsufficientFrames { need: 1, got: 0 });
    }
    for j in 0..JOINT_COUNT {
        for k in 0..2 {
            if stats.std[j][k] <= 0.0 {
                return Err(Error::Stats(format!("joint {j} has nonpositive std")));
            }
        }
    }
    let mut keypoints = Array3::zeros((t_len, JOINT_COUNT, 2));
    for t in 0..t_len {
        for j in 0..JOINT_COUNT {
            for k in 0..2 {
                let rel = raw_keypoints[[t, j, k]] - raw_keypoints[[t, joint::PELVIS, k]];
                keypoints[[t, j, k]] = (rel - stats.mean[j][k]) / stats.std[j][k];
            }
        }
    }
    let mut root_velocity_2d = Array2::zeros((t_len, 2));
    for t in 0..t_len - 1 {
        for k in 0..2 {
            root_velocity_2d[[t, k]] =
                raw_keypoints[[t + 1, joint::PELVIS, k]] - raw_keypoints[[t, joint::PELVIS, k]];
        }
    }
    if t_len >= 2 {
        for k in 0..2 {
            root_velocity_2d[[t_len - 1, k]] = root_velocity_2d[[t_len - 2, k]];
        }
    }
    Ok(Pose2DSequence {
        keypoints,
        confidence: confidence.clone(),
        root_velocity_2d,
        root_start: [
            raw_keypoints[[0, joint::PELVIS, 0]],
            raw_keypoints[[0, joint::PELVIS, 1]],
        ],
        stats: stats.clone(),
    })
}

/// Exact inverse of [`preprocess_2d`].
pub fn inverse_preprocess(seq: &Pose2DSequence) -> Array3<f64> {
    let t_len = seq.frames();
    let root = seq.root_trajectory();
    let mut out = Array3::zeros((t_len, JOINT_COUNT, 2));
    for t in 0..t_len {
        for j in 0..JOINT_COUNT {
            for k in 0..2 {
                let rel = seq.keypoints[[t, j, k]] * seq.stats.std[j][k] + seq.stats.mean[j][k];
                out[[t, j, k]] = rel + root[[t, k]];
            }
        }
    }
    out
}

/// Stacks a preprocessed clip into the encoder input layout `(53, T)`:
/// 34 keypoint channels, 17 confidence channels, 2 root-velocity channels.
/// `keypoints` is passed separately so confidence-driven perturbation can be
/// applied between preprocessing and stacking.
pub fn stack_input_channels(
    keypoints: &Array3<f64>,
    confidence: &Array2<f64>,
    root_velocity: &Array2<f64>,
) -> Array2<f64> {
    let (t_len, j_len, _) = keypoints.dim();
    let c_total = 2 * j_len + j_len + 2;
    let mut out = Array2::zeros((c_total, t_len));
    for t in 0..t_len {
        for j in 0..j_len {
            out[[2 * j, t]] = keypoints[[t, j, 0]];
            out[[2 * j + 1, t]] = keypoints[[t, j, 1]];
            out[[2 * j_len + j, t]] = confidence[[t, j]];
        }
        out[[3 * j_len, t]] = root_velocity[[t, 0]];
        out[[3 * j_len + 1, t]] = root_velocity[[t, 1]];
    }
    out
}

/// Number of encoder input channels.
pub const INPUT_CHANNELS: usize = 2 * JOINT_COUNT + JOINT_COUNT + 2;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn random_corpus(rng: &mut ChaCha8Rng, clips: usize, t_len: usize) -> Vec<Array3<f64>> {
        (0..clips)
            .map(|_| {
                let mut kp = Array3::zeros((t_len, JOINT_COUNT, 2));
                for t in 0..t_len {
                    let rx: f64 = rng.random_range(-0.5..0.5);
                    let ry: f64 = rng.random_range(-0.5..0.5);
                    kp[[t, joint::PELVIS, 0]] = rx;
                    kp[[t, joint::PELVIS, 1]] = ry;
                    for j in 1..JOINT_COUNT {
                        kp[[t, j, 0]] = rx + rng.random_range(-0.4..0.4) + 0.1 * j as f64;
                        kp[[t, j, 1]] = ry + rng.random_range(-0.4..0.4) - 0.05 * j as f64;
                    }
                }
                kp
            })
            .collect()
    }

    #[test]
    fn corpus_mean_zero_std_one_after_standardization() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let corpus = random_corpus(&mut rng, 6, 80);
        let stats = CorpusStats2d::compute(corpus.iter()).unwrap();
        let mut sum = vec![[0.0f64; 2]; JOINT_COUNT];
        let mut sum_sq = vec![[0.0f64; 2]; JOINT_COUNT];
        let mut n = 0usize;
        for kp in &corpus {
            let conf = Array2::from_elem((kp.dim().0, JOINT_COUNT), 1.0);
            let pre = preprocess_2d(kp, &conf, &stats).unwrap();
            for t in 0..pre.frames() {
                for j in 0..JOINT_COUNT {
                    for k in 0..2 {
                        sum[j][k] += pre.keypoints[[t, j, k]];
                        sum_sq[j][k] += pre.keypoints[[t, j, k]].powi(2);
                    }
                }
            }
            n += pre.frames();
        }
        for j in 1..JOINT_COUNT {
            for k in 0..2 {
                let mean = sum[j][k] / n as f64;
                let std = (sum_sq[j][k] / n as f64 - mean * mean).sqrt();
                assert!(mean.abs() < 0.05, "joint {j} mean {mean}");
                assert!((std - 1.0).abs() < 0.05, "joint {j} std {std}");
            }
        }
    }

    #[test]
    fn keypoints_at_corpus_mean_standardize_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let corpus = random_corpus(&mut rng, 4, 50);
        let stats = CorpusStats2d::compute(corpus.iter()).unwrap();
        // build a clip whose root-relative coordinates equal the corpus mean
        let t_len = 5;
        let mut kp = Array3::zeros((t_len, JOINT_COUNT, 2));
        for t in 0..t_len {
            for j in 0..JOINT_COUNT {
                for k in 0..2 {
                    kp[[t, j, k]] = stats.mean[j][k] + 0.3; // constant root offset
                }
            }
        }
        let conf = Array2::from_elem((t_len, JOINT_COUNT), 1.0);
        let pre = preprocess_2d(&kp, &conf, &stats).unwrap();
        for t in 0..t_len {
            for j in 1..JOINT_COUNT {
                for k in 0..2 {
                    assert_abs_diff_eq!(pre.keypoints[[t, j, k]], 0.0, epsilon = 1e-9);
                }
            }
        }
        // static clip: zero root velocity everywhere
        assert!(pre.root_velocity_2d.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn preprocess_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let corpus = random_corpus(&mut rng, 4, 60);
        let stats = CorpusStats2d::compute(corpus.iter()).unwrap();
        let clip = &corpus[0];
        let conf = Array2::from_elem((clip.dim().0, JOINT_COUNT), 1.0);
        let pre = preprocess_2d(clip, &conf, &stats).unwrap();
        let back = inverse_preprocess(&pre);
        for (a, b) in back.iter().zip(clip.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_std_joint_is_a_stats_error() {
        // all clips identical in one non-root joint's relative coordinates
        let mut kp = Array3::zeros((40, JOINT_COUNT, 2));
        for t in 0..40 {
            for j in 0..JOINT_COUNT {
                kp[[t, j, 0]] = j as f64; // constant per joint -> zero std
                kp[[t, j, 1]] = t as f64 * 0.01 * (j as f64 + 1.0);
            }
        }
        assert!(matches!(
            CorpusStats2d::compute(std::iter::once(&kp)),
            Err(Error::Stats(_))
        ));
    }

    #[test]
    fn input_stack_layout() {
        let t_len = 3;
        let kp = Array3::from_elem((t_len, JOINT_COUNT, 2), 0.5);
        let conf = Array2::from_elem((t_len, JOINT_COUNT), 0.9);
        let vel = Array2::from_elem((t_len, 2), 0.1);
        let x = stack_input_channels(&kp, &conf, &vel);
        assert_eq!(x.dim(), (INPUT_CHANNELS, t_len));
        assert_eq!(x[[0, 0]], 0.5);
        assert_eq!(x[[2 * JOINT_COUNT, 0]], 0.9);
        assert_eq!(x[[3 * JOINT_COUNT + 1, 2]], 0.1);
    }
}
