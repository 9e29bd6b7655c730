//! Evaluation metrics: position errors (plain and Procrustes-aligned), bone
//! lengths, contact-masked foot errors, contact-label accuracy, and
//! rotational-velocity histograms.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::motion::FOOT_JOINTS;
use crate::rotation::{Representation, RotationSeq};
use crate::skeleton::Skeleton;
use crate::topology::{BONE_COUNT, JOINT_COUNT, TOPOLOGY};

fn check_pose_pair(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<(usize, usize)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "pose sequences differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (t, j, c) = pred.dim();
    if c != 3 || t == 0 {
        return Err(Error::Shape(format!("expected (T, J, 3) with T > 0, got {:?}", pred.dim())));
    }
    Ok((t, j))
}

/// Mean per-joint position error: both sequences are root-aligned per frame,
/// then the Euclidean joint errors are averaged over joints and frames.
pub fn mpjpe(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    let (t_len, j_len) = check_pose_pair(pred, gt)?;
    let mut total = 0.0;
    for t in 0..t_len {
        for j in 0..j_len {
            let mut d2 = 0.0;
            for k in 0..3 {
                let p = pred[[t, j, k]] - pred[[t, 0, k]];
                let g = gt[[t, j, k]] - gt[[t, 0, k]];
                d2 += (p - g) * (p - g);
            }
            total += d2.sqrt();
        }
    }
    Ok(total / (t_len * j_len) as f64)
}

/// Mean per-joint error in absolute camera space (no root alignment).
pub fn mpjpe_absolute(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    let (t_len, j_len) = check_pose_pair(pred, gt)?;
    let mut total = 0.0;
    for t in 0..t_len {
        for j in 0..j_len {
            let mut d2 = 0.0;
            for k in 0..3 {
                let d = pred[[t, j, k]] - gt[[t, j, k]];
                d2 += d * d;
            }
            total += d2.sqrt();
        }
    }
    Ok(total / (t_len * j_len) as f64)
}

/// Optimal per-frame similarity alignment (scale, rotation, translation in
/// the least-squares sense) of `pred` onto `gt`.
fn similarity_align_frame(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Vec<[f64; 3]> {
    use nalgebra::{Matrix3, Vector3};
    let n = pred.len() as f64;
    let mut mu_p = Vector3::zeros();
    let mut mu_g = Vector3::zeros();
    for (p, g) in pred.iter().zip(gt.iter()) {
        mu_p += Vector3::new(p[0], p[1], p[2]);
        mu_g += Vector3::new(g[0], g[1], g[2]);
    }
    mu_p /= n;
    mu_g /= n;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let pc = Vector3::new(p[0], p[1], p[2]) - mu_p;
        let gc = Vector3::new(g[0], g[1], g[2]) - mu_g;
        cov += gc * pc.transpose();
        var_p += pc.norm_squared();
    }
    cov /= n;
    var_p /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if var_p > 1e-12 {
        (svd.singular_values[0] * s[(0, 0)]
            + svd.singular_values[1] * s[(1, 1)]
            + svd.singular_values[2] * s[(2, 2)])
            / var_p
    } else {
        1.0
    };
    let t = mu_g - r * mu_p * scale;
    pred.iter()
        .map(|p| {
            let a = r * Vector3::new(p[0], p[1], p[2]) * scale + t;
            [a[0], a[1], a[2]]
        })
        .collect()
}

/// MPJPE after an optimal per-frame similarity (Procrustes) alignment.
pub fn p_mpjpe(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    let (t_len, j_len) = check_pose_pair(pred, gt)?;
    let mut total = 0.0;
    for t in 0..t_len {
        let p: Vec<[f64; 3]> =
            (0..j_len).map(|j| [pred[[t, j, 0]], pred[[t, j, 1]], pred[[t, j, 2]]]).collect();
        let g: Vec<[f64; 3]> =
            (0..j_len).map(|j| [gt[[t, j, 0]], gt[[t, j, 1]], gt[[t, j, 2]]]).collect();
        let aligned = similarity_align_frame(&p, &g);
        for (a, g) in aligned.iter().zip(g.iter()) {
            let d2 = (a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2) + (a[2] - g[2]).powi(2);
            total += d2.sqrt();
        }
    }
    Ok(total / (t_len * j_len) as f64)
}

#[derive(Debug, Clone)]
pub struct BoneLengthReport {
    /// Absolute per-bone error, indexed by child joint minus one.
    pub per_bone: [f64; BONE_COUNT],
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

/// Compares a predicted skeleton (normalized units, de-normalized here by
/// `scale_factor`) against ground-truth bone lengths measured as per-frame
/// joint distances averaged over the clip.
pub fn bone_length_error(
    pred_skeleton: &Skeleton,
    gt_positions: &Array3<f64>,
    scale_factor: f64,
) -> Result<BoneLengthReport> {
    let (t_len, j_len, _) = gt_positions.dim();
    if j_len != JOINT_COUNT {
        return Err(Error::Shape(format!("positions cover {j_len} joints")));
    }
    if t_len == 0 {
        return Err(Error::InsufficientFrames { need: 1, got: 0 });
    }
    let mut per_bone = [0.0; BONE_COUNT];
    for j in 1..JOINT_COUNT {
        let p = TOPOLOGY.parent[j].unwrap();
        let mut mean_len = 0.0;
        for t in 0..t_len {
            let mut d2 = 0.0;
            for k in 0..3 {
                let d = gt_positions[[t, j, k]] - gt_positions[[t, p, k]];
                d2 += d * d;
            }
            mean_len += d2.sqrt();
        }
        mean_len /= t_len as f64;
        let predicted = pred_skeleton.bone_length(j) * scale_factor;
        per_bone[j - 1] = (predicted - mean_len).abs();
    }
    let mean = per_bone.iter().sum::<f64>() / BONE_COUNT as f64;
    let max = per_bone.iter().copied().fold(f64::MIN, f64::max);
    let min = per_bone.iter().copied().fold(f64::MAX, f64::min);
    Ok(BoneLengthReport { per_bone, mean, max, min })
}

/// Mean Euclidean foot error over frames where the ground truth marks a
/// contact, root-aligned like the position metrics. Returns 0 when no frame
/// is in contact.
pub fn foot_contact_error(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    gt_contacts: &Array2<u8>,
) -> Result<f64> {
    let (t_len, _) = check_pose_pair(pred, gt)?;
    if gt_contacts.dim() != (t_len, 2) {
        return Err(Error::Shape(format!(
            "contacts are {:?}, expected ({t_len}, 2)",
            gt_contacts.dim()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..t_len {
        for (fi, &fj) in FOOT_JOINTS.iter().enumerate() {
            if gt_contacts[[t, fi]] == 0 {
                continue;
            }
            let mut d2 = 0.0;
            for k in 0..3 {
                let p = pred[[t, fj, k]] - pred[[t, 0, k]];
                let g = gt[[t, fj, k]] - gt[[t, 0, k]];
                d2 += (p - g) * (p - g);
            }
            total += d2.sqrt();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootScores {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

/// Thresholds contact probabilities at 0.5 and reduces the confusion matrix
/// per foot. Empty denominators count as perfect (1.0).
pub fn contact_label_accuracy(
    pred_logits: &Array2<f64>,
    gt_contacts: &Array2<u8>,
) -> Result<[FootScores; 2]> {
    if pred_logits.dim() != gt_contacts.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs contacts {:?}",
            pred_logits.dim(),
            gt_contacts.dim()
        )));
    }
    let t_len = pred_logits.dim().0;
    let mut out = [FootScores { precision: 1.0, recall: 1.0, accuracy: 1.0 }; 2];
    for f in 0..2 {
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for t in 0..t_len {
            let prob = 1.0 / (1.0 + (-pred_logits[[t, f]]).exp());
            let pred = prob > 0.5;
            let actual = gt_contacts[[t, f]] == 1;
            match (pred, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        out[f] = FootScores {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            accuracy: ratio(tp + tn, t_len),
        };
    }
    Ok(out)
}

// --- rotational-velocity histograms -------------------------------------------------

#[derive(Debug, Clone)]
pub struct Histogram {
    pub counts: Vec<f64>,
    pub bin_width: f64,
}

impl Histogram {
    fn new(bins: usize, max_value: f64) -> Self {
        Self { counts: vec![0.0; bins], bin_width: max_value / bins as f64 }
    }

    fn add(&mut self, value: f64) {
        let idx = ((value / self.bin_width) as usize).min(self.counts.len() - 1);
        self.counts[idx] += 1.0;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Wasserstein-1 distance between two histograms over the same binning,
/// treating each as a normalized distribution over bin centers.
pub fn wasserstein1(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.counts.len() != b.counts.len() || (a.bin_width - b.bin_width).abs() > 1e-12 {
        return Err(Error::Shape("histograms use different binnings".into()));
    }
    let (ta, tb) = (a.total(), b.total());
    if ta == 0.0 || tb == 0.0 {
        return Err(Error::Shape("empty histogram".into()));
    }
    let mut cdf_a = 0.0;
    let mut cdf_b = 0.0;
    let mut dist = 0.0;
    for i in 0..a.counts.len() {
        cdf_a += a.counts[i] / ta;
        cdf_b += b.counts[i] / tb;
        dist += (cdf_a - cdf_b).abs() * a.bin_width;
    }
    Ok(dist)
}

#[derive(Debug, Clone)]
pub struct VelocityHistograms {
    /// Per joint, per Euler axis: histogram of |angle difference| per frame.
    pub per_axis: Vec<[Histogram; 3]>,
    /// Per joint: histogram of the Euclidean norm of the 3-axis velocity.
    pub magnitude: Vec<Histogram>,
    pub bins: usize,
    pub max_velocity: f64,
}

/// Shortest-arc wrap into (-pi, pi].
fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a % two_pi;
    if x > std::f64::consts::PI {
        x -= two_pi;
    } else if x <= -std::f64::consts::PI {
        x += two_pi;
    }
    x
}

/// Histograms of per-joint rotational-velocity magnitudes in Euler-angle
/// representation: temporal differences with shortest-arc unwrapping, binned
/// per axis and as per-joint magnitudes over `[0, max_velocity]` radians per
/// frame (overflow lands in the last bin so mass is conserved).
pub fn velocity_histogram(
    rotations: &RotationSeq,
    bins: usize,
    max_velocity: f64,
) -> Result<VelocityHistograms> {
    let t_len = rotations.frames();
    if t_len < 2 {
        return Err(Error::InsufficientFrames { need: 2, got: t_len });
    }
    if bins == 0 || max_velocity <= 0.0 {
        return Err(Error::Config("histogram needs bins > 0 and a positive range".into()));
    }
    let euler = rotations.convert(Representation::Euler)?;
    let mut per_axis: Vec<[Histogram; 3]> = (0..JOINT_COUNT)
        .map(|_| {
            [
                Histogram::new(bins, max_velocity),
                Histogram::new(bins, max_velocity),
                Histogram::new(bins, max_velocity),
            ]
        })
        .collect();
    let mut magnitude: Vec<Histogram> =
        (0..JOINT_COUNT).map(|_| Histogram::new(bins, max_velocity)).collect();
    for t in 0..t_len - 1 {
        for j in 0..JOINT_COUNT {
            let mut mag2 = 0.0;
            for axis in 0..3 {
                let d = wrap_angle(euler.values[[t + 1, j, axis]] - euler.values[[t, j, axis]]);
                per_axis[j][axis].add(d.abs());
                mag2 += d * d;
            }
            magnitude[j].add(mag2.sqrt());
        }
    }
    Ok(VelocityHistograms { per_axis, magnitude, bins, max_velocity })
}

impl VelocityHistograms {
    /// Plot-ready CSV: one row per (joint, axis, bin) plus magnitude rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("joint,axis,bin_center,count\n");
        use std::fmt::Write;
        for (j, axes) in self.per_axis.iter().enumerate() {
            for (axis, hist) in axes.iter().enumerate() {
                for (i, c) in hist.counts.iter().enumerate() {
                    let center = (i as f64 + 0.5) * hist.bin_width;
                    let _ = writeln!(
                        out,
                        "{},{},{:.9},{}",
                        TOPOLOGY.joint_names[j],
                        ["x", "y", "z"][axis],
                        center,
                        c
                    );
                }
            }
            let hist = &self.magnitude[j];
            for (i, c) in hist.counts.iter().enumerate() {
                let center = (i as f64 + 0.5) * hist.bin_width;
                let _ = writeln!(
                    out,
                    "{},magnitude,{:.9},{}",
                    TOPOLOGY.joint_names[j],
                    center,
                    c
                );
            }
        }
        out
    }
}

// --- per-clip reports -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub frames: usize,
    pub mpjpe: f64,
    pub mpjpe_absolute: f64,
    pub p_mpjpe: f64,
    pub foot_contact_error: f64,
    pub bone_length_mean_error: f64,
    pub contact_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_clip: Vec<ClipMetrics>,
    pub aggregate: ClipMetrics,
}

impl MetricReport {
    /// Frame-weighted aggregation over clips.
    pub fn from_clips(per_clip: Vec<ClipMetrics>) -> Result<Self> {
        if per_clip.is_empty() {
            return Err(Error::Shape("no clips to aggregate".into()));
        }
        let total_frames: usize = per_clip.iter().map(|c| c.frames).sum();
        let weight = |f: &dyn Fn(&ClipMetrics) -> f64| -> f64 {
            per_clip.iter().map(|c| f(c) * c.frames as f64).sum::<f64>() / total_frames as f64
        };
        let aggregate = ClipMetrics {
            clip_id: "aggregate".into(),
            frames: total_frames,
            mpjpe: weight(&|c| c.mpjpe),
            mpjpe_absolute: weight(&|c| c.mpjpe_absolute),
            p_mpjpe: weight(&|c| c.p_mpjpe),
            foot_contact_error: weight(&|c| c.foot_contact_error),
            bone_length_mean_error: weight(&|c| c.bone_length_mean_error),
            contact_accuracy: weight(&|c| c.contact_accuracy),
        };
        Ok(Self { per_clip, aggregate })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "clip,frames,mpjpe,mpjpe_absolute,p_mpjpe,foot_contact_error,\
             bone_length_mean_error,contact_accuracy\n",
        );
        use std::fmt::Write;
        for c in self.per_clip.iter().chain(std::iter::once(&self.aggregate)) {
            let _ = writeln!(
                out,
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                c.clip_id,
                c.frames,
                c.mpjpe,
                c.mpjpe_absolute,
                c.p_mpjpe,
                c.foot_contact_error,
                c.bone_length_mean_error,
                c.contact_accuracy
            );
        }
        out
    }
}
