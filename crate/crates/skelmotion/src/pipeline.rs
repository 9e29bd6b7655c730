//! End-to-end inference and evaluation pipelines shared by the CLI and the
//! test suites.


use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use revad::Tape;

use crate::camera::{backproject_root, place_in_camera, project_points, sample_camera};
use crate::dataset::{PreparedClip, PreparedDataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    bone_length_error, contact_label_accuracy, foot_contact_error, mpjpe, mpjpe_absolute, p_mpjpe,
    ClipMetrics, MetricReport,
};
use crate::network::{
    eq_forward, es_forward, fk_from_rotations_graph, ForwardMode, ModelGraph,
};
use crate::preprocess::{preprocess_2d, stack_input_channels, CorpusStats2d, INPUT_CHANNELS};
use crate::rotation::{quat_normalize, Representation, RotationSeq};
use crate::skeleton::Skeleton;
use crate::topology::{joint, GROUP_COUNT, JOINT_COUNT};

/// Full reconstruction of one clip from 2D inputs.
pub struct Reconstruction {
    /// Normalized-unit skeleton from the static branch.
    pub skeleton: Skeleton,
    /// Per-frame rotations in the checkpoint's representation.
    pub rotations: RotationSeq,
    /// Global root trajectory from the predicted depth.
    pub root: Array2<f64>,
    /// Contact probabilities per foot.
    pub contact_probs: Array2<f64>,
    /// Root-local FK positions.
    pub local_positions: Array3<f64>,
}

/// Runs the model on raw camera-plane keypoints plus confidences.
pub fn reconstruct(
    graph: &mut ModelGraph,
    stats: &CorpusStats2d,
    keypoints: &Array3<f64>,
    confidence: &Array2<f64>,
    gt_lengths: Option<&[f64; GROUP_COUNT]>,
) -> Result<Reconstruction> {
    let (t_len, j_len, _) = keypoints.dim();
    if j_len != JOINT_COUNT {
        return Err(Error::Shape(format!("keypoints cover {j_len} joints")));
    }
    let repr = graph.config.representation;
    let pre = preprocess_2d(keypoints, confidence, stats)?;
    // zero-confidence joints read as (0, 0), mirroring the training inputs
    let mut std_kp = pre.keypoints.clone();
    for t in 0..t_len {
        for j in 0..JOINT_COUNT {
            if confidence[[t, j]] == 0.0 {
                std_kp[[t, j, 0]] = 0.0;
                std_kp[[t, j, 1]] = 0.0;
            }
        }
    }
    let stacked = stack_input_channels(&std_kp, &pre.confidence, &pre.root_velocity_2d);
    let mut input = ArrayD::zeros(IxDyn(&[1, INPUT_CHANNELS, t_len]));
    for c in 0..INPUT_CHANNELS {
        for t in 0..t_len {
            input[[0, c, t]] = stacked[[c, t]];
        }
    }

    let mut tape = Tape::new();
    let x = tape.constant(input);
    let out = eq_forward(graph, &mut tape, x, &mut ForwardMode::Eval)?;
    let lengths_var = match gt_lengths {
        Some(lens) => {
            let arr = ArrayD::from_shape_vec(IxDyn(&[1, GROUP_COUNT]), lens.to_vec()).unwrap();
            tape.constant(arr)
        }
        None => es_forward(graph, &mut tape, x, &mut ForwardMode::Eval)?,
    };
    let fk = fk_from_rotations_graph(&mut tape, lengths_var, out.rotations, repr)?;

    let lengths_val = tape.value(lengths_var);
    let mut lengths = [0.0; GROUP_COUNT];
    for g in 0..GROUP_COUNT {
        lengths[g] = lengths_val[[0, g]];
    }
    let skeleton = Skeleton::new(lengths)?;

    let rot_val = tape.value(out.rotations);
    let q = repr.width();
    let mut rot_values = Array3::zeros((t_len, JOINT_COUNT, q));
    for t in 0..t_len {
        for j in 0..JOINT_COUNT {
            if repr == Representation::Quaternion {
                let raw = [
                    rot_val[[0, t, j, 0]],
                    rot_val[[0, t, j, 1]],
                    rot_val[[0, t, j, 2]],
                    rot_val[[0, t, j, 3]],
                ];
                let unit = quat_normalize(&raw)?;
                for (k, &v) in unit.iter().enumerate() {
                    rot_values[[t, j, k]] = v;
                }
            } else {
                for k in 0..q {
                    rot_values[[t, j, k]] = rot_val[[0, t, j, k]];
                }
            }
        }
    }
    let rotations = RotationSeq::new(repr, rot_values)?;

    // global root from the predicted depth and the raw 2D root trajectory
    let depth_val = tape.value(out.depth);
    let depth: Vec<f64> = (0..t_len).map(|t| depth_val[[0, t]].max(1e-3)).collect();
    let mut root_2d = Array2::zeros((t_len, 2));
    for t in 0..t_len {
        root_2d[[t, 0]] = keypoints[[t, joint::PELVIS, 0]];
        root_2d[[t, 1]] = keypoints[[t, joint::PELVIS, 1]];
    }
    let root = backproject_root(&root_2d, &depth, 1.0)?;

    let logits = tape.value(out.contact_logits);
    let mut contact_probs = Array2::zeros((t_len, 2));
    for t in 0..t_len {
        for f in 0..2 {
            contact_probs[[t, f]] = 1.0 / (1.0 + (-logits[[0, t, f]]).exp());
        }
    }

    let fk_val = tape.value(fk);
    let local_positions =
        Array3::from_shape_fn((t_len, JOINT_COUNT, 3), |(t, j, k)| fk_val[[0, t, j, k]]);

    Ok(Reconstruction { skeleton, rotations, root, contact_probs, local_positions })
}

/// Options for dataset evaluation.
pub struct EvalOptions {
    pub seed: u64,
    /// Use each clip's ground-truth skeleton in FK instead of the static
    /// branch (the gt-skeleton protocol).
    pub gt_skeleton: bool,
    /// Evaluate full clips in windows of this length.
    pub window: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { seed: 1, gt_skeleton: false, window: 120 }
    }
}

/// Projects each prepared clip through a seeded camera, reconstructs it, and
/// reports every metric per clip plus the frame-weighted aggregate.
pub fn evaluate_dataset(
    graph: &mut ModelGraph,
    stats: &CorpusStats2d,
    dataset: &PreparedDataset,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for clip in &dataset.clips {
        rows.push(evaluate_clip(graph, stats, clip, opts, &mut rng)?);
    }
    MetricReport::from_clips(rows)
}

fn evaluate_clip(
    graph: &mut ModelGraph,
    stats: &CorpusStats2d,
    clip: &PreparedClip,
    opts: &EvalOptions,
    rng: &mut ChaCha8Rng,
) -> Result<ClipMetrics> {
    let total = clip.seq.frames();
    let window = opts.window.min(total);
    let t_len = window.max(crate::network::EQ_MIN_FRAMES);
    if total < t_len {
        return Err(Error::Length(format!(
            "clip '{}' has {total} frames, need {t_len}",
            clip.seq.source_id
        )));
    }
    // deterministic camera per clip; resample if the pose clips the plane
    let mut placed;
    let keypoints;
    let mut guard = 0;
    let start = 0usize;
    let mut windowed = Array3::zeros((t_len, JOINT_COUNT, 3));
    for t in 0..t_len {
        for j in 0..JOINT_COUNT {
            for k in 0..3 {
                windowed[[t, j, k]] = clip.seq.positions[[start + t, j, k]];
            }
        }
    }
    loop {
        let cam = sample_camera(rng);
        placed = place_in_camera(&windowed, &cam);
        match project_points(&placed, cam.focal) {
            Ok(kp) => {
                keypoints = kp;
                break;
            }
            Err(Error::BehindCamera(_)) if guard < 64 => guard += 1,
            Err(e) => return Err(e),
        }
    }

    let confidence = Array2::from_elem((t_len, JOINT_COUNT), 1.0);
    let gt_lengths = opts.gt_skeleton.then(|| clip.seq.skeleton.lengths);
    let recon = reconstruct(graph, stats, &keypoints, &confidence, gt_lengths.as_ref())?;

    // ground truth in camera space
    let mut gt_local = Array3::zeros((t_len, JOINT_COUNT, 3));
    for t in 0..t_len {
        for j in 0..JOINT_COUNT {
            for k in 0..3 {
                gt_local[[t, j, k]] = placed[[t, j, k]] - placed[[t, 0, k]];
            }
        }
    }
    let mut pred_global = recon.local_positions.clone();
    for t in 0..t_len {
        for j in 0..JOINT_COUNT {
            for k in 0..3 {
                pred_global[[t, j, k]] += recon.root[[t, k]];
            }
        }
    }
    let mut gt_contacts = Array2::zeros((t_len, 2));
    for t in 0..t_len {
        for f in 0..2 {
            gt_contacts[[t, f]] = clip.seq.contacts[[start + t, f]];
        }
    }
    let mut logits = Array2::zeros((t_len, 2));
    for t in 0..t_len {
        for f in 0..2 {
            let p: f64 = recon.contact_probs[[t, f]].clamp(1e-9, 1.0 - 1e-9);
            logits[[t, f]] = (p / (1.0 - p)).ln();
        }
    }
    let bone_report = bone_length_error(&recon.skeleton, &gt_local, 1.0)?;
    let accuracy = contact_label_accuracy(&logits, &gt_contacts)?;

    Ok(ClipMetrics {
        clip_id: clip.seq.source_id.clone(),
        frames: t_len,
        mpjpe: mpjpe(&recon.local_positions, &gt_local)?,
        mpjpe_absolute: mpjpe_absolute(&pred_global, &placed)?,
        p_mpjpe: p_mpjpe(&recon.local_positions, &gt_local)?,
        foot_contact_error: foot_contact_error(&recon.local_positions, &gt_local, &gt_contacts)?,
        bone_length_mean_error: bone_report.mean,
        contact_accuracy: (accuracy[0].accuracy + accuracy[1].accuracy) / 2.0,
    })
}
