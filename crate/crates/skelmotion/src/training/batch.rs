//! Batch assembly: windows, augmentation, projection, preprocessing and
//! confidence simulation, producing encoder inputs plus every target the
//! loss terms need.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{place_in_camera, project_points, sample_camera, CameraParams};
use crate::dataset::PreparedDataset;
use crate::error::{Error, Result};
use crate::motion::flip_sequence;
use crate::preprocess::{preprocess_2d, stack_input_channels, INPUT_CHANNELS};
use crate::rotation::Representation;
use crate::topology::{GROUP_COUNT, JOINT_COUNT};
use crate::wild::{perturb_keypoints, sample_confidence, ConfidenceModel};

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub clip_len_min: usize,
    pub clip_len_max: usize,
    pub camera_aug: bool,
    pub flip_aug: bool,
    pub confidence_sim: bool,
    pub confidence: ConfidenceModel,
    pub representation: Representation,
}

/// One training batch: inputs `(B, 53, T)` plus targets, and real rotation
/// temporal differences `(B, T-1, 17, Q)` for the discriminators when any
/// clip carries rotations.
pub struct TrainingBatch {
    pub input: ArrayD<f64>,
    pub gt_local: ArrayD<f64>,
    pub gt_depth: ArrayD<f64>,
    pub gt_contacts: ArrayD<f64>,
    pub gt_lengths: ArrayD<f64>,
    pub real_deltas: Option<ArrayD<f64>>,
    pub clip_ids: Vec<String>,
}

fn window_positions(positions: &Array3<f64>, start: usize, len: usize) -> Array3<f64> {
    let mut out = Array3::zeros((len, JOINT_COUNT, 3));
    for t in 0..len {
        for j in 0..JOINT_COUNT {
            for k in 0..3 {
                out[[t, j, k]] = positions[[start + t, j, k]];
            }
        }
    }
    out
}

/// Assembles one batch. The length T is drawn once per call and shared by
/// every clip in the batch.
pub fn assemble_batch(
    dataset: &PreparedDataset,
    opts: &BatchOptions,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    let t_len = rng.random_range(opts.clip_len_min..=opts.clip_len_max);
    let eligible: Vec<usize> = dataset
        .clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.seq.frames() >= t_len)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Length(format!(
            "no clip is long enough for a window of {t_len} frames"
        )));
    }
    let b = opts.batch_size;
    let mut input = ArrayD::zeros(IxDyn(&[b, INPUT_CHANNELS, t_len]));
    let mut gt_local = ArrayD::zeros(IxDyn(&[b, t_len, JOINT_COUNT, 3]));
    let mut gt_depth = ArrayD::zeros(IxDyn(&[b, t_len]));
    let mut gt_contacts = ArrayD::zeros(IxDyn(&[b, t_len, 2]));
    let mut gt_lengths = ArrayD::zeros(IxDyn(&[b, GROUP_COUNT]));
    let mut clip_ids = Vec::with_capacity(b);

    for bi in 0..b {
        let clip_idx = eligible[rng.random_range(0..eligible.len())];
        let clip = &dataset.clips[clip_idx];
        let max_start = clip.seq.frames() - t_len;
        let start = if max_start == 0 { 0 } else { rng.random_range(0..=max_start) };
        clip_ids.push(format!("{}@{start}", clip.seq.source_id));

        // window out positions and contacts, optionally flipped
        let mut window = crate::motion::MotionSequence {
            positions: window_positions(&clip.seq.positions, start, t_len),
            rotations: None,
            root: {
                let mut r = Array2::zeros((t_len, 3));
                for t in 0..t_len {
                    for k in 0..3 {
                        r[[t, k]] = clip.seq.root[[start + t, k]];
                    }
                }
                r
            },
            contacts: {
                let mut c = Array2::zeros((t_len, 2));
                for t in 0..t_len {
                    for f in 0..2 {
                        c[[t, f]] = clip.seq.contacts[[start + t, f]];
                    }
                }
                c
            },
            skeleton: clip.seq.skeleton.clone(),
            source_id: clip.seq.source_id.clone(),
            units_per_mm: clip.seq.units_per_mm,
            fps: clip.seq.fps,
        };
        if opts.flip_aug && rng.random_range(0.0..1.0) < 0.5 {
            window = flip_sequence(&window)?;
        }

        // sampled cameras occasionally clip a long window behind the image
        // plane; redraw a few times before giving up
        let (placed, keypoints_raw) = {
            let mut attempt = 0;
            loop {
                let cam = if opts.camera_aug {
                    sample_camera(rng)
                } else {
                    CameraParams::frontal(5.5)
                };
                let placed = place_in_camera(&window.positions, &cam);
                match project_points(&placed, cam.focal) {
                    Ok(kp) => break (placed, kp),
                    Err(Error::BehindCamera(_)) if opts.camera_aug && attempt < 32 => {
                        attempt += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        };

        for t in 0..t_len {
            gt_depth[[bi, t]] = placed[[t, 0, 2]];
            for f in 0..2 {
                gt_contacts[[bi, t, f]] = window.contacts[[t, f]] as f64;
            }
            for j in 0..JOINT_COUNT {
                for k in 0..3 {
                    gt_local[[bi, t, j, k]] = placed[[t, j, k]] - placed[[t, 0, k]];
                }
            }
        }
        for g in 0..GROUP_COUNT {
            gt_lengths[[bi, g]] = window.skeleton.lengths[g];
        }

        let full_conf = Array2::from_elem((t_len, JOINT_COUNT), 1.0);
        let pre = preprocess_2d(&keypoints_raw, &full_conf, &dataset.stats)?;
        let (keypoints, confidence) = if opts.confidence_sim {
            let conf = sample_confidence(&opts.confidence, rng, t_len, JOINT_COUNT);
            let kp = perturb_keypoints(&pre.keypoints, &conf, opts.confidence.beta, rng);
            (kp, conf)
        } else {
            (pre.keypoints.clone(), full_conf)
        };
        let stacked = stack_input_channels(&keypoints, &confidence, &pre.root_velocity_2d);
        for c in 0..INPUT_CHANNELS {
            for t in 0..t_len {
                input[[bi, c, t]] = stacked[[c, t]];
            }
        }
    }

    let real_deltas = sample_real_deltas(dataset, opts, t_len, b, rng)?;
    Ok(TrainingBatch {
        input,
        gt_local,
        gt_depth,
        gt_contacts,
        gt_lengths,
        real_deltas,
        clip_ids,
    })
}

/// Temporal differences of ground-truth rotations, drawn only from clips
/// that carry captured rotations, in the active representation.
fn sample_real_deltas(
    dataset: &PreparedDataset,
    opts: &BatchOptions,
    t_len: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<ArrayD<f64>>> {
    let rotated: Vec<usize> = dataset
        .clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.seq.rotations.is_some() && c.seq.frames() >= t_len)
        .map(|(i, _)| i)
        .collect();
    if rotated.is_empty() {
        return Ok(None);
    }
    let q = opts.representation.width();
    let mut out = ArrayD::zeros(IxDyn(&[batch, t_len - 1, JOINT_COUNT, q]));
    for bi in 0..batch {
        let clip = &dataset.clips[rotated[rng.random_range(0..rotated.len())]];
        let rots = clip.seq.rotations.as_ref().unwrap();
        let max_start = clip.seq.frames() - t_len;
        let start = if max_start == 0 { 0 } else { rng.random_range(0..=max_start) };
        let converted = rots.convert(opts.representation)?;
        for t in 0..t_len - 1 {
            for j in 0..JOINT_COUNT {
                for k in 0..q {
                    out[[bi, t, j, k]] = converted.values[[start + t + 1, j, k]]
                        - converted.values[[start + t, j, k]];
                }
            }
        }
    }
    Ok(Some(out))
}
