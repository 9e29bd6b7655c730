//! The optimization loop: alternating generator and discriminator steps,
//! periodic reference-pose injections, a CSV metrics log, and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use revad::{Adam, ParamId, Tape, Var};
use serde::{Deserialize, Serialize};

use super::batch::{assemble_batch, BatchOptions};
use super::losses::{
    loss_contact, loss_contact_velocity, loss_position, loss_root_depth, loss_skeleton,
    loss_tpose_reference, lsgan_d_loss, lsgan_g_loss, ContactLossForm, LossWeights,
};
use crate::camera::{place_in_camera, project_points, CameraParams};
use crate::dataset::PreparedDataset;
use crate::error::{Error, Result};
use crate::evaluation::mpjpe;
use crate::network::{
    d_forward, eq_forward, es_forward, fk_from_rotations_graph, save_checkpoint, CheckpointExtras,
    EqOutput, ForwardMode, ModelGraph, NetworkConfig,
};
use crate::preprocess::{preprocess_2d, stack_input_channels, INPUT_CHANNELS};
use crate::rotation::Representation;
use crate::synth::tpose_clip;
use crate::topology::JOINT_COUNT;
use crate::wild::ConfidenceModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Default,
    /// Freeze the static branch; forward kinematics receives the
    /// ground-truth skeleton.
    GtSkeleton,
    /// Past-only convolutions for online reconstruction.
    Causal,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Variant::Default),
            "gt-skeleton" => Ok(Variant::GtSkeleton),
            "causal" => Ok(Variant::Causal),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub val_dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub iterations: u64,
    pub batch_size: usize,
    pub clip_len_min: usize,
    pub clip_len_max: usize,
    pub variant: Variant,
    pub representation: Representation,
    pub channel_width: usize,
    pub dropout_rate: f64,
    pub lrelu_slope: f64,
    pub disc_lrelu: bool,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub weights: LossWeights,
    pub contact_loss: ContactLossForm,
    pub confidence_sim: bool,
    pub camera_aug: bool,
    pub flip_aug: bool,
    /// A reference-pose step runs every this many iterations (0 disables).
    pub tpose_interval: u64,
    pub tpose_count: usize,
    pub tpose_frames: usize,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    /// Stop once the logged validation MPJPE drops below this (0 disables).
    pub early_stop_mpjpe: f64,
    pub val_windows: usize,
    pub val_window_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: PathBuf::from("dataset.skds"),
            val_dataset: None,
            out_dir: PathBuf::from("runs/default"),
            iterations: 2000,
            batch_size: 32,
            clip_len_min: 60,
            clip_len_max: 200,
            variant: Variant::Default,
            representation: Representation::Quaternion,
            channel_width: 2048,
            dropout_rate: 0.25,
            lrelu_slope: 0.2,
            disc_lrelu: false,
            lr_gen: 1e-4,
            lr_disc: 1e-4,
            weights: LossWeights::default(),
            contact_loss: ContactLossForm::Bce,
            confidence_sim: true,
            camera_aug: true,
            flip_aug: true,
            tpose_interval: 50,
            tpose_count: 4,
            tpose_frames: 60,
            log_interval: 50,
            checkpoint_interval: 500,
            early_stop_mpjpe: 0.0,
            val_windows: 4,
            val_window_len: 60,
        }
    }
}

impl TrainConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display(), e.to_string()))
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            causal: self.variant == Variant::Causal,
            representation: self.representation,
            channel_width: self.channel_width,
            dropout_rate: self.dropout_rate,
            lrelu_slope: self.lrelu_slope,
            disc_lrelu: self.disc_lrelu,
            ..NetworkConfig::default()
        }
    }

    fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            batch_size: self.batch_size,
            clip_len_min: self.clip_len_min,
            clip_len_max: self.clip_len_max,
            camera_aug: self.camera_aug,
            flip_aug: self.flip_aug,
            confidence_sim: self.confidence_sim,
            confidence: ConfidenceModel::default(),
            representation: self.representation,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_val_mpjpe: f64,
    pub iterations_run: u64,
}

struct ValWindow {
    clip: usize,
    start: usize,
    depth: f64,
}

/// Fixed validation windows drawn once so every log row measures the same
/// poses.
fn plan_validation(dataset: &PreparedDataset, cfg: &TrainConfig, seed: u64) -> Result<Vec<ValWindow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x56414c);
    let eligible: Vec<usize> = dataset
        .clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.seq.frames() >= cfg.val_window_len)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Length(format!(
            "no validation clip is {} frames long",
            cfg.val_window_len
        )));
    }
    Ok((0..cfg.val_windows)
        .map(|_| {
            let clip = eligible[rng.random_range(0..eligible.len())];
            let max_start = dataset.clips[clip].seq.frames() - cfg.val_window_len;
            let start = if max_start == 0 { 0 } else { rng.random_range(0..=max_start) };
            let depth = rng.random_range(4.0..7.0);
            ValWindow { clip, start, depth }
        })
        .collect())
}

/// Clean-input validation MPJPE (eval mode, frontal camera, no noise),
/// root-aligned in normalized units.
fn validation_mpjpe(
    graph: &mut ModelGraph,
    dataset: &PreparedDataset,
    stats_source: &PreparedDataset,
    plan: &[ValWindow],
    cfg: &TrainConfig,
) -> Result<f64> {
    let t_len = cfg.val_window_len;
    let mut total = 0.0;
    for w in plan {
        let clip = &dataset.clips[w.clip];
        let mut window = ndarray::Array3::zeros((t_len, JOINT_COUNT, 3));
        for t in 0..t_len {
            for j in 0..JOINT_COUNT {
                for k in 0..3 {
                    window[[t, j, k]] = clip.seq.positions[[w.start + t, j, k]];
                }
            }
        }
        let cam = CameraParams::frontal(w.depth);
        let placed = place_in_camera(&window, &cam);
        let keypoints = project_points(&placed, cam.focal)?;
        let conf = Array2::from_elem((t_len, JOINT_COUNT), 1.0);
        let pre = preprocess_2d(&keypoints, &conf, &stats_source.stats)?;
        let stacked = stack_input_channels(&pre.keypoints, &pre.confidence, &pre.root_velocity_2d);
        let mut input = ArrayD::zeros(IxDyn(&[1, INPUT_CHANNELS, t_len]));
        for c in 0..INPUT_CHANNELS {
            for t in 0..t_len {
                input[[0, c, t]] = stacked[[c, t]];
            }
        }

        let mut tape = Tape::new();
        let x = tape.constant(input);
        let out = eq_forward(graph, &mut tape, x, &mut ForwardMode::Eval)?;
        let lengths = if cfg.variant == Variant::GtSkeleton {
            let gt = ArrayD::from_shape_vec(
                IxDyn(&[1, crate::topology::GROUP_COUNT]),
                clip.seq.skeleton.lengths.to_vec(),
            )
            .unwrap();
            tape.constant(gt)
        } else {
            es_forward(graph, &mut tape, x, &mut ForwardMode::Eval)?
        };
        let pos = fk_from_rotations_graph(&mut tape, lengths, out.rotations, cfg.representation)?;
        let pos_val = tape.value(pos);
        let pred = ndarray::Array3::from_shape_fn((t_len, JOINT_COUNT, 3), |(t, j, k)| {
            pos_val[[0, t, j, k]]
        });
        let mut gt_local = ndarray::Array3::zeros((t_len, JOINT_COUNT, 3));
        for t in 0..t_len {
            for j in 0..JOINT_COUNT {
                for k in 0..3 {
                    gt_local[[t, j, k]] = placed[[t, j, k]] - placed[[t, 0, k]];
                }
            }
        }
        total += mpjpe(&pred, &gt_local)?;
    }
    Ok(total / plan.len() as f64)
}

struct LossBreakdown {
    position: f64,
    skeleton: f64,
    root: f64,
    contact: f64,
    contact_velocity: f64,
    adversarial_g: f64,
    total: f64,
}

/// Builds the generator tape for one batch and returns the total loss node,
/// its components, and the fake rotation differences for the discriminator
/// step.
#[allow(clippy::too_many_arguments)]
fn generator_losses(
    graph: &mut ModelGraph,
    tape: &mut Tape,
    input: Var,
    batch: &super::batch::TrainingBatch,
    cfg: &TrainConfig,
    mode: &mut ForwardMode,
) -> Result<(Var, LossBreakdown, Option<ArrayD<f64>>)> {
    let w = cfg.weights;
    let out: EqOutput = eq_forward(graph, tape, input, mode)?;
    let (lengths, l_s) = if cfg.variant == Variant::GtSkeleton {
        let gt = tape.constant(batch.gt_lengths.clone());
        (gt, tape.constant_scalar(0.0))
    } else {
        let lens = es_forward(graph, tape, input, mode)?;
        let l_s = loss_skeleton(tape, lens, &batch.gt_lengths);
        (lens, l_s)
    };
    let fk_pos = fk_from_rotations_graph(tape, lengths, out.rotations, cfg.representation)?;
    let l_p = loss_position(tape, fk_pos, &batch.gt_local, w.end_effector);
    let l_r = loss_root_depth(tape, out.depth, &batch.gt_depth);
    let l_f = loss_contact(tape, out.contact_logits, &batch.gt_contacts, cfg.contact_loss);
    let l_fc = loss_contact_velocity(tape, fk_pos, &batch.gt_contacts);

    let (l_adv, fake_deltas) = if w.adversarial > 0.0 && batch.real_deltas.is_some() {
        let shape = tape.value(out.rotations).shape().to_vec();
        let t_len = shape[1];
        let later = tape.narrow(out.rotations, 1, 1, t_len - 1);
        let earlier = tape.narrow(out.rotations, 1, 0, t_len - 1);
        let delta = tape.sub(later, earlier); // (B, T-1, 17, Q)
        let fake_value = tape.value(delta).clone();
        let q = cfg.representation.width();
        let mut g_total: Option<Var> = None;
        for j in 0..JOINT_COUNT {
            let dj = tape.narrow(delta, 2, j, 1);
            let dj = tape.reshape(dj, &[shape[0], t_len - 1, q]);
            let dj = tape.permute(dj, &[0, 2, 1]);
            let scores = d_forward(graph, tape, j, dj)?;
            let g = lsgan_g_loss(tape, scores);
            g_total = Some(match g_total {
                None => g,
                Some(acc) => tape.add(acc, g),
            });
        }
        (g_total.unwrap(), Some(fake_value))
    } else {
        (tape.constant_scalar(0.0), None)
    };

    let ws = tape.scale(l_s, w.skeleton);
    let wq = tape.scale(l_adv, w.adversarial);
    let wr = tape.scale(l_r, w.root);
    let wf = tape.scale(l_f, w.contact);
    let wfc = tape.scale(l_fc, w.contact_velocity);
    let mut total = tape.add(l_p, ws);
    total = tape.add(total, wq);
    total = tape.add(total, wr);
    total = tape.add(total, wf);
    total = tape.add(total, wfc);

    let breakdown = LossBreakdown {
        position: tape.scalar(l_p),
        skeleton: tape.scalar(l_s),
        root: tape.scalar(l_r),
        contact: tape.scalar(l_f),
        contact_velocity: tape.scalar(l_fc),
        adversarial_g: tape.scalar(l_adv),
        total: tape.scalar(total),
    };
    Ok((total, breakdown, fake_deltas))
}

/// Reference-pose step: static rest poses projected frontally must decode to
/// identity rotations.
fn tpose_step(
    graph: &mut ModelGraph,
    dataset: &PreparedDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    optimizer: &mut Adam,
    step_ids: &[ParamId],
) -> Result<f64> {
    let count = cfg.tpose_count.min(dataset.clips.len()).max(1);
    let t_len = cfg.tpose_frames;
    let mut input = ArrayD::zeros(IxDyn(&[count, INPUT_CHANNELS, t_len]));
    for (bi, clip_idx) in (0..count).map(|i| (i, i % dataset.clips.len())) {
        let clip = &dataset.clips[clip_idx];
        let pose = tpose_clip(&clip.seq.skeleton, t_len, "tpose")?;
        let depth = rng.random_range(4.0..7.0);
        let cam = CameraParams::frontal(depth);
        let placed = place_in_camera(&pose.positions, &cam);
        let keypoints = project_points(&placed, cam.focal)?;
        let conf = Array2::from_elem((t_len, JOINT_COUNT), 1.0);
        let pre = preprocess_2d(&keypoints, &conf, &dataset.stats)?;
        let stacked = stack_input_channels(&pre.keypoints, &pre.confidence, &pre.root_velocity_2d);
        for c in 0..INPUT_CHANNELS {
            for t in 0..t_len {
                input[[bi, c, t]] = stacked[[c, t]];
            }
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let mut mode = ForwardMode::Train(rng);
    let out = eq_forward(graph, &mut tape, x, &mut mode)?;
    let l = loss_tpose_reference(&mut tape, out.rotations, cfg.representation);
    let weighted = tape.scale(l, cfg.weights.tpose);
    let value = tape.scalar(weighted);
    graph.store.zero_grad_all();
    let grads = tape.backward(weighted);
    tape.accumulate_param_grads(&grads, &mut graph.store);
    optimizer.step(&mut graph.store, step_ids);
    Ok(value)
}

/// Trains from a config file whose `dataset` / `val_dataset` paths point at
/// prepared datasets.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let dataset = PreparedDataset::load(&cfg.dataset)?;
    let val = match &cfg.val_dataset {
        Some(p) => Some(PreparedDataset::load(p)?),
        None => None,
    };
    train_with_data(cfg, &dataset, val.as_ref())
}

/// Trains on in-memory datasets. Validation falls back to the training set
/// when no held-out set is given.
pub fn train_with_data(
    cfg: &TrainConfig,
    dataset: &PreparedDataset,
    val: Option<&PreparedDataset>,
) -> Result<TrainOutcome> {
    cfg.weights.validate()?;
    if cfg.batch_size == 0 || cfg.iterations == 0 {
        return Err(Error::Config("batch size and iterations must be positive".into()));
    }
    if cfg.clip_len_min < crate::network::EQ_MIN_FRAMES || cfg.clip_len_min > cfg.clip_len_max {
        return Err(Error::Config(format!(
            "clip length range [{}, {}] invalid",
            cfg.clip_len_min, cfg.clip_len_max
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let val_set = val.unwrap_or(dataset);

    let mut graph = ModelGraph::new(cfg.network_config(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let mut adam_gen = Adam::new(cfg.lr_gen);
    let mut adam_disc = Adam::new(cfg.lr_disc);
    let opts = cfg.batch_options();

    // gt-skeleton trains the dynamic branch only
    let gen_step_ids: Vec<ParamId> = match cfg.variant {
        Variant::GtSkeleton => {
            let es: std::collections::HashSet<usize> =
                graph.es_ids().iter().map(|id| id.0).collect();
            graph.generator_ids.iter().copied().filter(|id| !es.contains(&id.0)).collect()
        }
        _ => graph.generator_ids.clone(),
    };
    let eq_step_ids: Vec<ParamId> = {
        let es: std::collections::HashSet<usize> = graph.es_ids().iter().map(|id| id.0).collect();
        graph.generator_ids.iter().copied().filter(|id| !es.contains(&id.0)).collect()
    };
    let disc_ids = graph.discriminator_ids.clone();

    let val_plan = plan_validation(val_set, cfg, cfg.seed)?;
    let mut metrics = String::from(
        "iteration,loss_position,loss_skeleton,loss_root,loss_contact,loss_contact_velocity,\
         loss_adversarial_g,loss_discriminator,loss_tpose,loss_total,val_mpjpe\n",
    );
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let ckpt_path = cfg.out_dir.join("model.ckpt");

    let mut last_val = f64::NAN;
    let mut last_tpose = 0.0;
    let mut iterations_run = 0;
    for iter in 0..cfg.iterations {
        iterations_run = iter + 1;
        let batch = assemble_batch(dataset, &opts, &mut rng)?;

        // generator step
        let mut tape = Tape::new();
        let x = tape.constant(batch.input.clone());
        let (total, breakdown, fake_deltas) = {
            let mut mode = ForwardMode::Train(&mut rng);
            generator_losses(&mut graph, &mut tape, x, &batch, cfg, &mut mode)?
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "iteration {iter}: total {} (P {:.3e} S {:.3e} R {:.3e} F {:.3e} FC {:.3e} Q {:.3e}); batch [{}]",
                breakdown.total,
                breakdown.position,
                breakdown.skeleton,
                breakdown.root,
                breakdown.contact,
                breakdown.contact_velocity,
                breakdown.adversarial_g,
                batch.clip_ids.join(", ")
            )));
        }
        graph.store.zero_grad_all();
        let grads = tape.backward(total);
        tape.accumulate_param_grads(&grads, &mut graph.store);
        adam_gen.step(&mut graph.store, &gen_step_ids);
        drop(tape);

        // discriminator step on detached fakes
        let mut d_loss_value = 0.0;
        if cfg.weights.adversarial > 0.0 {
            if let (Some(real), Some(fake)) = (&batch.real_deltas, &fake_deltas) {
                let mut tape = Tape::new();
                let q = cfg.representation.width();
                let shape = fake.shape().to_vec();
                let real_v = tape.constant(real.clone());
                let fake_v = tape.constant(fake.clone());
                let mut d_total: Option<Var> = None;
                for j in 0..JOINT_COUNT {
                    let prep = |tape: &mut Tape, v: Var| -> Var {
                        let d = tape.narrow(v, 2, j, 1);
                        let d = tape.reshape(d, &[shape[0], shape[1], q]);
                        tape.permute(d, &[0, 2, 1])
                    };
                    let rj = prep(&mut tape, real_v);
                    let fj = prep(&mut tape, fake_v);
                    let real_scores = d_forward(&graph, &mut tape, j, rj)?;
                    let fake_scores = d_forward(&graph, &mut tape, j, fj)?;
                    let dl = lsgan_d_loss(&mut tape, real_scores, fake_scores);
                    d_total = Some(match d_total {
                        None => dl,
                        Some(acc) => tape.add(acc, dl),
                    });
                }
                let d_total = d_total.unwrap();
                d_loss_value = tape.scalar(d_total);
                if !d_loss_value.is_finite() {
                    return Err(Error::NonFiniteLoss(format!(
                        "iteration {iter}: discriminator loss {d_loss_value}"
                    )));
                }
                graph.store.zero_grad_all();
                let grads = tape.backward(d_total);
                tape.accumulate_param_grads(&grads, &mut graph.store);
                adam_disc.step(&mut graph.store, &disc_ids);
            }
        }

        // periodic reference poses
        if cfg.tpose_interval > 0
            && cfg.weights.tpose > 0.0
            && (iter + 1) % cfg.tpose_interval == 0
        {
            last_tpose = tpose_step(&mut graph, dataset, cfg, &mut rng, &mut adam_gen, &eq_step_ids)?;
        }

        // logging and early stopping
        if (iter + 1) % cfg.log_interval == 0 || iter + 1 == cfg.iterations {
            last_val = validation_mpjpe(&mut graph, val_set, dataset, &val_plan, cfg)?;
            let _ = writeln!(
                metrics,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                iter + 1,
                breakdown.position,
                breakdown.skeleton,
                breakdown.root,
                breakdown.contact,
                breakdown.contact_velocity,
                breakdown.adversarial_g,
                d_loss_value,
                last_tpose,
                breakdown.total,
                last_val
            );
            if cfg.early_stop_mpjpe > 0.0 && last_val < cfg.early_stop_mpjpe {
                break;
            }
        }

        if cfg.checkpoint_interval > 0 && (iter + 1) % cfg.checkpoint_interval == 0 {
            save_checkpoint(
                &graph,
                &cfg.out_dir.join(format!("model_{:06}.ckpt", iter + 1)),
                &CheckpointExtras { stats: Some(dataset.stats.clone()), iteration: iter + 1 },
            )?;
        }
    }

    if last_val.is_nan() {
        last_val = validation_mpjpe(&mut graph, val_set, dataset, &val_plan, cfg)?;
    }
    save_checkpoint(
        &graph,
        &ckpt_path,
        &CheckpointExtras { stats: Some(dataset.stats.clone()), iteration: iterations_run },
    )?;
    std::fs::write(&metrics_path, &metrics)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        final_val_mpjpe: last_val,
        iterations_run,
    })
}
