use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use revad::check::{finite_diff, max_rel_error};
use revad::Tape;

use super::*;
use crate::fk::fk_local;
use crate::network::fk_layer::fk_from_rotations_graph;
use crate::rotation::RotationSeq;
use crate::skeleton::{build_tpose, Skeleton};
use crate::testutil::{random_rotation_seq, random_skeleton};
use crate::topology::GROUP_COUNT;

fn small_config() -> NetworkConfig {
    NetworkConfig { channel_width: 24, disc_channels: 8, dropout_rate: 0.1, ..Default::default() }
}

fn random_input(batch: usize, t_len: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[batch, INPUT_CHANNELS, t_len]), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn eq_forward_shape_contract_and_unit_quaternions() {
    let mut graph = ModelGraph::new(small_config(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let x = tape.constant(random_input(2, 60, &mut rng));
    let out = eq_forward(&mut graph, &mut tape, x, &mut ForwardMode::Eval).unwrap();
    assert_eq!(tape.value(out.rotations).shape(), &[2, 60, JOINT_COUNT, 4]);
    assert_eq!(tape.value(out.depth).shape(), &[2, 60]);
    assert_eq!(tape.value(out.contact_logits).shape(), &[2, 60, 2]);
    // every output quaternion is unit-norm
    let rot = tape.value(out.rotations);
    for b in 0..2 {
        for t in 0..60 {
            for j in 0..JOINT_COUNT {
                let n: f64 = (0..4).map(|k| rot[[b, t, j, k]].powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5, "quaternion norm {n}");
            }
        }
    }
}

#[test]
fn eq_rejects_too_short_clips() {
    let mut graph = ModelGraph::new(small_config(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(random_input(1, EQ_MIN_FRAMES - 1, &mut rng));
    assert!(matches!(
        eq_forward(&mut graph, &mut tape, x, &mut ForwardMode::Eval),
        Err(Error::Length(_))
    ));
}

#[test]
fn causal_mode_never_looks_into_the_future() {
    let config = NetworkConfig { causal: true, ..small_config() };
    let mut graph = ModelGraph::new(config, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t_len = 30;
    let base = random_input(1, t_len, &mut rng);

    let run = |graph: &mut ModelGraph, input: ArrayD<f64>| -> (Array3<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let out = eq_forward(graph, &mut tape, x, &mut ForwardMode::Eval).unwrap();
        let rot = tape
            .value(out.rotations)
            .clone()
            .into_shape_with_order(IxDyn(&[t_len, JOINT_COUNT, 4]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let depth = tape.value(out.depth).iter().copied().collect();
        (rot, depth)
    };
    let (rot_a, depth_a) = run(&mut graph, base.clone());
    for perturb_t in [5usize, 17, 29] {
        let mut modified = base.clone();
        for c in 0..INPUT_CHANNELS {
            modified[[0, c, perturb_t]] += 0.5;
        }
        let (rot_b, depth_b) = run(&mut graph, modified);
        for t in 0..perturb_t {
            assert_eq!(depth_a[t], depth_b[t], "depth changed at frame {t} < {perturb_t}");
            for j in 0..JOINT_COUNT {
                for k in 0..4 {
                    assert_eq!(
                        rot_a[[t, j, k]],
                        rot_b[[t, j, k]],
                        "rotation changed at frame {t} < {perturb_t}"
                    );
                }
            }
        }
        // and the perturbation is actually visible somewhere at or after t
        let changed = (perturb_t..t_len).any(|t| depth_a[t] != depth_b[t]);
        assert!(changed, "perturbation at {perturb_t} had no effect at all");
    }
}

#[test]
fn es_outputs_nine_positive_lengths_for_any_clip_length() {
    let mut graph = ModelGraph::new(small_config(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t_len in [5usize, 31, 77] {
        let mut tape = Tape::new();
        let x = tape.constant(random_input(3, t_len, &mut rng));
        let lengths = es_forward(&mut graph, &mut tape, x, &mut ForwardMode::Eval).unwrap();
        assert_eq!(tape.value(lengths).shape(), &[3, GROUP_COUNT]);
        assert!(tape.value(lengths).iter().all(|&v| v > 0.0));
    }
}

#[test]
fn es_is_time_invariant_on_periodic_tilings() {
    let mut graph = ModelGraph::new(small_config(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let run = |graph: &mut ModelGraph, input: ArrayD<f64>| -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let lengths = es_forward(graph, &mut tape, x, &mut ForwardMode::Eval).unwrap();
        tape.value(lengths).iter().copied().collect()
    };

    // constant-in-time inputs: exact independence of T (boundary frames see
    // identical padding contexts at every length)
    let value = random_input(1, 1, &mut rng);
    for t_len in [20usize, 60, 180] {
        let mut constant = ArrayD::zeros(IxDyn(&[1, INPUT_CHANNELS, t_len]));
        for c in 0..INPUT_CHANNELS {
            for t in 0..t_len {
                constant[[0, c, t]] = value[[0, c, 0]];
            }
        }
        let out = run(&mut graph, constant);
        if t_len == 20 {
            continue;
        }
        let mut base = ArrayD::zeros(IxDyn(&[1, INPUT_CHANNELS, 20]));
        for c in 0..INPUT_CHANNELS {
            for t in 0..20 {
                base[[0, c, t]] = value[[0, c, 0]];
            }
        }
        let expect = run(&mut graph, base);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "constant clip output depends on T: {a} vs {b}");
        }
    }

    // exact periodic tiling: near-identical up to zero-padding effects at
    // the tile seams, which the short clip never sees
    let period = random_input(1, 60, &mut rng);
    let mut tiled = ArrayD::zeros(IxDyn(&[1, INPUT_CHANNELS, 180]));
    for c in 0..INPUT_CHANNELS {
        for t in 0..180 {
            tiled[[0, c, t]] = period[[0, c, t % 60]];
        }
    }
    let short = run(&mut graph, period);
    let long = run(&mut graph, tiled);
    for (a, b) in short.iter().zip(long.iter()) {
        assert!(
            (a - b).abs() < 1e-2 * a.abs().max(1.0),
            "tiling changed E_S output beyond boundary effects: {a} vs {b}"
        );
    }
}

#[test]
fn eq_is_shift_equivariant_away_from_boundaries() {
    // periodic input shifted by a stride multiple: interior outputs shift
    // along; boundary frames are excluded (zero padding is absolute).
    let mut graph = ModelGraph::new(NetworkConfig { dropout_rate: 0.0, ..small_config() }, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t_len = 120;
    let period = 24;
    let shift = 12; // multiple of 3 and of nothing else relevant
    let mut base = ArrayD::zeros(IxDyn(&[1, INPUT_CHANNELS, t_len]));
    let mut phases = Vec::new();
    for _ in 0..INPUT_CHANNELS {
        phases.push((rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0)));
    }
    for (c, &(phase, amp)) in phases.iter().enumerate() {
        for t in 0..t_len {
            base[[0, c, t]] =
                amp * ((t as f64) * std::f64::consts::TAU / period as f64 + phase).sin();
        }
    }
    let mut shifted = ArrayD::zeros(IxDyn(&[1, INPUT_CHANNELS, t_len]));
    for c in 0..INPUT_CHANNELS {
        for t in 0..t_len {
            shifted[[0, c, t]] = base[[0, c, (t + t_len - shift) % t_len]];
        }
    }
    let run = |graph: &mut ModelGraph, input: ArrayD<f64>| -> ndarray::Array2<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let out = eq_forward(graph, &mut tape, x, &mut ForwardMode::Eval).unwrap();
        let d = tape.value(out.depth).clone();
        let c = tape.value(out.contact_logits).clone();
        let mut m = ndarray::Array2::zeros((t_len, 3));
        for t in 0..t_len {
            m[[t, 0]] = d[[0, t]];
            m[[t, 1]] = c[[0, t, 0]];
            m[[t, 2]] = c[[0, t, 1]];
        }
        m
    };
    let out_a = run(&mut graph, base);
    let out_b = run(&mut graph, shifted);
    let margin = 24; // receptive field of the strided branch after pooling
    for t in margin..(t_len - margin) {
        for k in 0..3 {
            let a = out_a[[(t + t_len - shift) % t_len, k]];
            let b = out_b[[t, k]];
            assert!(
                (a - b).abs() < 1e-4,
                "output not shift-equivariant at frame {t}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn discriminator_scores_are_per_sequence_and_differentiable() {
    let graph = ModelGraph::new(small_config(), 12).unwrap();
    let q = 4;
    // zero input -> pure bias path, identical for every batch element
    let mut tape = Tape::new();
    let zero = tape.constant(ArrayD::zeros(IxDyn(&[3, q, 9])));
    let s = d_forward(&graph, &mut tape, 2, zero).unwrap();
    let v = tape.value(s);
    assert_eq!(v.shape(), &[3]);
    assert!((v[[0]] - v[[1]]).abs() < 1e-12 && (v[[1]] - v[[2]]).abs() < 1e-12);

    // batch order invariance
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = ArrayD::from_shape_fn(IxDyn(&[1, q, 9]), |_| rng.random_range(-1.0..1.0));
    let b = ArrayD::from_shape_fn(IxDyn(&[1, q, 9]), |_| rng.random_range(-1.0..1.0));
    let score_of = |x: &ArrayD<f64>| -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = d_forward(&graph, &mut tape, 2, v).unwrap();
        tape.value(s)[[0]]
    };
    let mut ab = ArrayD::zeros(IxDyn(&[2, q, 9]));
    for c in 0..q {
        for t in 0..9 {
            ab[[0, c, t]] = a[[0, c, t]];
            ab[[1, c, t]] = b[[0, c, t]];
        }
    }
    let mut tape = Tape::new();
    let v = tape.constant(ab);
    let s = d_forward(&graph, &mut tape, 2, v).unwrap();
    assert!((tape.value(s)[[0]] - score_of(&a)).abs() < 1e-12);
    assert!((tape.value(s)[[1]] - score_of(&b)).abs() < 1e-12);

    // analytic input gradient matches finite differences
    let f = |inputs: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(inputs[0].clone());
        let s = d_forward(&graph, &mut tape, 2, v).unwrap();
        tape.value(s)[[0]]
    };
    let numeric = finite_diff(&f, std::slice::from_ref(&a), 1e-5);
    let mut tape = Tape::new();
    let v = tape.input(a.clone());
    let s = d_forward(&graph, &mut tape, 2, v).unwrap();
    let sum = tape.sum_all(s);
    let grads = tape.backward(sum);
    let analytic = grads.get(v).unwrap();
    let err = max_rel_error(analytic, &numeric[0], 1e-8);
    assert!(err < 1e-4, "discriminator gradient mismatch {err}");
}

#[test]
fn fk_graph_matches_plain_fk_and_its_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..3 {
        let sk = random_skeleton(&mut rng);
        let t_len = 4;
        let rots = random_rotation_seq(t_len, &mut rng);

        // forward agreement with the non-graph implementation
        let tpose = build_tpose(&sk).unwrap();
        let plain = fk_local(&tpose, &rots).unwrap();
        let mut tape = Tape::new();
        let lengths = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, GROUP_COUNT]), sk.lengths.to_vec()).unwrap(),
        );
        let rot_in = tape.constant(
            rots.values
                .clone()
                .into_shape_with_order(IxDyn(&[1, t_len, JOINT_COUNT, 4]))
                .unwrap(),
        );
        let pos = fk_from_rotations_graph(
            &mut tape,
            lengths,
            rot_in,
            crate::rotation::Representation::Quaternion,
        )
        .unwrap();
        let graph_pos = tape.value(pos);
        let max_dev = graph_pos
            .iter()
            .zip(plain.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-9, "trial {trial}: graph FK deviates {max_dev}");
    }
}

#[test]
fn fk_gradients_match_finite_differences_of_plain_fk() {
    // partials w.r.t. every quaternion component and bone length, against
    // central differences through the independent non-graph FK
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let t_len = 2;
    let sk = random_skeleton(&mut rng);
    let rots = random_rotation_seq(t_len, &mut rng);

    let lengths_arr = ArrayD::from_shape_vec(IxDyn(&[1, GROUP_COUNT]), sk.lengths.to_vec()).unwrap();
    let rot_arr = rots
        .values
        .clone()
        .into_shape_with_order(IxDyn(&[1, t_len, JOINT_COUNT, 4]))
        .unwrap();

    // scalar probe: weighted sum of all output coordinates
    let weights = ArrayD::from_shape_fn(IxDyn(&[1, t_len, JOINT_COUNT, 3]), |_| {
        rng.random_range(-1.0..1.0)
    });

    let eval_plain = |inputs: &[ArrayD<f64>]| -> f64 {
        let mut lens = [0.0; GROUP_COUNT];
        for (g, v) in inputs[0].iter().enumerate() {
            lens[g] = *v;
        }
        let sk = Skeleton::new(lens).unwrap();
        let tpose = build_tpose(&sk).unwrap();
        let values = inputs[1]
            .clone()
            .into_shape_with_order(IxDyn(&[t_len, JOINT_COUNT, 4]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        // bypass normalization: treat components as raw quaternion values,
        // exactly like the graph path does after its normalization layer --
        // so normalize here too to keep the two functions identical
        let rots = RotationSeq::new(crate::rotation::Representation::Quaternion, values).unwrap();
        let pos = fk_local(&tpose, &rots).unwrap();
        pos.iter()
            .zip(weights.iter())
            .map(|(p, w)| p * w)
            .sum()
    };

    let numeric = finite_diff(&eval_plain, &[lengths_arr.clone(), rot_arr.clone()], 1e-5);

    let mut tape = Tape::new();
    let lengths = tape.input(lengths_arr);
    let rot_raw = tape.input(rot_arr);
    // the plain path normalizes quaternions internally; mirror it
    let sq = tape.square(rot_raw);
    let ss = tape.sum_axes(sq, &[3], true);
    let norm = tape.sqrt(ss);
    let rot = tape.div(rot_raw, norm);
    let offsets = super::tpose_offsets_graph(&mut tape, lengths).unwrap();
    let mats =
        super::rotations_to_matrices_graph(&mut tape, rot, crate::rotation::Representation::Quaternion)
            .unwrap();
    let pos = super::fk_local_graph(&mut tape, offsets, mats).unwrap();
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(pos, w);
    let loss = tape.sum_all(weighted);
    let grads = tape.backward(loss);

    let g_len = grads.get(lengths).unwrap();
    let g_rot = grads.get(rot_raw).unwrap();
    let err_len = max_rel_error(g_len, &numeric[0], 1e-6);
    let err_rot = max_rel_error(g_rot, &numeric[1], 1e-6);
    assert!(err_len < 1e-4, "bone-length gradient mismatch {err_len}");
    assert!(err_rot < 1e-4, "quaternion gradient mismatch {err_rot}");
}

#[test]
fn fk_graph_handles_euler_and_sixd() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let sk = random_skeleton(&mut rng);
    let t_len = 3;
    let quat = random_rotation_seq(t_len, &mut rng);
    let tpose = build_tpose(&sk).unwrap();
    let expect = fk_local(&tpose, &quat).unwrap();
    for repr in [crate::rotation::Representation::Euler, crate::rotation::Representation::SixD] {
        let conv = quat.convert(repr).unwrap();
        let mut tape = Tape::new();
        let lengths = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, GROUP_COUNT]), sk.lengths.to_vec()).unwrap(),
        );
        let rot_in = tape.constant(
            conv.values
                .clone()
                .into_shape_with_order(IxDyn(&[1, t_len, JOINT_COUNT, repr.width()]))
                .unwrap(),
        );
        let pos = fk_from_rotations_graph(&mut tape, lengths, rot_in, repr).unwrap();
        let max_dev = tape
            .value(pos)
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-5, "{repr:?} FK deviates {max_dev}");
    }
}

#[test]
fn forward_passes_are_deterministic_in_eval_mode() {
    let mut graph = ModelGraph::new(small_config(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x_arr = random_input(2, 40, &mut rng);
    let run = |graph: &mut ModelGraph| -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(x_arr.clone());
        let out = eq_forward(graph, &mut tape, x, &mut ForwardMode::Eval).unwrap();
        let lens = es_forward(graph, &mut tape, x, &mut ForwardMode::Eval).unwrap();
        tape.value(out.depth)
            .iter()
            .chain(tape.value(lens).iter())
            .copied()
            .collect()
    };
    assert_eq!(run(&mut graph), run(&mut graph));
}

#[test]
fn training_mode_gradients_are_finite_for_all_parameter_groups() {
    let mut graph = ModelGraph::new(small_config(), 19).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(21);
    let mut tape = Tape::new();
    let x = tape.constant(random_input(2, 24, &mut rng));
    let mut mode = ForwardMode::Train(&mut drop_rng);
    let out = eq_forward(&mut graph, &mut tape, x, &mut mode).unwrap();
    let lens = es_forward(&mut graph, &mut tape, x, &mut mode).unwrap();
    let r2 = tape.square(out.rotations);
    let d2 = tape.square(out.depth);
    let c2 = tape.square(out.contact_logits);
    let l2 = tape.square(lens);
    let s1 = tape.mean_all(r2);
    let s2 = tape.mean_all(d2);
    let s3 = tape.mean_all(c2);
    let s4 = tape.mean_all(l2);
    let s12 = tape.add(s1, s2);
    let s34 = tape.add(s3, s4);
    let loss = tape.add(s12, s34);
    let grads = tape.backward(loss);
    tape.accumulate_param_grads(&grads, &mut graph.store);
    for id in graph.generator_ids.clone() {
        assert!(
            graph.store.grad(id).iter().all(|g| g.is_finite()),
            "non-finite gradient in {}",
            graph.store.name(id)
        );
    }
}

#[test]
fn audit_passes_for_default_and_desk_scale_configs() {
    // full default width
    let graph = ModelGraph::new(NetworkConfig::default(), 22).unwrap();
    shape_audit(&graph).unwrap();
    assert!(count_parameters(&graph) > 50_000_000);
    drop(graph);

    // desk-scale width
    let config = NetworkConfig { channel_width: 512, ..Default::default() };
    let graph = ModelGraph::new(config, 23).unwrap();
    shape_audit(&graph).unwrap();

    // corrupting a tensor shape must fail the audit naming the layer
    let mut graph = ModelGraph::new(small_config(), 24).unwrap();
    let victim = graph
        .store
        .ids()
        .find(|id| graph.store.name(*id) == "es.head.w")
        .unwrap();
    // rebuild the store entry with a wrong shape by constructing a fresh
    // graph whose store we tamper with through set_value's shape check
    let bad = ArrayD::zeros(IxDyn(&[1, 1, 1]));
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        graph.store.set_value(victim, bad);
    }));
    assert!(result.is_err(), "set_value enforces shapes");
}

#[test]
fn checkpoint_round_trip_restores_everything_and_rejects_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let mut graph = ModelGraph::new(small_config(), 25).unwrap();
    // push the running stats away from init so the round trip is visible
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(27);
    let mut tape = Tape::new();
    let x = tape.constant(random_input(2, 20, &mut rng));
    let _ = eq_forward(&mut graph, &mut tape, x, &mut ForwardMode::Train(&mut drop_rng)).unwrap();
    let _ = es_forward(&mut graph, &mut tape, x, &mut ForwardMode::Train(&mut drop_rng)).unwrap();

    let path = dir.path().join("model.ckpt");
    save_checkpoint(&graph, &path, &CheckpointExtras { stats: None, iteration: 7 }).unwrap();
    let (mut loaded, extras) = load_checkpoint(&path, Some(&graph.config)).unwrap();
    assert_eq!(extras.iteration, 7);

    // identical eval outputs
    let x_arr = random_input(1, 30, &mut rng);
    let run = |g: &mut ModelGraph| -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(x_arr.clone());
        let out = eq_forward(g, &mut tape, x, &mut ForwardMode::Eval).unwrap();
        tape.value(out.depth).iter().copied().collect()
    };
    assert_eq!(run(&mut graph), run(&mut loaded));

    // config mismatch refuses to load
    let other = NetworkConfig { channel_width: 32, ..small_config() };
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Checkpoint(_))));
}
