use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::check::{finite_diff, max_rel_error};
use crate::{Arr, ParamStore, Tape, Var};

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Checks analytic gradients of `build` (a scalar-valued graph over the given
/// input shapes) against central finite differences.
fn grad_check(shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Arr> = shapes.iter().map(|s| rand_arr(s, &mut rng)).collect();

    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, a)| store.add(format!("x{i}"), a.clone()))
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    tape.accumulate_param_grads(&grads, &mut store);

    let f = |xs: &[Arr]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.input(a.clone())).collect();
        let l = build(&mut t, &vs);
        t.scalar(l)
    };
    let numeric = finite_diff(&f, &inputs, 1e-6);
    for (i, id) in ids.iter().enumerate() {
        let err = max_rel_error(&store.grad(*id), &numeric[i], 1e-6);
        assert!(
            err < 1e-6,
            "gradient mismatch for input {i}: rel err {err:.3e}\nanalytic {:?}\nnumeric {:?}",
            store.grad(*id),
            numeric[i]
        );
    }
}

#[test]
fn grad_binary_broadcast_ops() {
    grad_check(&[&[2, 3], &[2, 3]], 1, |t, v| {
        let s = t.add(v[0], v[1]);
        let m = t.mul(s, v[0]);
        t.sum_all(m)
    });
    // broadcasting across a leading axis and a size-1 axis
    grad_check(&[&[2, 3, 4], &[3, 1]], 2, |t, v| {
        let d = t.div(v[0], v[1]);
        let s = t.sub(d, v[0]);
        let sq = t.square(s);
        t.mean_all(sq)
    });
}

#[test]
fn grad_unary_ops() {
    grad_check(&[&[3, 4]], 3, |t, v| {
        let a = t.leaky_relu(v[0], 0.2);
        let b = t.scale(a, 1.7);
        let c = t.add_scalar(b, 0.3);
        let d = t.neg(c);
        t.sum_all(d)
    });
    grad_check(&[&[5]], 4, |t, v| {
        let sq = t.square(v[0]);
        let e = t.add_scalar(sq, 1.0); // keep sqrt/ln away from 0
        let r = t.sqrt(e);
        let l = t.ln(r);
        let x = t.exp(l);
        t.sum_all(x)
    });
    grad_check(&[&[4, 2]], 5, |t, v| {
        let s = t.softplus(v[0]);
        let g = t.sigmoid(s);
        t.mean_all(g)
    });
    grad_check(&[&[3, 3]], 22, |t, v| {
        let s = t.sin(v[0]);
        let c = t.cos(v[0]);
        let p = t.mul(s, c);
        t.sum_all(p)
    });
}

#[test]
fn grad_reductions_and_shape_ops() {
    grad_check(&[&[2, 3, 4]], 6, |t, v| {
        let m = t.mean_axes(v[0], &[0, 2], true);
        let d = t.sub(v[0], m);
        let s = t.square(d);
        let ssum = t.sum_axes(s, &[1], false);
        t.sum_all(ssum)
    });
    grad_check(&[&[2, 6]], 7, |t, v| {
        let r = t.reshape(v[0], &[2, 3, 2]);
        let p = t.permute(r, &[1, 0, 2]);
        let n = t.narrow(p, 0, 1, 2);
        let sel = t.select(n, 2, 0);
        t.sum_all(sel)
    });
    grad_check(&[&[2, 2], &[2, 3]], 8, |t, v| {
        let c = t.concat(&[v[0], v[1]], 1);
        let s = t.square(c);
        t.sum_all(s)
    });
}

#[test]
fn grad_matmul_ops() {
    grad_check(&[&[3, 4], &[4, 2]], 9, |t, v| {
        let y = t.matmul(v[0], v[1]);
        let s = t.square(y);
        t.sum_all(s)
    });
    // batched with broadcast over leading dims: (2,1,3,3) x (1,4,3,1)
    grad_check(&[&[2, 1, 3, 3], &[1, 4, 3, 1]], 10, |t, v| {
        let y = t.batch_matmul(v[0], v[1]);
        let s = t.square(y);
        t.mean_all(s)
    });
}

#[test]
fn grad_conv1d_all_paddings() {
    // symmetric padding, stride 1
    grad_check(&[&[2, 3, 7], &[4, 3, 3]], 11, |t, v| {
        let y = t.conv1d(v[0], v[1], 1, 1, 1);
        let s = t.square(y);
        t.sum_all(s)
    });
    // stride 3 with symmetric padding (the inception branch shape)
    grad_check(&[&[1, 2, 9], &[3, 2, 5]], 12, |t, v| {
        let y = t.conv1d(v[0], v[1], 3, 2, 2);
        let s = t.square(y);
        t.sum_all(s)
    });
    // causal: all padding on the left
    grad_check(&[&[1, 2, 6], &[2, 2, 3]], 13, |t, v| {
        let y = t.conv1d(v[0], v[1], 1, 2, 0);
        let s = t.square(y);
        t.sum_all(s)
    });
}

#[test]
fn conv1d_matches_direct_convolution() {
    // Oracle: direct O(B*Cout*Cin*K*T) loop, no im2col.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_arr(&[2, 3, 8], &mut rng);
    let w = rand_arr(&[4, 3, 3], &mut rng);
    let (stride, pad_l) = (1usize, 1usize);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv1d(xv, wv, stride, pad_l, 1);
    let yv = tape.value(y);
    for b in 0..2 {
        for co in 0..4 {
            for to in 0..8 {
                let mut acc = 0.0;
                for ci in 0..3 {
                    for k in 0..3 {
                        let ti = (to * stride + k) as isize - pad_l as isize;
                        if ti >= 0 && ti < 8 {
                            acc += x[[b, ci, ti as usize]] * w[[co, ci, k]];
                        }
                    }
                }
                assert!((yv[[b, co, to]] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn grad_pooling_ops() {
    grad_check(&[&[2, 3, 9]], 15, |t, v| {
        let y = t.adaptive_avg_pool1d(v[0], 4);
        let z = t.adaptive_avg_pool1d(y, 9); // down then back up
        let s = t.square(z);
        t.sum_all(s)
    });
    grad_check(&[&[1, 2, 4]], 16, |t, v| {
        let y = t.hold_upsample(v[0], 3, 12);
        let s = t.square(y);
        t.sum_all(s)
    });
    grad_check(&[&[2, 4, 6]], 17, |t, v| {
        let y = t.max_pool_time(v[0]);
        let s = t.square(y);
        t.sum_all(s)
    });
}

#[test]
fn adaptive_avg_pool_identity_when_lengths_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_arr(&[1, 2, 7], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.adaptive_avg_pool1d(xv, 7);
    assert_eq!(tape.value(y), &x);
}

#[test]
fn grad_bce_with_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let targets = ArrayD::from_shape_vec(
        IxDyn(&[2, 3]),
        (0..6).map(|_| if rng.random_range(0.0..1.0) > 0.5 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let tclone = targets.clone();
    grad_check(&[&[2, 3]], 20, move |t, v| {
        let l = t.bce_with_logits(v[0], tclone.clone());
        t.mean_all(l)
    });
    // value oracle: -[y ln s + (1-y) ln(1-s)]
    let mut tape = Tape::new();
    let z = rand_arr(&[2, 3], &mut ChaCha8Rng::seed_from_u64(21));
    let zv = tape.constant(z.clone());
    let l = tape.bce_with_logits(zv, targets.clone());
    for (i, (&zi, &yi)) in z.iter().zip(targets.iter()).enumerate() {
        let s = 1.0 / (1.0 + (-zi).exp());
        let expect = -(yi * s.ln() + (1.0 - yi) * (1.0 - s).ln());
        let got = *tape.value(l).iter().nth(i).unwrap();
        assert!((got - expect).abs() < 1e-12, "bce value mismatch at {i}");
    }
}

#[test]
fn grad_accumulates_across_reuse() {
    // x used twice: d/dx (x*x + 3x) = 2x + 3
    let mut store = ParamStore::new();
    let id = store.add("x", ArrayD::from_elem(IxDyn(&[2]), 1.5));
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let sq = tape.mul(x, x);
    let tri = tape.scale(x, 3.0);
    let sum = tape.add(sq, tri);
    let loss = tape.sum_all(sum);
    let grads = tape.backward(loss);
    tape.accumulate_param_grads(&grads, &mut store);
    for &g in store.grad(id).iter() {
        assert!((g - 6.0).abs() < 1e-12);
    }
}

#[test]
fn detach_blocks_gradient_flow() {
    let mut store = ParamStore::new();
    let id = store.add("x", ArrayD::from_elem(IxDyn(&[3]), 2.0));
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let d = tape.detach(x);
    let y = tape.mul(d, d);
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss);
    tape.accumulate_param_grads(&grads, &mut store);
    assert!(store.grad(id).iter().all(|&g| g == 0.0));
}

#[test]
fn adam_minimizes_quadratic() {
    // minimize (w - 3)^2 elementwise
    let mut store = ParamStore::new();
    let id = store.add("w", ArrayD::zeros(IxDyn(&[4])));
    let mut opt = crate::Adam::new(0.1);
    for _ in 0..500 {
        store.zero_grad_all();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let target = tape.constant(ArrayD::from_elem(IxDyn(&[4]), 3.0));
        let loss = tape.mse(w, target);
        let grads = tape.backward(loss);
        tape.accumulate_param_grads(&grads, &mut store);
        opt.step(&mut store, &[id]);
    }
    for &w in store.value(id).iter() {
        assert!((w - 3.0).abs() < 1e-3, "adam did not converge: {w}");
    }
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let run = || -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let id = store.add_uniform("w", &[4, 4], 4, &mut rng);
        let mut opt = crate::Adam::new(1e-2);
        let mut out = Vec::new();
        for _ in 0..20 {
            store.zero_grad_all();
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let x = tape.constant(rand_arr(&[4, 4], &mut rng));
            let y = tape.matmul(w, x);
            let s = tape.square(y);
            let loss = tape.mean_all(s);
            out.push(tape.scalar(loss));
            let grads = tape.backward(loss);
            tape.accumulate_param_grads(&grads, &mut store);
            opt.step(&mut store, &[id]);
        }
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}
