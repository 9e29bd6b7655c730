use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use revad::{ParamStore, Tape};
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (b, t) = (8usize, 48usize);
    let width = 256usize;
    let mut store = ParamStore::new();
    let w1 = store.add_uniform("w1", &[width, 53, 1], 53, &mut rng);
    let w5 = store.add_uniform("w5", &[width, width, 5], width * 5, &mut rng);
    let w3 = store.add_uniform("w3", &[width, width, 3], width * 3, &mut rng);
    let wk = store.add_uniform("wk", &[width, width, 1], width, &mut rng);
    let wo = store.add_uniform("wo", &[71, width, 1], width, &mut rng);
    let n: usize = b * 53 * t;
    let x = ArrayD::from_shape_vec(IxDyn(&[b, 53, t]), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let start = Instant::now();
    let iters = 10;
    for _ in 0..iters {
        store.zero_grad_all();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let a = tape.param(&store, w1);
        let h = tape.conv1d(xv, a, 1, 0, 0);
        let b5 = tape.param(&store, w5);
        let h5 = tape.conv1d(h, b5, 3, 2, 2);
        let h5u = tape.adaptive_avg_pool1d(h5, t);
        let b3 = tape.param(&store, w3);
        let h3 = tape.conv1d(h, b3, 1, 1, 1);
        let b1 = tape.param(&store, wk);
        let h1 = tape.conv1d(h, b1, 1, 0, 0);
        let s1 = tape.add(h5u, h3);
        let s = tape.add(s1, h1);
        let o = tape.param(&store, wo);
        let y = tape.conv1d(s, o, 1, 0, 0);
        let sq = tape.square(y);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        tape.accumulate_param_grads(&grads, &mut store);
    }
    let dt = start.elapsed().as_secs_f64() / iters as f64;
    println!("E_Q-like fwd+bwd step: {:.3} s/iter at width {width}, B={b}, T={t}", dt);
}
