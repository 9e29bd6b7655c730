//! Manual probe: how fast does the overfit configuration converge?

use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use skelmotion::dataset::prepare_dataset;
use skelmotion::training::{train_with_data, LossWeights, TrainConfig};

fn main() {
    let mode = std::env::args().nth(2).unwrap_or_else(|| "mixed".into());
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (walkers, idles) = match mode.as_str() {
        "idle" => (0, 8),
        "walk" => (8, 0),
        _ => (6, 2),
    };
    let clips = skelmotion::synth::generate_corpus(walkers, idles, 160, &mut rng).unwrap();
    let subjects = (0..clips.len()).map(|i| format!("s{i}")).collect();
    let ds = prepare_dataset(clips, subjects).unwrap();
    let camera_aug = std::env::args().nth(3).map(|s| s != "nocam").unwrap_or(true);

    let dir = std::env::temp_dir().join("overfit_probe");
    let cfg = TrainConfig {
        seed: 17,
        out_dir: dir,
        iterations: std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300),
        batch_size: 8,
        clip_len_min: 48,
        clip_len_max: 48,
        channel_width: 256,
        dropout_rate: 0.0,
        confidence_sim: false,
        weights: LossWeights { adversarial: 0.0, ..LossWeights::default() },
        log_interval: 25,
        checkpoint_interval: 0,
        tpose_interval: 50,
        val_windows: 4,
        val_window_len: 48,
        early_stop_mpjpe: 0.05,
        lr_gen: 1e-3,
        camera_aug,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let outcome = train_with_data(&cfg, &ds, None).unwrap();
    println!(
        "ran {} iterations in {:?} ({:.3} s/iter), final val MPJPE {:.4}",
        outcome.iterations_run,
        start.elapsed(),
        start.elapsed().as_secs_f64() / outcome.iterations_run as f64,
        outcome.final_val_mpjpe
    );
    println!("{}", std::fs::read_to_string(&outcome.metrics).unwrap());
}
