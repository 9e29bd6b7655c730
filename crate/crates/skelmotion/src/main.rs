use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use skelmotion::bvh::{export_bvh, motion_from_bvh, read_bvh, write_bvh};
use skelmotion::dataset::{prepare_from_manifest, PreparedDataset};
use skelmotion::evaluation::velocity_histogram;
use skelmotion::network::load_checkpoint;
use skelmotion::pipeline::{evaluate_dataset, reconstruct, EvalOptions};
use skelmotion::rotation::Representation;
use skelmotion::training::{train, TrainConfig, Variant};
use skelmotion::wild::import_keypoints;

/// Decomposes 2D joint sequences into a symmetric skeleton, joint rotations,
/// root positions and foot contacts; trains, evaluates and exports BVH.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a clip manifest, normalize it, and write a prepared dataset.
    PrepareData {
        manifest: PathBuf,
        /// Output path of the prepared dataset.
        #[arg(long, default_value = "dataset.skds")]
        out: PathBuf,
    },
    /// Generate a synthetic walker/idle corpus as BVH files plus a manifest.
    SynthData {
        #[arg(long, default_value = "synth")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        walkers: usize,
        #[arg(long, default_value_t = 2)]
        idles: usize,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train from a TOML config; flags override the config file.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// default | gt-skeleton | causal
        #[arg(long)]
        variant: Option<Variant>,
        /// quat | euler | sixd
        #[arg(long)]
        repr: Option<Representation>,
    },
    /// Reconstruct motion from a detector keypoint file and write BVH.
    Infer {
        checkpoint: PathBuf,
        keypoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
    },
    /// Evaluate a checkpoint against a manifest and write per-clip metrics.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// Output CSV path.
        #[arg(long, default_value = "metrics.csv")]
        metrics: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Feed ground-truth skeletons to FK (the gt-skeleton protocol).
        #[arg(long)]
        gt_skeleton: bool,
    },
    /// Rotational-velocity histograms of a BVH file, as plot-ready CSV.
    Hist {
        input: PathBuf,
        #[arg(long, default_value = "hist.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Histogram range in radians per frame.
        #[arg(long, default_value_t = 0.5)]
        max_velocity: f64,
    },
    /// Export one clip of a prepared dataset as BVH.
    ExportBvh {
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::PrepareData { manifest, out } => {
            let prepared = prepare_from_manifest(&manifest)
                .with_context(|| format!("preparing {}", manifest.display()))?;
            prepared.save(&out)?;
            println!(
                "prepared {} clips ({} with rotations) -> {}",
                prepared.clips.len(),
                prepared.clips.iter().filter(|c| c.seq.rotations.is_some()).count(),
                out.display()
            );
        }
        Command::SynthData { out_dir, walkers, idles, frames, seed } => {
            std::fs::create_dir_all(&out_dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clips = skelmotion::synth::generate_corpus(walkers, idles, frames, &mut rng)?;
            let mut manifest = String::new();
            for (i, clip) in clips.iter().enumerate() {
                let name = format!("{}_{i:03}.bvh", clip.source_id);
                let doc = export_bvh(
                    &clip.skeleton,
                    clip.rotations.as_ref().expect("synthetic clips carry rotations"),
                    &clip.root,
                    1.0 / clip.fps,
                )?;
                write_bvh(&doc, &out_dir.join(&name))?;
                manifest.push_str(&format!(
                    "[[clips]]\npath = \"{name}\"\nformat = \"bvh\"\nsubject = \"subject{i}\"\n\
                     fps = {}\nunits_per_mm = {}\n\n",
                    clip.fps, clip.units_per_mm
                ));
            }
            std::fs::write(out_dir.join("manifest.toml"), manifest)?;
            println!("wrote {} clips and manifest.toml to {}", clips.len(), out_dir.display());
        }
        Command::Train { config, seed, variant, repr } => {
            let mut cfg = TrainConfig::read(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(r) = repr {
                cfg.representation = r;
            }
            let outcome = train(&cfg)?;
            println!(
                "trained {} iterations; final validation MPJPE {:.4} (normalized units)\n\
                 checkpoint: {}\nmetrics: {}",
                outcome.iterations_run,
                outcome.final_val_mpjpe,
                outcome.checkpoint.display(),
                outcome.metrics.display()
            );
        }
        Command::Infer { checkpoint, keypoints, out, fps } => {
            if fps <= 0.0 {
                bail!("fps must be positive");
            }
            let (mut graph, extras) = load_checkpoint(&checkpoint, None)?;
            let stats = extras
                .stats
                .context("checkpoint carries no preprocessing statistics; train first")?;
            let (kp, conf) = import_keypoints(&keypoints)?;
            let recon = reconstruct(&mut graph, &stats, &kp, &conf, None)?;
            let doc = export_bvh(&recon.skeleton, &recon.rotations, &recon.root, 1.0 / fps)?;
            write_bvh(&doc, &out)?;
            println!(
                "reconstructed {} frames -> {} (skeleton mean bone length {:.4})",
                recon.rotations.frames(),
                out.display(),
                recon.skeleton.mean_bone_length()
            );
        }
        Command::Eval { checkpoint, manifest, metrics, seed, gt_skeleton } => {
            let (mut graph, extras) = load_checkpoint(&checkpoint, None)?;
            let stats = extras
                .stats
                .context("checkpoint carries no preprocessing statistics; train first")?;
            let dataset = if manifest.extension().is_some_and(|e| e == "skds") {
                PreparedDataset::load(&manifest)?
            } else {
                prepare_from_manifest(&manifest)?
            };
            let opts = EvalOptions { seed, gt_skeleton, ..EvalOptions::default() };
            let report = evaluate_dataset(&mut graph, &stats, &dataset, &opts)?;
            std::fs::write(&metrics, report.to_csv())?;
            println!(
                "evaluated {} clips; aggregate MPJPE {:.4} normalized units -> {}",
                report.per_clip.len(),
                report.aggregate.mpjpe,
                metrics.display()
            );
        }
        Command::Hist { input, out, bins, max_velocity } => {
            let doc = read_bvh(&input)?;
            let (_, rotations, _) = motion_from_bvh(&doc)?;
            let hist = velocity_histogram(&rotations, bins, max_velocity)?;
            std::fs::write(&out, hist.to_csv())?;
            println!("histograms for {} frames -> {}", rotations.frames(), out.display());
        }
        Command::ExportBvh { dataset, clip, out } => {
            let ds = PreparedDataset::load(&dataset)?;
            let c = ds
                .clips
                .get(clip)
                .with_context(|| format!("dataset has {} clips", ds.clips.len()))?;
            let rots = c
                .seq
                .rotations
                .as_ref()
                .context("clip has no rotations (positions-only source)")?;
            let doc = export_bvh(&c.seq.skeleton, rots, &c.seq.root, 1.0 / c.seq.fps)?;
            write_bvh(&doc, &out)?;
            println!("exported clip '{}' -> {}", c.seq.source_id, out.display());
        }
    }
    Ok(())
}
