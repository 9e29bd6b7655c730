//! Drives the CLI binary end to end: synthesize data, prepare it, train a
//! tiny model, reconstruct from a keypoint file, evaluate, and export BVH.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_skelmotion")
}

fn run(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // 1. synthesize a small corpus of BVH files + manifest
    let out = run(
        &["synth-data", "--out-dir", "synth", "--walkers", "2", "--idles", "1", "--frames", "120", "--seed", "5"],
        root,
    );
    assert!(out.contains("wrote 3 clips"), "{out}");
    assert!(root.join("synth/manifest.toml").exists());

    // 2. prepare the dataset
    let out = run(&["prepare-data", "synth/manifest.toml", "--out", "data.skds"], root);
    assert!(out.contains("prepared 3 clips (3 with rotations)"), "{out}");

    // 3. train a miniature model
    std::fs::write(
        root.join("train.toml"),
        r#"
seed = 3
dataset = "data.skds"
out_dir = "run"
iterations = 8
batch_size = 2
clip_len_min = 24
clip_len_max = 32
channel_width = 16
dropout_rate = 0.0
tpose_interval = 4
tpose_count = 1
tpose_frames = 16
log_interval = 4
checkpoint_interval = 0
val_windows = 1
val_window_len = 24
"#,
    )
    .unwrap();
    let out = run(&["train", "train.toml"], root);
    assert!(out.contains("trained 8 iterations"), "{out}");
    assert!(root.join("run/model.ckpt").exists());
    assert!(root.join("run/metrics.csv").exists());

    // 4. reconstruct from a detector keypoint file
    let keypoint_json = synth_keypoint_file();
    std::fs::write(root.join("kp.json"), keypoint_json).unwrap();
    let out = run(&["infer", "run/model.ckpt", "kp.json", "--out", "recon.bvh"], root);
    assert!(out.contains("reconstructed 24 frames"), "{out}");
    let bvh_text = std::fs::read_to_string(root.join("recon.bvh")).unwrap();
    assert!(bvh_text.starts_with("HIERARCHY"));
    assert!(bvh_text.contains("MOTION"));

    // 5. evaluate the checkpoint against the manifest
    let out = run(
        &["eval", "run/model.ckpt", "synth/manifest.toml", "--metrics", "eval.csv", "--seed", "2"],
        root,
    );
    assert!(out.contains("evaluated 3 clips"), "{out}");
    let csv = std::fs::read_to_string(root.join("eval.csv")).unwrap();
    assert!(csv.lines().count() == 5, "3 clips + aggregate + header:\n{csv}");
    assert!(csv.contains("aggregate"));

    // 6. velocity histograms of a source BVH
    let bvh_name = std::fs::read_dir(root.join("synth"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().into_string().unwrap())
        .find(|n| n.ends_with(".bvh"))
        .unwrap();
    let out = run(
        &["hist", &format!("synth/{bvh_name}"), "--out", "hist.csv", "--bins", "20"],
        root,
    );
    assert!(out.contains("histograms"), "{out}");
    let hist = std::fs::read_to_string(root.join("hist.csv")).unwrap();
    assert!(hist.starts_with("joint,axis,bin_center,count"));

    // 7. export a prepared clip back to BVH and reconstruct its FK
    run(&["export-bvh", "data.skds", "--clip", "1", "--out", "clip1.bvh"], root);
    let doc = skelmotion::bvh::read_bvh(&root.join("clip1.bvh")).unwrap();
    assert_eq!(doc.frame_count(), 120);
    skelmotion::bvh::motion_from_bvh(&doc).unwrap();
}

/// A static 24-frame detector file: a person-shaped set of 16 keypoints in a
/// 640x480 image.
fn synth_keypoint_file() -> String {
    // rough frontal figure in pixels (root near image center)
    let joints_px: [(f64, f64); 16] = [
        (320.0, 260.0), // pelvis
        (320.0, 160.0), // thorax
        (320.0, 130.0), // neck
        (320.0, 100.0), // head
        (280.0, 160.0), // left shoulder
        (260.0, 200.0), // left elbow
        (250.0, 240.0), // left wrist
        (360.0, 160.0), // right shoulder
        (380.0, 200.0), // right elbow
        (390.0, 240.0), // right wrist
        (295.0, 265.0), // left hip
        (290.0, 340.0), // left knee
        (288.0, 420.0), // left foot
        (345.0, 265.0), // right hip
        (350.0, 340.0), // right knee
        (352.0, 420.0), // right foot
    ];
    let frame: Vec<[f64; 3]> = joints_px.iter().map(|&(x, y)| [x, y, 0.95]).collect();
    let frames: Vec<_> = (0..24).map(|_| Some(frame.clone())).collect();
    serde_json::to_string(&serde_json::json!({
        "width": 640.0,
        "height": 480.0,
        "frames": frames,
    }))
    .unwrap()
}
