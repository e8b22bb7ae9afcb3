//! Black-box tests of the `lipsplat` binary: exit codes, artifact layout,
//! determinism of synthesize, and the documented error classes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lipsplat"))
}

/// Minimal config TOML sized for fast CLI runs.
fn write_config(root: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"
seed = 7
deterministic = true
output_dir = "{out}"
unit_scale = 1000.0
cosine_aggregation = "PerFrameMean"

[model]
vertex_count = 128
d_identity = 8
d_expression = 6
d_pose = 6
seed = 7

[avatar]
splats_per_face = 1
seed = 11
splat_scale = 0.45

[encoder]
sample_rate = 16000
d_feat = 64
n_layers = 2
n_heads = 4
d_ff = 128
dropout = 0.1
seed = 13

[lipreader]
d_read = 32
seed = 17

[decoder]
n_layers = 1
n_heads = 4
dropout = 0.3
motion_dim = 64
ffn_dim = 256
period = 30
seed = 19

[dataset]
root = "{data}"

[dataset.clean]
subjects = 3
sentences = 2
duration_s = 0.4
seed = 23
noise_level = 0.0
expression_amplitude = 0.002
jaw_amplitude = 0.09
subject_prefix = "A"

[dataset.noisy]
subjects = 3
sentences = 2
duration_s = 0.4
seed = 31
noise_level = 0.0003
expression_amplitude = 0.004
jaw_amplitude = 0.18
subject_prefix = "B"

[dataset.split]
train = 1
val = 1
test = 1

[stages.stage1]
dataset = "clean"
epochs = 2
batch_size = 2
grad_accum = 1
lr = 5e-4
lambda_read = 0.0

[stages.stage2]
dataset = "noisy"
epochs = 2
batch_size = 2
grad_accum = 1
lr = 5e-4
lambda_read = 0.0

[stages.stage3]
dataset = "noisy"
epochs = 1
batch_size = 1
grad_accum = 4
lr = 3e-4
lambda_read = 1e-5

[tts.stub]
sample_rate = 16000
"#,
        out = root.join("run").display(),
        data = root.join("data").display(),
    );
    let path = root.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn synthesize_train_infer_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "synthesize"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/clean/manifest.json").exists());
    assert!(dir.path().join("data/noisy/manifest.json").exists());
    assert!(dir.path().join("run/config.toml").exists());

    // stage 3 before its prerequisite: data error (exit 3) naming the artifact
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "train", "--stage", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("stage2_final.lpsa"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "train", "--stage", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck1 = dir.path().join("run/checkpoints/stage1_final.lpsa");
    assert!(ck1.exists());
    assert!(dir.path().join("run/logs/stage1_metrics.tsv").exists());

    // text inference through the stub TTS
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "infer",
            "--checkpoint",
            ck1.to_str().unwrap(),
            "--text",
            "no price too high",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let inf = dir.path().join("run/inference");
    assert!(inf.join("mesh_sequence.lpsa").exists());
    assert!(inf.join("frames/frames_manifest.json").exists());
    assert!(inf.join("frames/frame_000000.png").exists());

    // evaluation on the test split
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "evaluate",
            "--checkpoint",
            ck1.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = String::from_utf8_lossy(&out.stdout);
    assert!(tsv.contains("lve_mm"), "{tsv}");
    assert!(dir.path().join("run/evaluation/report.tsv").exists());

    // GT-as-prediction ceiling: LVE is exactly zero
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "evaluate", "--gt-as-pred"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let tsv = String::from_utf8_lossy(&out.stdout);
    let mean_line = tsv.lines().find(|l| l.starts_with("mean")).unwrap();
    let lve: f64 = mean_line.split('\t').nth(1).unwrap().parse().unwrap();
    assert_eq!(lve, 0.0);

    // confusion writes heatmap + matrix
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "confusion"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/confusion/confusion.png").exists());
    assert!(dir.path().join("run/confusion/confusion.json").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str("\nmystery = 1\n");
    std::fs::write(&cfg, text).unwrap();
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "synthesize"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "train", "--stage", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synthesize"));
}

#[test]
fn env_override_reaches_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    // an invalid override value in a valid key: config error
    let out = bin()
        .env("LIPSPLAT_STAGES__STAGE1__EPOCHS", "not-a-number")
        .args(["--config", cfg.to_str().unwrap(), "synthesize"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_stage_number_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "train", "--stage", "9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
