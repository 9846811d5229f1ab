use std::path::Path;
use std::process::{Command, Output};

fn realtalk(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_realtalk")).args(args).current_dir(cwd).env_remove("REALTALK_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = realtalk(&["show-config", "--set", "ldm.hiden=3"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ldm.hiden"));
}

#[test]
fn negative_delta_and_unknown_emotion_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&realtalk(&["show-config", "--set", "delta=-0.5"], dir.path())), 2);
    let o = realtalk(&["infer", "--emotion", "bored"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("neutral"));
}

#[test]
fn missing_dataset_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = realtalk(&["train-vae"], dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn seed_environment_overrides_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_realtalk"))
        .args(["show-config"])
        .current_dir(dir.path())
        .env("REALTALK_SEED", "1234")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 1234);
    assert_eq!(v["nerf_train"]["eval_seed"], 1234);
    assert_eq!(v["infer"]["motion_seed"], 1234);
}

#[test]
fn shipped_config_loads() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let dir = tempfile::tempdir().unwrap();
    let o = realtalk(&["show-config", "--config", shipped.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["delta"], 0.15);
}

#[test]
fn accept_selectors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&realtalk(&["accept", "bogus"], dir.path())), 2);
    let o = realtalk(&["accept", "c5"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("[PASS] criterion  5"));
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let toy = [
        "data.clips_per_emotion=1",
        "data.frames=12",
        "data.resolution=32",
        "vae.latent_dim=4",
        "vae.channels=8",
        "vae.dilations=[1]",
        "vae_train.steps=5",
        "ldm.hidden=16",
        "ldm.ff_hidden=16",
        "ldm.window=4",
        "ldm_train.steps=5",
        "ldm_train.batch_windows=2",
        "nerf.grid.levels=2",
        "nerf.grid.log2_table=8",
        "nerf.grid.finest_resolution=32",
        "nerf.width=8",
        "nerf.samples=8",
        "nerf_train.steps=5",
        "nerf_train.fine_start=5",
        "nerf_train.eval_every=5",
    ];
    let mut base: Vec<String> = Vec::new();
    for s in toy {
        base.push("--set".into());
        base.push(s.into());
    }
    let run = |cmd: &[&str]| {
        let mut args: Vec<&str> = cmd.to_vec();
        args.extend(base.iter().map(String::as_str));
        let o = realtalk(&args, dir.path());
        assert_eq!(code(&o), 0, "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["synth-data"]);
    run(&["train-vae"]);
    run(&["train-ldm"]);
    run(&["train-nerf"]);
    run(&["infer", "--emotion", "angry", "--delta", "0.3"]);
    let out = dir.path().join("runs/output");
    assert!(out.join("frames/frame_00011.png").exists());
    assert!(out.join("run.json").exists());
    let e = run(&["eval"]);
    assert!(String::from_utf8_lossy(&e.stdout).starts_with("clip,method,psnr"));
    let a = run(&["ablate-delta", "--deltas", "0,1"]);
    let table = String::from_utf8_lossy(&a.stdout).to_string();
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.starts_with("delta,ssim,psnr,lpips,m_lmd,f_lmd"));
    assert_eq!(code(&realtalk(&["ablate-delta", "--deltas", ""], dir.path())), 2);
}
