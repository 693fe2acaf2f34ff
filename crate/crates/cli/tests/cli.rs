use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rawgrl"))
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
[scenario]
num_users = 4
num_groups = 2

[train]
steps = 2
sim_slots = 10

[online]
window = 10

[eval]
realizations = 1
sim_slots = 10
"#,
    )
    .unwrap();
    path
}

fn run_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_config_exits_2() {
    let out = bin().args(["--config", "/nonexistent/x.toml", "pretrain"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "scenario = 5").unwrap();
    let out = bin().args(["--config", path.to_str().unwrap(), "pretrain"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_policy_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("out");
    run_ok(
        &bin()
            .args(["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "pretrain"])
            .output()
            .unwrap(),
    );
    let ckpt = out_dir.join("omega.json");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--policies",
            "bogus",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_writes_round_trippable_checkpoint_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out_dir in [&out1, &out2] {
        run_ok(
            &bin()
                .args([
                    "--config",
                    cfg.to_str().unwrap(),
                    "--out",
                    out_dir.to_str().unwrap(),
                    "pretrain",
                ])
                .output()
                .unwrap(),
        );
    }
    let ckpt = out1.join("omega.json");
    assert!(ckpt.exists());
    let store = rawgrl::nn::ParamStore::load(&ckpt).unwrap();
    assert_eq!(store.to_json(), std::fs::read_to_string(&ckpt).unwrap());
    // Data outputs byte-identical across reruns.
    assert_eq!(
        std::fs::read(out1.join("pretrain_log.csv")).unwrap(),
        std::fs::read(out2.join("pretrain_log.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(out1.join("omega.json")).unwrap(),
        std::fs::read(out2.join("omega.json")).unwrap()
    );
    assert!(out1.join("pretrain_manifest.json").exists());
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let base = ["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];

    run_ok(&bin().args(base).arg("pretrain").output().unwrap());
    let omega = out_dir.join("omega.json");

    run_ok(
        &bin().args(base).args(["train", "--omega", omega.to_str().unwrap()]).output().unwrap(),
    );
    let ckpt = out_dir.join("actor_critic.json");
    assert!(ckpt.exists());
    assert!(out_dir.join("train_log.csv").exists());

    run_ok(
        &bin()
            .args(base)
            .args(["eval", "--ckpt", ckpt.to_str().unwrap(), "--policies", "proposed,rand,unif"])
            .output()
            .unwrap(),
    );
    for p in ["proposed", "rand", "unif"] {
        assert!(out_dir.join(format!("eval_{p}_cdf.csv")).exists());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("eval_summary.json")).unwrap())
            .unwrap();
    assert!(summary.get("proposed").and_then(|p| p.get("mean_worst")).is_some());
    assert!(summary.get("rand").is_some());

    run_ok(
        &bin()
            .args(base)
            .args(["online", "--ckpt", ckpt.to_str().unwrap(), "--total-slots", "30"])
            .output()
            .unwrap(),
    );
    let online = std::fs::read_to_string(out_dir.join("online_static.csv")).unwrap();
    assert_eq!(online.lines().count(), 4); // header + 3 windows

    run_ok(
        &bin()
            .args(base)
            .args([
                "sweep-kz",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--k-list",
                "4",
                "--z-list",
                "2",
                "--realizations",
                "1",
            ])
            .output()
            .unwrap(),
    );
    let sweep = std::fs::read_to_string(out_dir.join("sweep_kz.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 2);
}

#[test]
fn sweep_rejects_non_power_of_two_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let base = ["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
    run_ok(&bin().args(base).arg("pretrain").output().unwrap());
    let ckpt = out_dir.join("omega.json");
    let out = bin()
        .args(base)
        .args(["sweep-kz", "--ckpt", ckpt.to_str().unwrap(), "--k-list", "4", "--z-list", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["--out", dir.path().join("o").to_str().unwrap(), "selftest"]).output().unwrap();
    run_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("selftest ok"));
}
