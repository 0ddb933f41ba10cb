use std::path::Path;
use std::process::Command;

fn kcplan() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kcplan"));
    c.env("KCPLAN_LOG", "warn");
    c
}

fn run_ok(args: &[&str]) -> String {
    let out = kcplan().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "kcplan {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn help_on_every_subcommand() {
    for sub in ["gen-data", "keyconfig", "train", "plan", "eval"] {
        let out = kcplan().args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub} --help");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("Usage"), "{sub}: {text}");
        assert!(text.contains("--config"));
    }
    assert!(kcplan().arg("--help").output().unwrap().status.success());
}

#[test]
fn missing_config_names_the_path() {
    let out = kcplan()
        .args(["gen-data", "--config", "/no/such/run.json", "--seed", "1", "--out", "/tmp/x.jsonl"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(err.trim()).expect("stderr is one JSON object");
    assert!(v["error"].as_str().unwrap().contains("/no/such/run.json"));
}

#[test]
fn seed_is_required() {
    for sub in ["gen-data", "train", "eval"] {
        let out = kcplan().args([sub, "--out", "/tmp/unused"]).output().unwrap();
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"), "{sub}");
    }
}

#[test]
fn unknown_method_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kcplan()
        .args(["eval", "--seed", "1", "--methods", "magic", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "keyconfig": {"K": 12, "max_attempts": 5000},
        "denoiser": {"hidden_width": 16, "n_blocks": 1, "n_heads": 2, "cond_embed_dim": 16, "freq_bands": 2},
        "train": {"batch_size": 4},
        "sampler": {"n_infer_steps": 8, "batch_size": 2},
        "eval": {"birrt_budgets": [100, 400]}
    });
    let p = dir.join("run.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();

    let summary = run_ok(&["gen-data", "--config", &cfg, "--seed", "4", "--count", "20", "--out", &s("data.jsonl")]);
    let summary: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(summary["attempted"], 20);
    assert!(summary["succeeded"].as_u64().unwrap() >= 15);
    assert!(d.join("data.jsonl.config.json").exists());

    run_ok(&["keyconfig", "--config", &cfg, "--seed", "4", "--data", &s("data.jsonl"), "--out", &s("kc")]);
    assert!(d.join("kc/keys.json").exists());

    // 20 records / batch 4 = 5 steps per epoch, 40 epochs = 200 steps
    run_ok(&[
        "train", "--config", &cfg, "--seed", "4", "--data", &s("kc/dataset.jsonl"), "--keys", &s("kc/keys.json"),
        "--epochs", "40", "--checkpoint-every", "100", "--out", &s("model"),
    ]);
    for f in ["model.ckpt", "model-step100.ckpt", "model-step200.ckpt", "loss.csv", "config.json"] {
        assert!(d.join("model").join(f).exists(), "{f}");
    }
    let loss = std::fs::read_to_string(d.join("model/loss.csv")).unwrap();
    assert!(loss.starts_with("step,epoch,l_diff,l_coll,l_smooth,total"));
    assert!(loss.lines().count() >= 200);

    let metrics = run_ok(&[
        "plan", "--config", &cfg, "--seed", "4", "--checkpoint", &s("model/model.ckpt"), "--keys", &s("kc/keys.json"),
        "--budget", "10", "--out", &s("plan.json"),
    ]);
    let m: serde_json::Value = serde_json::from_str(metrics.trim()).unwrap();
    assert!(m["success"].is_boolean());
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("plan.json")).unwrap()).unwrap();
    let tau = plan["tau"].as_array().unwrap();
    assert_eq!(tau.len(), 48);
    assert_eq!(tau[0], plan["q_s"]);
    assert_eq!(tau[47], plan["q_g"]);

    run_ok(&[
        "eval", "--config", &cfg, "--seed", "4", "--checkpoint", &s("model/model.ckpt"), "--keys", &s("kc/keys.json"),
        "--count", "2", "--budget-grid", "0,5", "--batch", "2", "--guidance", "on", "--out", &s("eval"),
    ]);
    let csv = std::fs::read_to_string(d.join("eval/benchmark.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,level,budget,success_rate,collision_rate,penetration_depth,n,sampling_ms,opt_ms,penetration_depth_failures"
    );
    // pipeline ×2 budgets, diffusion-only, trajopt ×2, birrt ×2, straight
    assert_eq!(lines.count(), 8);
    assert!(d.join("eval/problems.csv").exists());
    let svg = std::fs::read_to_string(d.join("eval/level2.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval/config.json")).unwrap()).unwrap();
    assert_eq!(echo["guidance"]["enabled"], true);
    assert_eq!(echo["sampler"]["batch_size"], 2);
}

#[test]
fn single_method_single_problem_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "eval", "--seed", "2", "--count", "1", "--methods", "straight", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(dir.path().join("benchmark.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("straight,2,0,"));
}
