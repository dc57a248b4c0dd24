use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn harvest(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harvest"))
        .args(args)
        .env("HARVEST_OUT", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn micro_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("micro.json");
    fs::write(
        &path,
        r#"{
  "targets": [{"position": [1.0, 0.0], "bandwidth": 1.0, "gain": 1.0, "initial_volume": 0.5}],
  "agents": [{"start": [0.0, 0.0], "final": [2.0, 0.0], "height": 0.5, "max_speed": 1.0}],
  "n_max": 8,
  "dt": 1.0
}"#,
    )
    .unwrap();
    path
}

fn trivial_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("trivial.json");
    fs::write(
        &path,
        r#"{
  "targets": [{"position": [1.0, 1.0], "bandwidth": 1.0, "gain": 1.0, "initial_volume": 0.0}],
  "agents": [{"start": [0.0, 0.0], "final": [0.0, 0.0], "height": 0.5, "max_speed": 1.0}],
  "n_max": 4,
  "dt": 1.0
}"#,
    )
    .unwrap();
    path
}

const QUICK: [&str; 6] = ["--set", "learning_steps=3", "--set", "batch_steps=64", "--set", "hidden=[8,8]"];

#[test]
fn train_writes_checkpoint_curve_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let mut args = vec!["train", "--scenario", "builtin:config1", "--scheme", "lagrangian", "--seed", "7"];
    args.extend(QUICK);
    args.extend(["--out-dir", dir.to_str().unwrap()]);
    ok(&harvest(&args, tmp.path()));
    for f in ["manifest.json", "policy.ckpt", "curve.csv", "trajectory.csv", "summary.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(!dir.join("adversary.ckpt").exists());
    let curve = fs::read_to_string(dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["finished_at"].is_u64());
}

#[test]
fn smoothed_training_also_writes_adversary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let mut args = vec!["train", "--smooth", "--eps", "0.05", "--set", "smooth.adversary_hidden=[8]"];
    args.extend(QUICK);
    args.extend(["--out-dir", dir.to_str().unwrap()]);
    ok(&harvest(&args, tmp.path()));
    assert!(dir.join("adversary.ckpt").is_file());
}

#[test]
fn training_is_byte_stable_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let mut args = vec!["train", "--seed", "3"];
        args.extend(QUICK);
        args.extend(["--out-dir", dir.to_str().unwrap()]);
        ok(&harvest(&args, tmp.path()));
        dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["policy.ckpt", "curve.csv", "trajectory.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = harvest(&["train", "--scheme", "bogus"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(harvest(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(harvest(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn invalid_config_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = harvest(&["train", "--set", "gamma=1.5"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = harvest(&["train", "--set", "gamm=0.9"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamm"));
}

fn trained_policy(tmp: &Path) -> PathBuf {
    let dir = tmp.join("policy");
    let mut args = vec!["train"];
    args.extend(QUICK);
    args.extend(["--out-dir", dir.to_str().unwrap()]);
    ok(&harvest(&args, tmp));
    dir.join("policy.ckpt")
}

#[test]
fn eval_reports_one_row_per_trial() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained_policy(tmp.path());
    let dir = tmp.path().join("eval");
    let out = harvest(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--noise",
            "random",
            "--eps",
            "0.025",
            "--trials",
            "100",
            "--out-dir",
            dir.to_str().unwrap(),
        ],
        tmp.path(),
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains(" ± "));
    let trials = fs::read_to_string(dir.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 101);
    assert!(dir.join("summary.csv").is_file());
}

#[test]
fn adversarial_eval_needs_an_adversary() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained_policy(tmp.path());
    let out = harvest(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--noise", "adv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("adversary"));

    let dir = tmp.path().join("fit");
    let out = harvest(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--noise",
            "adv",
            "--fit-adversary",
            "--fit-episodes",
            "2",
            "--fit-steps",
            "5",
            "--trials",
            "3",
            "--out-dir",
            dir.to_str().unwrap(),
        ],
        tmp.path(),
    );
    ok(&out);
    assert!(dir.join("adversary.ckpt").is_file());
}

#[test]
fn missing_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = harvest(&["eval", "--checkpoint", "/nonexistent/policy.ckpt"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn astar_exports_plan_and_expansions() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = micro_scenario(tmp.path());
    let dir = tmp.path().join("astar");
    ok(&harvest(
        &["plan", "astar", "--scenario", sc.to_str().unwrap(), "--budget", "1000000", "--out-dir", dir.to_str().unwrap()],
        tmp.path(),
    ));
    assert!(dir.join("plan.csv").is_file());
    assert!(dir.join("expansions.csv").is_file());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["goal_met"], true);
}

#[test]
fn astar_on_trivial_scenario_is_a_time_zero_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = trivial_scenario(tmp.path());
    let dir = tmp.path().join("astar");
    ok(&harvest(&["plan", "astar", "--scenario", sc.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()], tmp.path()));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 0);
    assert_eq!(summary["time"], 0.0);
}

#[test]
fn dqn_writes_greedy_checkpoint_usable_by_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = micro_scenario(tmp.path());
    let dir = tmp.path().join("dqn");
    ok(&harvest(
        &[
            "plan",
            "dqn",
            "--scenario",
            sc.to_str().unwrap(),
            "--seed",
            "3",
            "--total-steps",
            "300",
            "--set",
            "dqn.warmup=50",
            "--set",
            "dqn.hidden=[8]",
            "--out-dir",
            dir.to_str().unwrap(),
        ],
        tmp.path(),
    ));
    let ckpt = dir.join("dqn.ckpt");
    assert!(ckpt.is_file());
    let eval_dir = tmp.path().join("eval");
    ok(&harvest(
        &[
            "eval",
            "--scenario",
            sc.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--trials",
            "2",
            "--out-dir",
            eval_dir.to_str().unwrap(),
        ],
        tmp.path(),
    ));
}

#[test]
fn plot_is_byte_stable_and_rejects_bad_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = micro_scenario(tmp.path());
    let astar = tmp.path().join("astar");
    ok(&harvest(&["plan", "astar", "--scenario", sc.to_str().unwrap(), "--out-dir", astar.to_str().unwrap()], tmp.path()));
    let plan = astar.join("plan.csv");
    let render = |name: &str| {
        let dir = tmp.path().join(name);
        ok(&harvest(
            &["plot", "--scenario", sc.to_str().unwrap(), "--trajectory", plan.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()],
            tmp.path(),
        ));
        fs::read(dir.join("plot.svg")).unwrap()
    };
    let a = render("p1");
    assert_eq!(a, render("p2"));
    assert!(String::from_utf8_lossy(&a).contains("<polyline"));

    let empty = tmp.path().join("empty");
    ok(&harvest(&["plot", "--scenario", sc.to_str().unwrap(), "--out-dir", empty.to_str().unwrap()], tmp.path()));
    assert!(!fs::read_to_string(empty.join("plot.svg")).unwrap().contains("<polyline"));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "step,agent_id,x,y,rho,alpha\n0,0,abc,0,,\n").unwrap();
    let out = harvest(&["plot", "--trajectory", bad.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_output_lands_under_harvest_out() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&harvest(&["validate", "--scenario", "builtin:config2"], tmp.path()));
    let dirs: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].file_name().unwrap().to_str().unwrap().starts_with("validate-"));
    assert!(dirs[0].join("manifest.json").is_file());
}

#[test]
fn validate_rejects_broken_scenarios() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(
        &path,
        r#"{"targets": [], "agents": [{"start": [0,0], "final": [1,1], "height": 0.5, "max_speed": 1.0}], "n_max": 4, "dt": 1.0}"#,
    )
    .unwrap();
    let out = harvest(&["validate", "--scenario", path.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_trains_every_seed_and_set() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("sweep.json");
    fs::write(
        &file,
        r#"{"seeds": [0, 1], "sets": [{"name": "lag", "set": {}}, {"name": "none", "set": {"scheme": "none"}}]}"#,
    )
    .unwrap();
    let dir = tmp.path().join("sweep");
    let mut args = vec!["sweep", "--file", file.to_str().unwrap()];
    args.extend(QUICK);
    args.extend(["--out-dir", dir.to_str().unwrap()]);
    ok(&harvest(&args, tmp.path()));
    let rows = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);
    assert!(dir.join("none").join("seed-1").join("policy.ckpt").is_file());
}
