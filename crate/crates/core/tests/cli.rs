use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use followbench::baselines::{ModelParams, PhysicsModel};
use followbench::cli::Manifest;
use followbench::metrics::EvalReport;

fn followbench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_followbench"))
        .current_dir(dir)
        .env_remove("FOLLOWBENCH_API_KEY")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: &str, seed: &str) {
    let o = followbench(dir, &["synth", "--n", n, "--seed", seed, "--out", "events.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn calibrate_writes_params_in_bounds() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3", "7");
    let o = followbench(
        dir.path(),
        &["calibrate", "--model", "idm", "--data", "events.csv", "--seed", "7", "--generations", "5", "--population", "12", "--out", "cal"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let params: ModelParams =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cal/params_idm.json")).unwrap()).unwrap();
    assert_eq!(params.model(), PhysicsModel::Idm);
    params.check_bounds().unwrap();
    assert_eq!(params.to_vec().len(), 6);
    let history = fs::read_to_string(dir.path().join("cal/fitness_history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "generation,best_fitness");
    assert_eq!(lines.len(), 6);
    assert!(dir.path().join("cal/run_manifest.json").exists());
}

#[test]
fn calibrate_per_event_writes_one_fit_per_event() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2", "3");
    let o = followbench(
        dir.path(),
        &["calibrate", "--model", "ghr", "--data", "events.csv", "--generations", "2", "--population", "6", "--per-event", "--out", "cal"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let fits: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cal/params_ghr_per_event.json")).unwrap()).unwrap();
    assert_eq!(fits.as_array().unwrap().len(), 2);
    let history = fs::read_to_string(dir.path().join("cal/fitness_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2 * 2);
}

#[test]
fn unsupported_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "1");
    let o = followbench(dir.path(), &["calibrate", "--model", "lstm", "--data", "events.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unsupported model"));
    let o = followbench(dir.path(), &["benchmark", "--models", "idm,lstm", "--data", "events.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unsupported model"));
    // only physics models calibrate
    let o = followbench(dir.path(), &["calibrate", "--model", "genfollower", "--data", "events.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = followbench(dir.path(), &["calibrate", "--model", "idm", "--data", "no/such/events.csv"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no/such/events.csv"));
}

#[test]
fn invalid_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.csv"),
        "event_id,t,spacing,lv_speed,fv_speed\na,0.0,10,5,5\na,0.1,10,-1,5\n",
    )
    .unwrap();
    let o = followbench(dir.path(), &["benchmark", "--models", "idm", "--data", "bad.csv"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("negative speed"));
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "1");
    for args in [
        vec!["benchmark", "--data", "events.csv"],
        vec!["benchmark", "--models", "idm,idm", "--data", "events.csv"],
        vec!["benchmark", "--models", "idm", "--data", "events.csv", "--ttc-agg", "max"],
        vec!["benchmark", "--models", "idm", "--data", "events.csv", "--warmup", "soon"],
        vec!["export-finetune", "--data", "events.csv", "--n", "0"],
        vec!["export-finetune", "--data", "events.csv", "--n", "-4"],
        vec!["export-finetune", "--data", "events.csv", "--n", "1000"],
        vec!["calibrate", "--model", "idm", "--data", "events.csv", "--population", "1"],
        vec!["frobnicate"],
    ] {
        let o = followbench(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn remote_backend_without_key_is_a_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "1");
    let o = followbench(
        dir.path(),
        &["benchmark", "--models", "genfollower", "--data", "events.csv", "--backend", "remote", "--base-url", "http://127.0.0.1:9/v1"],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("FOLLOWBENCH_API_KEY"));
    // remote without a URL is a config problem
    let o = followbench(dir.path(), &["benchmark", "--models", "genfollower", "--data", "events.csv", "--backend", "remote"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn benchmark_outputs_and_table() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "10", "7");
    let o = followbench(
        dir.path(),
        &["benchmark", "--models", "idm,genfollower,playback", "--data", "events.csv", "--seed", "7", "--out", "run", "--jobs", "2"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0].split(" | ").map(str::trim).collect::<Vec<_>>(), [
        "Model",
        "MSE of Spacing ↓",
        "Collision Rate % ↓",
        "Minimum TTC ↑"
    ]);
    assert!(lines[2].starts_with("idm"));
    assert!(lines[3].starts_with("genfollower"));
    assert!(lines[4].starts_with("playback"));

    let run = dir.path().join("run");
    let reports: Vec<EvalReport> = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 3);
    let playback = &reports[2];
    assert!(playback.mse_spacing < 1e-12);
    assert_eq!(playback.collision_rate, 0.0);
    assert!(reports.iter().all(|r| r.n_events == 10 && r.n_failed == 0));

    let csv = fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for model in ["idm", "genfollower", "playback"] {
        let n = fs::read_dir(run.join("trajectories").join(model)).unwrap().count();
        assert_eq!(n, 10);
    }
    let traj = fs::read_to_string(run.join("trajectories/idm/synth-7-0000.csv")).unwrap();
    assert!(traj.starts_with("event_id,t,spacing_sim,fv_speed_sim,lv_speed,rel_speed_sim,collided"));
    assert_eq!(traj.lines().count(), 1 + 151);
    assert!(run.join("llm_outcomes_genfollower.csv").exists());
    assert_eq!(fs::read_to_string(run.join("table.txt")).unwrap(), table);
}

#[test]
fn manifest_replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "4", "11");
    let o = followbench(
        dir.path(),
        &["benchmark", "--models", "genfollower,idm", "--data", "events.csv", "--seed", "11", "--out", "a", "--ttc-agg", "median"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = Manifest::load(&dir.path().join("a/run_manifest.json")).unwrap();
    assert_eq!(manifest.command, "benchmark");
    assert_eq!(manifest.seed, 11);
    assert_eq!(manifest.settings.get("ttc_agg"), Some("median"));
    let text = fs::read_to_string(dir.path().join("a/run_manifest.json")).unwrap();
    assert!(!text.contains("time"));

    let o = followbench(dir.path(), &["benchmark", "--from-manifest", "a/run_manifest.json", "--out", "b"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.json", "report.csv", "table.txt", "llm_outcomes_genfollower.csv", "trajectories/genfollower/synth-11-0002.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    // a manifest from one command cannot drive another
    let o = followbench(dir.path(), &["calibrate", "--from-manifest", "a/run_manifest.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2", "5");
    fs::write(
        dir.path().join("run.conf"),
        "# benchmark settings\ndata = events.csv\nmodels = idm, constant\nout = from-config\nttc-agg = global-min\n",
    )
    .unwrap();
    let o = followbench(dir.path(), &["benchmark", "--config", "run.conf", "--models", "playback"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports: Vec<EvalReport> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("from-config/report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].model_name, "playback");
    assert_eq!(reports[0].ttc_aggregation.to_string(), "global-min");

    fs::write(dir.path().join("bad.conf"), "speed = 3\n").unwrap();
    let o = followbench(dir.path(), &["benchmark", "--config", "bad.conf"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn partial_failures_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    // the second event is shorter than the warmup, so it fails and is excluded
    let mut text = String::from("event_id,t,spacing,lv_speed,fv_speed\n");
    for i in 0..100 {
        text.push_str(&format!("long,{:.1},20,10,10\n", i as f64 * 0.1));
    }
    for i in 0..20 {
        text.push_str(&format!("short,{:.1},20,10,10\n", i as f64 * 0.1));
    }
    fs::write(dir.path().join("mixed.csv"), text).unwrap();
    let o = followbench(dir.path(), &["simulate", "--model", "idm", "--data", "mixed.csv", "--out", "sim"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reports: Vec<EvalReport> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sim/report.json")).unwrap()).unwrap();
    assert_eq!(reports[0].n_events, 1);
    assert_eq!(reports[0].n_failed, 1);
    assert_eq!(reports[0].failures[0].event_id, "short");
    assert!(String::from_utf8_lossy(&o.stdout).contains("1 event(s) failed"));
}

#[test]
fn export_finetune_reparses() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "5", "2");
    let o = followbench(dir.path(), &["export-finetune", "--data", "events.csv", "--out", "ft/train.jsonl", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("ft/train.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 50);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let roles: Vec<&str> = v["messages"].as_array().unwrap().iter().map(|m| m["role"].as_str().unwrap()).collect();
        assert_eq!(roles, ["system", "user", "assistant"]);
    }
    assert!(dir.path().join("ft/train.jsonl.manifest.json").exists());
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(followbench(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(followbench(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(followbench(dir.path(), &[]).status.code(), Some(2));
}
