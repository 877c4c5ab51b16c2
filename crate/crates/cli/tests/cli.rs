use std::path::Path;
use std::process::{Command, Output};

use clothfit::io::{read_labels, ResultsFile, RunManifest, TargetManifest};

fn clothfit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clothfit"))
        .args(args)
        .current_dir(dir)
        .env_remove("CLOTHFIT_OUT_ROOT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_target_writes_every_frame_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "a2"] {
        let o = clothfit(d, &["gen-target", "lift", "--params", "2,3", "--seed", "4", "--noise", "0.001", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let frames = std::fs::read_dir(d.join("a")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "xyz")).count();
    assert_eq!(frames, 26);
    let m: TargetManifest = read(&d.join("a/manifest.json"));
    assert_eq!(m.meta.true_params, Some([2.0, 3.0]));
    assert_eq!(m.run.unwrap().command, "gen-target");
    for f in 0..26 {
        let name = format!("frame_{f:04}.xyz");
        assert_eq!(std::fs::read(d.join("a").join(&name)).unwrap(), std::fs::read(d.join("a2").join(&name)).unwrap());
    }
    // identical invocations give identical bytes, manifest included
    let before = std::fs::read(d.join("a/manifest.json")).unwrap();
    clothfit(d, &["gen-target", "lift", "--params", "2,3", "--seed", "4", "--noise", "0.001", "--out", "a"]);
    assert_eq!(before, std::fs::read(d.join("a/manifest.json")).unwrap());
}

#[test]
fn validation_and_io_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&clothfit(d, &["gen-target", "lift", "--params", "11,3", "--out", "x"])), 1);
    assert_eq!(code(&clothfit(d, &["gen-target", "lift", "--params", "2;3"])), 1);
    assert_eq!(code(&clothfit(d, &["gen-target", "nope.json", "--params", "2,3"])), 3);
    assert_eq!(code(&clothfit(d, &["evaluate", "lift", "missing", "--params", "1,1"])), 3);
    assert_eq!(code(&clothfit(d, &["frobnicate"])), 1);
    assert_eq!(code(&clothfit(d, &["--help"])), 0);

    std::fs::write(d.join("typo.json"), r#"{"name": "x", "horizon": 3}"#).unwrap();
    let o = clothfit(d, &["gen-target", "typo.json", "--params", "1,1"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));

    let mut spec = clothfit::scenarios::make_lift();
    spec.substeps_per_frame = Some(2);
    std::fs::write(d.join("coarse.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let o = clothfit(d, &["gen-target", "coarse.json", "--params", "1,1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("substeps_per_frame"));
}

#[test]
fn evaluate_prints_one_number() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    clothfit(d, &["gen-target", "lift", "--params", "2,3", "--seed", "1", "--out", "t"]);
    let a = clothfit(d, &["evaluate", "lift", "t", "--params", "2,3"]);
    assert_eq!(code(&a), 0);
    let loss: f64 = stdout(&a).trim().parse().unwrap();
    assert!(loss < 5e-4);
    assert_eq!(stdout(&a), stdout(&clothfit(d, &["evaluate", "lift", "t", "--params", "2,3"])));
    assert_eq!(code(&clothfit(d, &["evaluate", "lift", "t", "--params", "2"])), 1);
    let short = clothfit::scenarios::make_lift().downscaled(3, 10).unwrap();
    std::fs::write(d.join("short.json"), serde_json::to_string(&short).unwrap()).unwrap();
    let o = clothfit(d, &["evaluate", "short.json", "t", "--params", "2,3"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));
}

#[test]
fn estimate_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    clothfit(d, &["gen-target", "lift", "--params", "2,3", "--seed", "1", "--out", "t"]);
    let o = clothfit(d, &["estimate", "lift", "t", "--iters", "1", "--out", "e"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: ResultsFile = read(&d.join("e/results.json"));
    assert_eq!(r.history.len(), 1);
    assert_eq!(r.termination, "budget");
    let curve = std::fs::read_to_string(d.join("e/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "iteration,loss,w_stiff,w_mass");
    assert_eq!(curve.lines().count(), 2);
    let m: RunManifest = read(&d.join("e/manifest.json"));
    assert_eq!(m.command, "estimate");
    assert_eq!(m.config["max_iterations"], 1);

    clothfit(d, &["gen-target", "lift", "--params", "5.05,5.05", "--seed", "1", "--out", "mid"]);
    let o = clothfit(d, &["estimate", "lift", "mid", "--threshold", "5e-4", "--out", "e2"]);
    assert_eq!(code(&o), 0);
    let r: ResultsFile = read(&d.join("e2/results.json"));
    assert_eq!((r.history.len(), r.termination.as_str()), (1, "threshold"));
}

#[test]
fn gradcheck_exit_status_follows_the_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ok = clothfit(d, &["gradcheck", "lift", "--resolution", "3", "--horizon", "10", "--tolerance", "1e-3"]);
    assert_eq!(code(&ok), 0);
    assert_eq!(stdout(&ok).lines().count(), 5);
    assert_eq!(stdout(&ok), stdout(&clothfit(d, &["gradcheck", "lift"])));
    assert_ne!(code(&clothfit(d, &["gradcheck", "lift", "--tolerance", "1e-12"])), 0);
    assert_eq!(code(&clothfit(d, &["gradcheck", "lift", "--resolution", "7"])), 1);
    assert_eq!(code(&clothfit(d, &["gradcheck", "lift", "--horizon", "16"])), 1);
}

#[test]
fn dataset_scenario_and_rollout() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&clothfit(d, &["scenario", "lift", "--out", "lift.json"])), 0);
    let mut spec: clothfit::scenarios::ScenarioSpec = read(&d.join("lift.json"));
    spec.mesh.nx = 4;
    spec.mesh.ny = 4;
    spec.points_per_frame = 300;
    std::fs::write(d.join("small.json"), serde_json::to_string(&spec).unwrap()).unwrap();

    let o = Command::new(env!("CARGO_BIN_EXE_clothfit"))
        .args(["gen-dataset", "small.json", "--train", "2", "--test", "1", "--seed", "3"])
        .current_dir(d)
        .env("CLOTHFIT_OUT_ROOT", "runs")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = d.join("runs/dataset-lift-seed3");
    let labels = read_labels(&out.join("labels.csv")).unwrap();
    assert_eq!(labels.len(), 3);
    for l in &labels {
        assert!(out.join(&l.id).join("frame_0025.xyz").exists());
    }
    let m: RunManifest = read(&out.join("manifest.json"));
    assert_eq!(m.command, "gen-dataset");

    let o = clothfit(d, &["rollout", "small.json", "--params", "1,1", "--out", "r"]);
    assert_eq!(code(&o), 0);
    assert!(d.join("r/frame_0025.ply").exists() && d.join("r/manifest.json").exists());
}
