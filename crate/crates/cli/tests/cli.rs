use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sceneal::kitti::write_pool_dir;
use sceneal::{Box3D, Scene, ScoredDetection};

fn sceneal(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sceneal"));
    cmd.current_dir(dir).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn car(x: f64) -> ScoredDetection {
    ScoredDetection::new(
        "Car",
        0.9,
        Box3D {
            x,
            y: 1.0,
            z: 0.0,
            w: 1.6,
            l: 3.9,
            h: 1.5,
            theta: 0.0,
        },
    )
}

const SMALL: [(&str, &str); 2] = [("SCENEAL_SYNTH_N_SCENES", "20"), ("SCENEAL_PLAN_N_R", "2")];

#[test]
fn score_entropy_is_sorted_by_id() {
    let dir = tempfile::tempdir().unwrap();
    let ped = ScoredDetection::new(
        "Pedestrian",
        0.8,
        Box3D {
            x: 5.0,
            y: 0.0,
            z: 0.0,
            w: 0.6,
            l: 0.8,
            h: 1.7,
            theta: 0.0,
        },
    );
    let scenes = vec![
        Scene::new("c", vec![car(10.0), ped]),
        Scene::new("a", vec![car(10.0)]),
        Scene::new("b", vec![]),
    ];
    write_pool_dir(&dir.path().join("pool"), &scenes, false).unwrap();
    ok(&sceneal(
        dir.path(),
        &["score", "--pool", "pool", "--metric", "entropy", "--output", "e.csv"],
        &[],
    ));
    let text = fs::read_to_string(dir.path().join("e.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], "scene_id,entropy");
    assert!(rows[1].starts_with("a,0.0"));
    assert!(rows[2].starts_with("b,0.0"));
    let e: f64 = rows[3].strip_prefix("c,").unwrap().parse().unwrap();
    assert!((e - 2f64.ln()).abs() < 1e-9);
}

#[test]
fn score_similarity_of_one_scene() {
    let dir = tempfile::tempdir().unwrap();
    write_pool_dir(&dir.path().join("pool"), &[Scene::new("only", vec![car(8.0)])], false).unwrap();
    ok(&sceneal(
        dir.path(),
        &["--out", "o", "score", "--pool", "pool", "--metric", "similarity"],
        &[],
    ));
    let text = fs::read_to_string(dir.path().join("o/similarity.csv")).unwrap();
    assert_eq!(text, "scene_id,only\nonly,1.000000000000\n");
}

#[test]
fn score_uncertainty_requires_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    ok(&sceneal(dir.path(), &["--seed", "3", "--out", "syn", "synth"], &SMALL));
    let out = sceneal(
        dir.path(),
        &["score", "--pool", "syn/gt", "--metric", "uncertainty"],
        &SMALL,
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("000000.mdn"), "{}", stderr(&out));

    ok(&sceneal(
        dir.path(),
        &["--out", "o", "score", "--pool", "syn/pred", "--metric", "uncertainty"],
        &SMALL,
    ));
    let text = fs::read_to_string(dir.path().join("o/uncertainty.csv")).unwrap();
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn select_init_then_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sceneal(d, &["--seed", "5", "--out", "syn", "synth"], &SMALL));
    ok(&sceneal(
        d,
        &[
            "--seed", "5", "select", "--pool", "syn/pred", "--state", "s.json", "--init", "--n0", "4",
        ],
        &SMALL,
    ));
    let state = sceneal::load_round_state(&d.join("s.json")).unwrap();
    assert_eq!((state.labeled_ids.len(), state.unlabeled_ids.len()), (4, 16));

    fs::copy(d.join("s.json"), d.join("s0.json")).unwrap();
    ok(&sceneal(
        d,
        &["--out", "r1", "select", "--pool", "syn/pred", "--state", "s.json"],
        &SMALL,
    ));
    ok(&sceneal(
        d,
        &["--out", "r1b", "select", "--pool", "syn/pred", "--state", "s0.json"],
        &SMALL,
    ));
    let sel = fs::read_to_string(d.join("r1/selected_round_1.txt")).unwrap();
    assert_eq!(sel, fs::read_to_string(d.join("r1b/selected_round_1.txt")).unwrap());
    assert_eq!(sel.lines().count(), 2);

    let log = fs::read_to_string(d.join("r1/stage_log_round_1.csv")).unwrap();
    let sizes: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(sizes, ["6", "5", "2"]);

    let state = sceneal::load_round_state(&d.join("s.json")).unwrap();
    assert_eq!(
        (state.round_index, state.labeled_ids.len(), state.unlabeled_ids.len()),
        (1, 6, 14)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("r1/report_round_1.json")).unwrap()).unwrap();
    assert_eq!(report["round"]["selected"].as_array().unwrap().len(), 2);
}

#[test]
fn select_reports_exhausted_pool() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let env = [
        ("SCENEAL_SYNTH_N_SCENES", "10"),
        ("SCENEAL_PLAN_N_R", "4"),
        ("SCENEAL_PLAN_BUDGET", "100"),
    ];
    ok(&sceneal(d, &["--out", "syn", "synth"], &env));
    ok(&sceneal(
        d,
        &[
            "select", "--pool", "syn/pred", "--state", "s.json", "--init", "--n0", "2",
        ],
        &env,
    ));
    ok(&sceneal(
        d,
        &["select", "--pool", "syn/pred", "--state", "s.json"],
        &env,
    ));
    ok(&sceneal(
        d,
        &["select", "--pool", "syn/pred", "--state", "s.json"],
        &env,
    ));
    let out = sceneal(d, &["select", "--pool", "syn/pred", "--state", "s.json"], &env);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("insufficient pool"), "{}", stderr(&out));
}

#[test]
fn simulate_writes_one_directory_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let env = [("SCENEAL_SYNTH_N_SCENES", "60"), ("SCENEAL_PLAN_N_R", "3")];
    ok(&sceneal(
        dir.path(),
        &["--out", "sim", "simulate", "--strategies", "random,joint"],
        &env,
    ));
    let sim = dir.path().join("sim");
    for s in ["random", "joint"] {
        for f in ["rounds.csv", "stage_log.csv", "selected.txt", "report.json"] {
            assert!(sim.join(s).join(f).is_file(), "{s}/{f}");
        }
    }
    let cmp = fs::read_to_string(sim.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = cmp.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("random,")).count(), 3);
    assert_eq!(rows.iter().filter(|r| r.starts_with("joint,")).count(), 3);
    assert_eq!(
        fs::read_to_string(sim.join("joint/selected.txt"))
            .unwrap()
            .lines()
            .count(),
        9
    );
}

#[test]
fn simulate_rejects_unknown_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let out = sceneal(dir.path(), &["simulate", "--strategies", "random,greedy"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["random", "entropy-only", "fs-only", "uncertainty-only", "joint"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn stats_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let env = [("SCENEAL_SYNTH_N_SCENES", "200")];
    ok(&sceneal(d, &["--seed", "9", "--out", "syn", "synth"], &env));

    fs::write(d.join("empty.txt"), "").unwrap();
    ok(&sceneal(
        d,
        &["--out", "e", "stats", "--pool", "syn/gt", "--selection", "empty.txt"],
        &env,
    ));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("e/summary.json")).unwrap()).unwrap();
    assert_eq!(s["box_count"], 0);
    assert_eq!(s["selected_count"], 0);
    assert!(s["category_kl"].is_null());

    ok(&sceneal(d, &["--out", "a", "stats", "--pool", "syn/pred"], &env));
    ok(&sceneal(d, &["--out", "b", "stats", "--pool", "syn/pred"], &env));
    for f in [
        "class_histogram.csv",
        "uncertainty_histogram.csv",
        "similarity_samples.dat",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }

    let half: String = (0..100).map(|i| format!("{i:06}\n")).collect();
    fs::write(d.join("half.txt"), half).unwrap();
    ok(&sceneal(d, &["--out", "full", "stats", "--pool", "syn/gt"], &env));
    ok(&sceneal(
        d,
        &["--out", "half", "stats", "--pool", "syn/gt", "--selection", "half.txt"],
        &env,
    ));
    let boxes = |dir: &str| -> f64 {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join(dir).join("summary.json")).unwrap()).unwrap();
        v["box_count"].as_f64().unwrap()
    };
    let ratio = boxes("half") / boxes("full");
    assert!((ratio - 0.5).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sceneal(dir.path(), &["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(
        sceneal(dir.path(), &["score", "--pool", "x"], &[]).status.code(),
        Some(2)
    );
    assert_eq!(
        sceneal(dir.path(), &["synth"], &[("SCENEAL_KERNEL_GAMMA", "2.0")])
            .status
            .code(),
        Some(2)
    );
    fs::write(dir.path().join("c.toml"), "[kernel]\nbandwidth = 1.0\n").unwrap();
    let out = sceneal(dir.path(), &["--config", "c.toml", "synth"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bandwidth"));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sceneal(d, &["--seed", "4", "--out", "a", "synth"], &SMALL));
    ok(&sceneal(d, &["--seed", "4", "--out", "b", "synth"], &SMALL));
    ok(&sceneal(d, &["--seed", "5", "--out", "c", "synth"], &SMALL));
    for f in ["gt/000007.txt", "pred/000007.txt", "pred/000007.mdn"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(d.join("a/gt/000007.txt")).unwrap(),
        fs::read(d.join("c/gt/000007.txt")).unwrap()
    );
}
