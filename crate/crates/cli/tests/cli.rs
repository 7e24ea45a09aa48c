use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmw_slam::io::{read_brsrp, read_json};
use mmw_slam::metrics::EvalReport;
use mmw_slam::pipeline::{simulate_position, PipelineConfig};
use mmw_slam::slam::TrajectoryStep;
use mmw_slam::Scene;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmw-slam"))
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out-dir").arg(out).output().expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> Output {
    let o = run(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// First `n` points of the bundled scene, written as a scene file.
fn short_scene(dir: &Path, n: usize, edit: impl FnOnce(&mut Scene)) -> PathBuf {
    let mut s = Scene::default_indoor(7);
    s.ue_trajectory.truncate(n);
    s.bias_trajectory.truncate(n);
    s.los_blocked.retain(|k| *k < n);
    edit(&mut s);
    let p = dir.join("scene.json");
    fs::write(&p, serde_json::to_string(&s).unwrap()).unwrap();
    p
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut m = BTreeMap::new();
    walk(root, root, &mut m);
    m
}

#[test]
fn simulate_is_byte_identical_and_writes_one_map_per_position() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--seed", "11"], &a);
    ok(&["simulate", "--seed", "11"], &b);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa, sb);
    let maps = sa.keys().filter(|p| p.starts_with("maps") && p.extension().is_some_and(|e| e == "bin")).count();
    assert_eq!(maps, 45);
}

#[test]
fn simulated_maps_round_trip_losslessly() {
    let tmp = TempDir::new().unwrap();
    let scene_path = short_scene(tmp.path(), 4, |_| {});
    let out = tmp.path().join("run");
    ok(&["simulate", "--seed", "3", "--scene", scene_path.to_str().unwrap(), "--map-csv"], &out);
    let scene: Scene = read_json(&out.join("scene.json")).unwrap();
    let cfg: PipelineConfig = read_json(&out.join("config.json")).unwrap();
    for k in 0..scene.len() {
        let expected = simulate_position(&scene, k, &cfg, 3).unwrap();
        let map = read_brsrp(&out.join(format!("maps/pos_{k:03}.bin")), cfg.codebook.clone()).unwrap();
        assert_eq!(map, expected.map);
        assert!(out.join(format!("maps/pos_{k:03}.csv")).is_file());
    }
}

#[test]
fn missing_scene_file_is_a_config_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["simulate", "--scene", "/no/such/scene.json"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/scene.json"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(run(&["simulate", "--power-ratio", "150"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--method", "music"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--outlier-rate", "1.5"], tmp.path()).status.code(), Some(1));
}

#[test]
fn later_stages_need_their_inputs() {
    let tmp = TempDir::new().unwrap();
    for stage in ["estimate", "slam", "eval"] {
        let o = run(&[stage], tmp.path());
        assert_eq!(o.status.code(), Some(2), "{stage}");
        assert!(stderr(&o).contains("manifest_simulate.json"), "{}", stderr(&o));
    }
}

#[test]
fn estimate_emits_labelled_series() {
    let tmp = TempDir::new().unwrap();
    let scene_path = short_scene(tmp.path(), 5, |_| {});
    let out = tmp.path().join("run");
    ok(&["simulate", "--scene", scene_path.to_str().unwrap()], &out);
    ok(&["estimate", "--threshold-sweep", "--power-ratio", "99"], &out);

    let mut rdr = csv::Reader::from_path(out.join("estimate/gospa.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let series: std::collections::BTreeSet<(String, String)> =
        rows.iter().map(|r| (r[1].to_string(), r[3].to_string())).collect();
    // three SVD threshold levels plus CFAR
    assert_eq!(series.len(), 4, "{series:?}");
    assert!(series.iter().any(|(m, _)| m == "cfar"));
    assert_eq!(series.iter().filter(|(m, _)| m == "svd").count(), 3);

    // pre-threshold candidates never shrink as the power ratio grows
    let mut rdr = csv::Reader::from_path(out.join("estimate/candidates.csv")).unwrap();
    let mut by_pos: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    for r in rdr.records() {
        let r = r.unwrap();
        by_pos.entry(r[0].parse().unwrap()).or_default().push((r[1].parse().unwrap(), r[2].parse().unwrap()));
    }
    assert_eq!(by_pos.len(), 5);
    for rows in by_pos.values_mut() {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(rows.windows(2).all(|w| w[1].1 >= w[0].1), "{rows:?}");
    }
}

#[test]
fn known_bias_on_noiseless_scene_is_exact() {
    let tmp = TempDir::new().unwrap();
    let scene_path = short_scene(tmp.path(), 8, |_| {});
    let out = tmp.path().join("run");
    ok(&["simulate", "--noiseless", "--scene", scene_path.to_str().unwrap()], &out);
    ok(&["slam", "--source", "measurements", "--known-bias"], &out);
    ok(&["eval"], &out);
    let report: EvalReport = read_json(&out.join("eval/report.json")).unwrap();
    assert_eq!(report.trajectory.evaluated, 8);
    assert!(report.trajectory.position.rmse < 1e-3, "{}", report.trajectory.position.rmse);
    let summary = fs::read_to_string(out.join("eval/summary.csv")).unwrap();
    assert!(summary.starts_with("statistic,position,heading,bias,time\n"));
}

#[test]
fn unidentifiable_first_position_is_recorded_and_the_run_continues() {
    let tmp = TempDir::new().unwrap();
    // one reflector and no direct path: three equations for four unknowns
    let scene_path = short_scene(tmp.path(), 4, |s| {
        s.landmarks.truncate(1);
        s.reflection.truncate(1);
        s.los_blocked = vec![0];
    });
    let out = tmp.path().join("run");
    ok(&["simulate", "--scene", scene_path.to_str().unwrap()], &out);
    ok(&["slam", "--source", "measurements", "--ablation", "ofv0"], &out);
    let steps: Vec<TrajectoryStep> = read_json(&out.join("slam/steps.json")).unwrap();
    assert!(steps[0].solution.is_none());
    let msg = steps[0].error.as_deref().unwrap();
    assert!(msg.contains("rank deficient"), "{msg}");
    assert!(steps[1..].iter().all(|s| s.solution.is_some()));
    let csv = fs::read_to_string(out.join("slam/trajectory.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("0,false"));
}

#[test]
fn slam_and_eval_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let scene_path = short_scene(tmp.path(), 6, |_| {});
    let out = tmp.path().join("run");
    let scene = scene_path.to_str().unwrap();
    ok(&["run-all", "--scene", scene, "--method", "svd", "--power-ratio", "99"], &out);
    let steps = fs::read(out.join("slam/steps.json")).unwrap();
    let report = fs::read(out.join("eval/report.json")).unwrap();
    ok(&["eval"], &out);
    assert_eq!(fs::read(out.join("eval/report.json")).unwrap(), report);
    ok(&["slam", "--method", "svd", "--power-ratio", "99"], &out);
    assert_eq!(fs::read(out.join("slam/steps.json")).unwrap(), steps);
    let r: EvalReport = read_json(&out.join("eval/report.json")).unwrap();
    assert_eq!(r.positions.len(), 6);
    assert!(r.positions.iter().all(|p| p.gospa.is_some() && p.slfd.is_some()));
}

#[test]
fn mismatched_manifests_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let scene_path = short_scene(tmp.path(), 3, |_| {});
    let out = tmp.path().join("run");
    let scene = scene_path.to_str().unwrap();
    ok(&["run-all", "--scene", scene, "--method", "svd", "--power-ratio", "99", "--seed", "5"], &out);
    let o = run(&["eval", "--seed", "6"], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
    // a fresh simulation invalidates the downstream stages
    ok(&["simulate", "--scene", scene, "--seed", "6"], &out);
    let o = run(&["eval"], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest"), "{}", stderr(&o));
}
