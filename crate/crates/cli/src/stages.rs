//! Stage drivers. Every stage reads its inputs from `--out-dir`, writes its
//! outputs there and records a manifest.
//!
//! Layout:
//! ```text
//! manifest_<stage>.json
//! scene.json  config.json  truth.csv  paths.json  measurements.json
//! maps/pos_NNN.bin          (and pos_NNN.csv with --map-csv)
//! estimate/<label>.json     estimates.csv  gospa.csv  candidates.csv
//! slam/steps.json           trajectory.csv  timing.csv
//! eval/report.json          report.csv  summary.csv
//! ```

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mmw_slam::io::{
    read_brsrp, read_csv_rows, read_json, report_rows, write_brsrp, write_csv_rows, write_json, write_matrix_csv,
    write_summary_csv, EstimateRow,
};
use mmw_slam::metrics::EvalReport;
use mmw_slam::pipeline::{
    candidate_count, estimate_position, evaluate_estimates, run_slam, simulate_position, synthetic_measurements,
    Method, PipelineConfig, PositionData, PositionEstimates,
};
use mmw_slam::simulate::OutlierModel;
use mmw_slam::slam::TrajectoryStep;
use mmw_slam::{diagonal_covariance, Measurement, PathTruth, Scene, UeState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{reconcile_seed, RunArgs, Source, POWER_RATIOS, THRESHOLD_SWEEP};
use crate::manifest::{hash_json, Manifest};
use crate::{Classify, Outcome};

/// Artifacts of a finished simulate stage.
struct Simulated {
    out: PathBuf,
    seed: u64,
    scene: Scene,
    config: PipelineConfig,
    paths: Vec<Vec<PathTruth>>,
    manifest: Manifest,
}

impl Simulated {
    fn load(out: &Path, seed_flag: Option<u64>) -> Outcome<Self> {
        let manifest = Manifest::read(out, "simulate").runtime()?;
        let seed = reconcile_seed(seed_flag, manifest.seed).config()?;
        let scene: Scene = read_json(&out.join("scene.json")).runtime()?;
        if hash_json(&scene).runtime()? != manifest.scene_hash {
            return Err(anyhow!("{}: does not match the simulate manifest", out.join("scene.json").display())).config();
        }
        Ok(Self {
            out: out.to_path_buf(),
            seed,
            config: read_json(&out.join("config.json")).runtime()?,
            paths: read_json(&out.join("paths.json")).runtime()?,
            scene,
            manifest,
        })
    }

    fn map_path(&self, k: usize) -> PathBuf {
        map_path(&self.out, k)
    }

    fn truth(&self) -> Vec<UeState> {
        (0..self.scene.len()).map(|k| self.scene.ue_state(k)).collect()
    }
}

fn map_path(out: &Path, k: usize) -> PathBuf {
    out.join("maps").join(format!("pos_{k:03}.bin"))
}

/// One configuration of the estimate stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Setting {
    method: Method,
    power_ratio: f64,
    threshold_scale: f64,
}

impl Setting {
    fn of(cfg: &PipelineConfig) -> Self {
        Self {
            method: cfg.method,
            power_ratio: cfg.power_ratio,
            threshold_scale: cfg.power_threshold_scale,
        }
    }

    fn label(&self) -> String {
        match self.method {
            Method::Svd => format!("svd_p{}_t{}", self.power_ratio, self.threshold_scale),
            Method::Cfar => "cfar".to_string(),
        }
    }

    fn apply(&self, cfg: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            method: self.method,
            power_ratio: self.power_ratio,
            power_threshold_scale: self.threshold_scale,
            ..cfg.clone()
        }
    }
}

#[derive(Debug, Serialize)]
struct TruthRow {
    position: usize,
    x_m: f64,
    y_m: f64,
    heading_deg: f64,
    bias_m: f64,
    los_blocked: bool,
}

pub fn simulate(args: &RunArgs) -> Outcome<()> {
    let seed = args.seed.unwrap_or(crate::config::DEFAULT_SEED);
    let cfg = args.pipeline(args.base_config()?)?;
    let scene = args.load_scene(seed)?;
    let out = &args.out_dir;
    let scene_hash = hash_json(&scene).runtime()?;
    let manifest = Manifest::new("simulate", seed, &scene_hash, &(&cfg, args.noiseless)).runtime()?;

    let data: Vec<PositionData> = (0..scene.len())
        .into_par_iter()
        .map(|k| simulate_position(&scene, k, &cfg, seed))
        .collect::<Result<_, _>>()
        .runtime()?;
    for d in &data {
        write_brsrp(&map_path(out, d.index), &d.map).runtime()?;
        if args.map_csv {
            write_matrix_csv(&map_path(out, d.index).with_extension("csv"), &d.map.values).runtime()?;
        }
    }
    let paths: Vec<Vec<PathTruth>> = data.into_iter().map(|d| d.paths).collect();

    let r = cfg.measurement_covariance();
    let measurements = if args.noiseless {
        // no noise drawn, but the solver still weights with the nominal R
        let mut z = synthetic_measurements(&scene, &diagonal_covariance(0.0, 0.0, 0.0), &OutlierModel::none(), seed).runtime()?;
        z.iter_mut().flatten().for_each(|m| m.covariance = r);
        z
    } else {
        synthetic_measurements(&scene, &r, &OutlierModel::with_rate(cfg.outlier_rate), seed).runtime()?
    };

    let truth: Vec<TruthRow> = (0..scene.len())
        .map(|k| {
            let s = scene.ue_state(k);
            TruthRow {
                position: k,
                x_m: s.position.x,
                y_m: s.position.y,
                heading_deg: s.heading.to_degrees(),
                bias_m: s.bias,
                los_blocked: scene.los_blocked.contains(&k),
            }
        })
        .collect();
    write_json(&out.join("scene.json"), &scene).runtime()?;
    write_json(&out.join("config.json"), &cfg).runtime()?;
    write_json(&out.join("paths.json"), &paths).runtime()?;
    write_json(&out.join("measurements.json"), &measurements).runtime()?;
    write_csv_rows(&out.join("truth.csv"), &truth).runtime()?;
    manifest.write(out).runtime()?;
    println!("simulate: {} positions, {} maps -> {}", scene.len(), paths.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct GospaRow {
    position: usize,
    method: String,
    power_ratio: f64,
    threshold_scale: f64,
    estimates: usize,
    gospa_deg: f64,
    false_detections: usize,
    missed_detections: usize,
    slfd_count: usize,
    slfd_deg: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateRow {
    position: usize,
    power_ratio: f64,
    candidates: usize,
}

/// Settings requested on the command line: every method and power ratio
/// unless one is pinned.
fn requested_settings(args: &RunArgs, cfg: &PipelineConfig) -> Vec<Setting> {
    let methods = match args.method {
        Some(m) => vec![m.into()],
        None => vec![Method::Svd, Method::Cfar],
    };
    let ratios = match args.power_ratio {
        Some(p) => vec![p],
        None => POWER_RATIOS.to_vec(),
    };
    let scales: Vec<f64> = if args.threshold_sweep {
        THRESHOLD_SWEEP.iter().map(|s| s * cfg.power_threshold_scale).collect()
    } else {
        vec![cfg.power_threshold_scale]
    };
    let mut out = Vec::new();
    for method in methods {
        match method {
            Method::Svd => {
                for &power_ratio in &ratios {
                    for &threshold_scale in &scales {
                        out.push(Setting { method, power_ratio, threshold_scale });
                    }
                }
            }
            Method::Cfar => out.push(Setting::of(&PipelineConfig { method, ..cfg.clone() })),
        }
    }
    out
}

pub fn estimate(args: &RunArgs) -> Outcome<()> {
    let sim = Simulated::load(&args.out_dir, args.seed)?;
    let cfg = args.pipeline(sim.config.clone())?;
    let settings = requested_settings(args, &cfg);
    let out = sim.out.join("estimate");
    let maps: Vec<PositionData> = (0..sim.scene.len())
        .map(|k| {
            let path = sim.map_path(k);
            let map = read_brsrp(&path, sim.config.codebook.clone())?;
            Ok(PositionData { index: k, paths: sim.paths[k].clone(), map })
        })
        .collect::<mmw_slam::Result<_>>()
        .runtime()?;

    let mut rows = Vec::new();
    let mut gospa_rows = Vec::new();
    for s in &settings {
        let scfg = s.apply(&cfg);
        let per_position: Vec<PositionEstimates> = maps
            .par_iter()
            .map(|d| estimate_position(&sim.scene, d, &scfg, sim.seed))
            .collect::<Result<_, _>>()
            .runtime()?;
        for (pe, d) in per_position.iter().zip(&maps) {
            let (g, sl) = evaluate_estimates(&d.paths, &pe.estimates, &scfg.gospa).runtime()?;
            gospa_rows.push(GospaRow {
                position: pe.index,
                method: s.method.name().to_string(),
                power_ratio: s.power_ratio,
                threshold_scale: s.threshold_scale,
                estimates: pe.estimates.len(),
                gospa_deg: g.value,
                false_detections: g.false_detections,
                missed_detections: g.missed_detections,
                slfd_count: sl.count,
                slfd_deg: sl.value,
            });
            rows.extend(
                pe.estimates
                    .iter()
                    .map(|e| EstimateRow::new(pe.index, s.method.name(), s.power_ratio, s.threshold_scale, e)),
            );
        }
        write_json(&out.join(format!("{}.json", s.label())), &per_position).runtime()?;
    }
    let candidates: Vec<CandidateRow> = maps
        .iter()
        .flat_map(|d| {
            POWER_RATIOS.iter().map(move |&p| {
                candidate_count(&d.map, p).map(|c| CandidateRow { position: d.index, power_ratio: p, candidates: c })
            })
        })
        .collect::<Result<_, _>>()
        .runtime()?;
    write_csv_rows(&out.join("estimates.csv"), &rows).runtime()?;
    write_csv_rows(&out.join("gospa.csv"), &gospa_rows).runtime()?;
    write_csv_rows(&out.join("candidates.csv"), &candidates).runtime()?;
    let labels: Vec<String> = settings.iter().map(Setting::label).collect();
    Manifest::new("estimate", sim.seed, &sim.manifest.scene_hash, &(&cfg, &settings))
        .runtime()?
        .with_upstream(&sim.manifest)
        .write(&sim.out)
        .runtime()?;
    println!("estimate: {} setting(s) [{}] -> {}", settings.len(), labels.join(", "), out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SlamSettings {
    config: PipelineConfig,
    source: Source,
    estimate_label: Option<String>,
}

#[derive(Debug, Serialize)]
struct TrajectoryRow {
    position: usize,
    solved: bool,
    x_m: Option<f64>,
    y_m: Option<f64>,
    heading_deg: Option<f64>,
    bias_m: Option<f64>,
    hypothesis: Option<String>,
    error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TimingRow {
    position: usize,
    runtime_s: f64,
}

fn read_estimates(sim: &Simulated, label: &str) -> Outcome<(Vec<PositionEstimates>, Manifest)> {
    let est_manifest = Manifest::read(&sim.out, "estimate").runtime()?;
    est_manifest.check_upstream(&sim.manifest).config()?;
    let path = sim.out.join("estimate").join(format!("{label}.json"));
    if !path.is_file() {
        return Err(anyhow!("{}: no estimates for this setting; rerun estimate with matching flags", path.display()))
            .runtime();
    }
    Ok((read_json(&path).runtime()?, est_manifest))
}

pub fn slam(args: &RunArgs) -> Outcome<()> {
    let sim = Simulated::load(&args.out_dir, args.seed)?;
    let cfg = args.pipeline(sim.config.clone())?;
    let label = Setting::of(&cfg).label();
    let (measurements, upstream): (Vec<Vec<Measurement>>, Option<Manifest>) = match args.source {
        Source::Estimates => {
            let (pe, m) = read_estimates(&sim, &label)?;
            (pe.into_iter().map(|p| p.measurements).collect(), Some(m))
        }
        Source::Measurements => (read_json(&sim.out.join("measurements.json")).runtime()?, None),
    };
    if measurements.len() != sim.scene.len() {
        return Err(anyhow!("{} measurement sets for {} positions", measurements.len(), sim.scene.len())).runtime();
    }
    let (steps, times) = run_slam(&sim.scene, &measurements, &cfg).runtime()?;

    let out = sim.out.join("slam");
    let rows: Vec<TrajectoryRow> = steps
        .iter()
        .enumerate()
        .map(|(k, s)| TrajectoryRow {
            position: k,
            solved: s.solution.is_some(),
            x_m: s.ue.map(|u| u.position.x),
            y_m: s.ue.map(|u| u.position.y),
            heading_deg: s.ue.map(|u| u.heading.to_degrees()),
            bias_m: s.ue.map(|u| u.bias),
            hypothesis: s.solution.as_ref().map(|x| x.hypothesis.label()),
            error: s.error.clone(),
        })
        .collect();
    let timing: Vec<TimingRow> = times.iter().enumerate().map(|(position, &runtime_s)| TimingRow { position, runtime_s }).collect();
    write_json(&out.join("steps.json"), &steps).runtime()?;
    write_csv_rows(&out.join("trajectory.csv"), &rows).runtime()?;
    write_csv_rows(&out.join("timing.csv"), &timing).runtime()?;

    let settings = SlamSettings {
        config: cfg.clone(),
        source: args.source,
        estimate_label: (args.source == Source::Estimates).then(|| label.clone()),
    };
    let mut manifest = Manifest::new("slam", sim.seed, &sim.manifest.scene_hash, &settings)
        .runtime()?
        .with_upstream(&sim.manifest);
    if let Some(m) = &upstream {
        manifest = manifest.with_upstream(m);
    }
    manifest.write(&sim.out).runtime()?;
    let failed = steps.iter().filter(|s| s.solution.is_none()).count();
    println!(
        "slam: {} ({}) over {} positions, {failed} unsolved -> {}",
        cfg.mode.name(),
        settings.estimate_label.as_deref().unwrap_or("synthetic measurements"),
        steps.len(),
        out.display()
    );
    Ok(())
}

pub fn eval(args: &RunArgs) -> Outcome<()> {
    let sim = Simulated::load(&args.out_dir, args.seed)?;
    let slam_manifest = Manifest::read(&sim.out, "slam").runtime()?;
    slam_manifest.check_upstream(&sim.manifest).config()?;
    let settings: SlamSettings = serde_json::from_value(slam_manifest.settings.clone())
        .context("slam manifest settings")
        .config()?;
    let steps: Vec<TrajectoryStep> = read_json(&sim.out.join("slam/steps.json")).runtime()?;
    let timing: Vec<TimingRow> = read_csv_rows(&sim.out.join("slam/timing.csv")).runtime()?;
    let n = sim.scene.len();
    if steps.len() != n || timing.len() != n {
        return Err(anyhow!("slam outputs cover {} positions, scene has {n}", steps.len())).runtime();
    }
    let (gospa, slfd) = match &settings.estimate_label {
        Some(label) => {
            let (pe, est_manifest) = read_estimates(&sim, label)?;
            slam_manifest.check_upstream(&est_manifest).config()?;
            let mut g = Vec::with_capacity(n);
            let mut s = Vec::with_capacity(n);
            for (p, truth) in pe.iter().zip(&sim.paths) {
                let (a, b) = evaluate_estimates(truth, &p.estimates, &settings.config.gospa).runtime()?;
                g.push(Some(a));
                s.push(Some(b));
            }
            (g, s)
        }
        None => (vec![None; n], vec![None; n]),
    };
    let estimates: Vec<Option<UeState>> = steps.iter().map(|s| s.ue).collect();
    let times: Vec<f64> = timing.iter().map(|t| t.runtime_s).collect();
    let report = EvalReport::assemble(&estimates, &sim.truth(), gospa, slfd, &times).runtime()?;

    let out = sim.out.join("eval");
    write_json(&out.join("report.json"), &report).runtime()?;
    write_csv_rows(&out.join("report.csv"), &report_rows(&report)).runtime()?;
    write_summary_csv(&out.join("summary.csv"), &report).runtime()?;
    Manifest::new("eval", sim.seed, &sim.manifest.scene_hash, &slam_manifest.config_hash)
        .runtime()?
        .with_upstream(&slam_manifest)
        .write(&sim.out)
        .runtime()?;
    let t = &report.trajectory;
    println!("eval: {} of {n} positions evaluated", t.evaluated);
    println!("              RMSE      STD");
    println!("position [m]  {:<9.4} {:.4}", t.position.rmse, t.position.std);
    println!("heading [deg] {:<9.4} {:.4}", t.heading.rmse, t.heading.std);
    println!("bias [m]      {:<9.4} {:.4}", t.bias.rmse, t.bias.std);
    println!("time [s]      {:.4}", report.mean_runtime_s);
    Ok(())
}

pub fn run_all(args: &RunArgs) -> Outcome<()> {
    simulate(args)?;
    estimate(args)?;
    slam(args)?;
    eval(args)
}

