//! End-to-end processing of a scene: power maps, angle extraction, ToA,
//! measurements, the sequential SLAM pass and evaluation.

use std::time::Instant;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::angles::{cfar_detect, svd_candidates, svd_extract, AngleEstimate, SvdParams};
use crate::error::{Error, Result};
use crate::geometry::{diagonal_covariance, Measurement, UeState};
use crate::metrics::{gospa_angles, slfd_metric, EvalReport, GospaParams, GospaResult, SlfdResult, SLFD_TOA_THRESHOLD};
use crate::simulate::{
    reference_waveform, synth_brsrp, synth_measurements, synth_rs_samples, synth_time_capture, true_paths,
    BeamCodebook, BrsrpMap, OutlierModel, PathTruth, Scene, WaveformConfig, SPEED_OF_LIGHT,
};
use crate::slam::{run_trajectory, solve_step, ObjectiveMode, SnapshotConfig, TrajectoryStep};
use crate::toa::{coarse_toa, fine_delay, nearest_beam_pair, PathEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Svd,
    Cfar,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Svd => "svd",
            Self::Cfar => "cfar",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svd" => Ok(Self::Svd),
            "cfar" => Ok(Self::Cfar),
            _ => Err(Error::InvalidParameter(format!("unknown extraction method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfarConfig {
    pub train: usize,
    pub guard: usize,
    pub pfa: f64,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            train: 4,
            guard: 3,
            pfa: 0.12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub codebook: BeamCodebook,
    pub subcarriers: usize,
    pub symbols: usize,
    pub subcarrier_spacing: f64,
    /// Noise power per resource element; also the BRSRP noise floor.
    pub noise_var: f64,
    pub method: Method,
    /// Percent of singular-value energy kept by the SVD extractor.
    pub power_ratio: f64,
    /// Peak threshold as a multiple of the noise floor.
    pub power_threshold_scale: f64,
    pub cfar: CfarConfig,
    pub range_std: f64,
    pub aod_std_deg: f64,
    pub aoa_std_deg: f64,
    pub reference_len: usize,
    pub capture_len: usize,
    /// Samples captured before the UE's nominal timing origin.
    pub capture_lead: usize,
    /// Samples the FFT window is moved ahead of the correlation peak.
    pub backoff: usize,
    pub mode: ObjectiveMode,
    pub known_bias: bool,
    pub outlier_rate: f64,
    pub gospa: GospaParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            codebook: BeamCodebook::desk_scale(),
            subcarriers: 1024,
            symbols: 4,
            subcarrier_spacing: 120e3,
            noise_var: 1.0,
            method: Method::Svd,
            power_ratio: 99.0,
            power_threshold_scale: 1.1,
            cfar: CfarConfig::default(),
            range_std: 0.3,
            aod_std_deg: 3.0,
            aoa_std_deg: 3.0,
            reference_len: 256,
            capture_len: 512,
            capture_lead: 32,
            backoff: 3,
            mode: ObjectiveMode::Proposed,
            known_bias: false,
            outlier_rate: 0.0,
            gospa: GospaParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.codebook.validate()?;
        self.gospa.validate()?;
        if !(self.noise_var > 0.0) {
            return Err(Error::InvalidParameter(format!("noise variance {}", self.noise_var)));
        }
        if !(self.power_threshold_scale >= 0.0) {
            return Err(Error::InvalidParameter(format!("power threshold scale {}", self.power_threshold_scale)));
        }
        if !(self.power_ratio > 0.0 && self.power_ratio <= 100.0) {
            return Err(Error::InvalidParameter(format!("power ratio {} not in (0, 100]", self.power_ratio)));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::InvalidParameter(format!("outlier rate {}", self.outlier_rate)));
        }
        if !(self.cfar.pfa > 0.0 && self.cfar.pfa < 1.0) {
            return Err(Error::InvalidParameter(format!("CFAR false-alarm probability {}", self.cfar.pfa)));
        }
        if self.capture_len < self.reference_len + self.capture_lead {
            return Err(Error::InvalidParameter("capture shorter than reference plus lead".into()));
        }
        for s in [self.range_std, self.aod_std_deg, self.aoa_std_deg] {
            if !(s > 0.0) {
                return Err(Error::InvalidParameter(format!("measurement standard deviation {s}")));
            }
        }
        self.waveform().map(|_| ())
    }

    pub fn waveform(&self) -> Result<WaveformConfig> {
        WaveformConfig::new(self.subcarriers, self.symbols, self.subcarrier_spacing, 0)
    }

    pub fn sample_rate(&self) -> f64 {
        self.subcarriers as f64 * self.subcarrier_spacing
    }

    pub fn measurement_covariance(&self) -> Matrix3<f64> {
        diagonal_covariance(self.range_std, self.aod_std_deg, self.aoa_std_deg)
    }

    pub fn svd_params(&self, map: &BrsrpMap) -> SvdParams {
        let mut p = SvdParams::for_map(map).with_power_ratio(self.power_ratio);
        p.power_threshold = self.power_threshold_scale * map.noise_floor;
        p
    }

    pub fn snapshot(&self) -> SnapshotConfig {
        SnapshotConfig::new(self.mode)
    }
}

/// Deterministic per-position stream: one RNG per (seed, position, purpose).
pub fn stream_rng(seed: u64, position: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position as u64 * 16 + purpose);
    rng
}

const STREAM_MAP: u64 = 1;
const STREAM_TOA: u64 = 2;
const STREAM_OUTLIER: u64 = 3;
const STREAM_MEAS: u64 = 4;

/// Simulated observations of one trajectory point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionData {
    pub index: usize,
    pub paths: Vec<PathTruth>,
    pub map: BrsrpMap,
}

pub fn simulate_position(scene: &Scene, index: usize, cfg: &PipelineConfig, seed: u64) -> Result<PositionData> {
    let wf_n_rs = cfg.subcarriers * cfg.symbols;
    let paths = true_paths(scene, index)?;
    let mut rng = stream_rng(seed, index, STREAM_MAP);
    let map = synth_brsrp(&paths, &cfg.codebook, cfg.noise_var, wf_n_rs, &mut rng)?;
    Ok(PositionData { index, paths, map })
}

pub fn extract_angles(map: &BrsrpMap, cfg: &PipelineConfig) -> Result<Vec<AngleEstimate>> {
    match cfg.method {
        Method::Svd => svd_extract(map, &cfg.svd_params(map)),
        Method::Cfar => cfar_detect(map, cfg.cfar.train, cfg.cfar.guard, cfg.cfar.pfa),
    }
}

/// Number of SVD peaks before thresholding, for the power-ratio sweep.
pub fn candidate_count(map: &BrsrpMap, power_ratio: f64) -> Result<usize> {
    Ok(svd_candidates(map, power_ratio)?.candidates.len())
}

/// Biased ToA of every angle estimate: coarse timing from a time-domain
/// capture of its nearest beam pair, then the fractional delay inside an FFT
/// window opened `backoff` samples ahead of the coarse peak.
pub fn estimate_toas(
    paths: &[PathTruth],
    estimates: &[AngleEstimate],
    bias: f64,
    index: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<PathEstimate>> {
    let wf = cfg.waveform()?;
    let fs = cfg.sample_rate();
    let lead = cfg.capture_lead as f64 / fs;
    let reference = reference_waveform(wf.sequence_id, cfg.reference_len);
    let refs = [reference.clone()];
    let mut rng = stream_rng(seed, index, STREAM_TOA);
    let mut out = Vec::with_capacity(estimates.len());
    for est in estimates {
        let pair = nearest_beam_pair(est, &cfg.codebook);
        // the capture opens `lead` before the UE's timing origin
        let capture = synth_time_capture(
            paths,
            &cfg.codebook,
            pair,
            &reference,
            fs,
            bias - SPEED_OF_LIGHT * lead,
            cfg.capture_len,
            cfg.noise_var,
            &mut rng,
        )?;
        let coarse = coarse_toa(&capture, &refs, fs)?.backed_off(cfg.backoff);
        let window_ue = coarse.delay - lead;
        let grid = synth_rs_samples(
            paths,
            &cfg.codebook,
            &wf,
            pair,
            window_ue + bias / SPEED_OF_LIGHT,
            cfg.noise_var,
            &mut rng,
        )?;
        let fine = fine_delay(&grid, &wf)?;
        out.push(PathEstimate::new(est, pair, window_ue + fine));
    }
    Ok(out)
}

/// Replaces each measurement by a gross error with probability `model.rate`.
pub fn inject_outliers<R: Rng + ?Sized>(z: &mut [Measurement], model: &OutlierModel, rng: &mut R) {
    if model.rate <= 0.0 {
        return;
    }
    for m in z {
        if rng.random_bool(model.rate) {
            let mag = rng.random_range(model.min_offset..=model.max_offset);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            m.range += sign * mag;
            m.aod = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            m.aoa = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        }
    }
}

/// Channel estimates of one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimates {
    pub index: usize,
    pub estimates: Vec<PathEstimate>,
    pub measurements: Vec<Measurement>,
    /// Wall time of the estimate stage; not serialized so artifacts stay reproducible.
    #[serde(skip)]
    pub runtime_s: f64,
}

pub fn estimate_position(scene: &Scene, data: &PositionData, cfg: &PipelineConfig, seed: u64) -> Result<PositionEstimates> {
    let t0 = Instant::now();
    let angles = extract_angles(&data.map, cfg)?;
    let bias = scene.bias_trajectory[data.index];
    let estimates = estimate_toas(&data.paths, &angles, bias, data.index, cfg, seed)?;
    let cov = cfg.measurement_covariance();
    let mut measurements: Vec<Measurement> = estimates.iter().map(|e| e.to_measurement(cov)).collect();
    let mut rng = stream_rng(seed, data.index, STREAM_OUTLIER);
    inject_outliers(&mut measurements, &OutlierModel::with_rate(cfg.outlier_rate), &mut rng);
    Ok(PositionEstimates {
        index: data.index,
        estimates,
        measurements,
        runtime_s: t0.elapsed().as_secs_f64(),
    })
}

/// Measurements drawn directly from the true paths with covariance `r`
/// (no map or ToA stage).
pub fn synthetic_measurements(scene: &Scene, r: &Matrix3<f64>, outliers: &OutlierModel, seed: u64) -> Result<Vec<Vec<Measurement>>> {
    (0..scene.len())
        .map(|k| {
            let paths = true_paths(scene, k)?;
            let mut rng = stream_rng(seed, k, STREAM_MEAS);
            synth_measurements(&paths, r, scene.bias_trajectory[k], outliers, &mut rng)
        })
        .collect()
}

/// The SLAM pass with optional true-bias injection. Returns the steps and the
/// per-position wall time.
pub fn run_slam(scene: &Scene, measurements: &[Vec<Measurement>], cfg: &PipelineConfig) -> Result<(Vec<TrajectoryStep>, Vec<f64>)> {
    let snapshot = cfg.snapshot();
    let known = cfg.known_bias.then_some(scene.bias_trajectory.as_slice());
    let mut steps: Vec<TrajectoryStep> = Vec::with_capacity(measurements.len());
    let mut times = Vec::with_capacity(measurements.len());
    for (k, z) in measurements.iter().enumerate() {
        let last = steps.last().and_then(|s| s.ue);
        let t0 = Instant::now();
        steps.push(solve_step(&scene.bs, z, last.as_ref(), &snapshot, known.map(|b| b[k])));
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok((steps, times))
}

/// Everything produced for one scene run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub positions: Vec<PositionEstimates>,
    pub steps: Vec<TrajectoryStep>,
    pub report: EvalReport,
}

impl PipelineRun {
    pub fn ue_estimates(&self) -> Vec<Option<UeState>> {
        self.steps.iter().map(|s| s.ue).collect()
    }
}

/// GOSPA and SLFD of one position's channel estimates.
pub fn evaluate_estimates(paths: &[PathTruth], est: &[PathEstimate], params: &GospaParams) -> Result<(GospaResult, SlfdResult)> {
    let e: Vec<(f64, f64)> = est.iter().map(|p| (p.aod, p.aoa)).collect();
    let t: Vec<(f64, f64)> = paths.iter().map(|p| (p.aod, p.aoa)).collect();
    Ok((gospa_angles(&e, &t, params)?, slfd_metric(est, SLFD_TOA_THRESHOLD, params)?))
}

/// Simulate, estimate, solve and evaluate the whole trajectory.
pub fn run_pipeline(scene: &Scene, cfg: &PipelineConfig, seed: u64) -> Result<PipelineRun> {
    cfg.validate()?;
    let mut positions = Vec::with_capacity(scene.len());
    let mut gospa = Vec::with_capacity(scene.len());
    let mut slfd = Vec::with_capacity(scene.len());
    for k in 0..scene.len() {
        let data = simulate_position(scene, k, cfg, seed)?;
        let pe = estimate_position(scene, &data, cfg, seed)?;
        let (g, s) = evaluate_estimates(&data.paths, &pe.estimates, &cfg.gospa)?;
        gospa.push(Some(g));
        slfd.push(Some(s));
        positions.push(pe);
    }
    let measurements: Vec<Vec<Measurement>> = positions.iter().map(|p| p.measurements.clone()).collect();
    let (steps, times) = run_slam(scene, &measurements, cfg)?;
    let truth: Vec<UeState> = (0..scene.len()).map(|k| scene.ue_state(k)).collect();
    let estimates: Vec<Option<UeState>> = steps.iter().map(|s| s.ue).collect();
    let report = EvalReport::assemble(&estimates, &truth, gospa, slfd, &times)?;
    Ok(PipelineRun {
        positions,
        steps,
        report,
    })
}

/// Measurement-level trajectory: true paths plus Gaussian noise and
/// outliers, then the SLAM pass. Returns the per-position UE estimates.
pub fn run_measurement_trajectory(
    scene: &Scene,
    r: &Matrix3<f64>,
    outliers: &OutlierModel,
    mode: ObjectiveMode,
    known_bias: bool,
    seed: u64,
) -> Result<Vec<Option<UeState>>> {
    let z = synthetic_measurements(scene, r, outliers, seed)?;
    let known = known_bias.then_some(scene.bias_trajectory.as_slice());
    let steps = run_trajectory(&scene.bs, &z, &SnapshotConfig::new(mode), known)?;
    Ok(steps.into_iter().map(|s| s.ue).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::trajectory_stats;
    use crate::simulate::Side;

    fn short_scene() -> Scene {
        let mut s = Scene::default_indoor(5);
        s.ue_trajectory.truncate(6);
        s.bias_trajectory.truncate(6);
        s.los_blocked.clear();
        s
    }

    #[test]
    fn toa_chain_recovers_biased_delay() {
        let scene = short_scene();
        let cfg = PipelineConfig::default();
        let data = simulate_position(&scene, 0, &cfg, 1).unwrap();
        let ests = extract_angles(&data.map, &cfg).unwrap();
        assert!(!ests.is_empty());
        let toas = estimate_toas(&data.paths, &ests, scene.bias_trajectory[0], 0, &cfg, 1).unwrap();
        // strongest estimate is the direct path
        let los = data.paths.iter().find(|p| p.kind == crate::geometry::PathKind::Los).unwrap();
        let biased = los.range - scene.bias_trajectory[0];
        assert!((toas[0].range() - biased).abs() < 0.3, "{} vs {}", toas[0].range(), biased);
        let (i, j) = (toas[0].tx_index, toas[0].rx_index);
        assert_eq!((i, j), (cfg.codebook.nearest_beam(Side::Tx, ests[0].aod), cfg.codebook.nearest_beam(Side::Rx, ests[0].aoa)));
    }

    #[test]
    fn deterministic() {
        let scene = short_scene();
        let cfg = PipelineConfig::default();
        let a = run_pipeline(&scene, &cfg, 9).unwrap();
        let b = run_pipeline(&scene, &cfg, 9).unwrap();
        assert_eq!(a.positions.iter().map(|p| &p.estimates).collect::<Vec<_>>(), b.positions.iter().map(|p| &p.estimates).collect::<Vec<_>>());
        assert_eq!(a.ue_estimates(), b.ue_estimates());
    }

    #[test]
    fn known_bias_noiseless_measurements_are_exact() {
        let mut scene = short_scene();
        scene.los_blocked.clear();
        let r = diagonal_covariance(1e-6, 1e-6, 1e-6);
        let est = run_measurement_trajectory(&scene, &r, &OutlierModel::none(), ObjectiveMode::Proposed, true, 0).unwrap();
        let truth: Vec<UeState> = (0..scene.len()).map(|k| scene.ue_state(k)).collect();
        let s = trajectory_stats(&est, &truth).unwrap();
        assert!(s.position.rmse < 1e-3, "{}", s.position.rmse);
    }

    #[test]
    fn method_and_config_validation() {
        assert_eq!("CFAR".parse::<Method>().unwrap(), Method::Cfar);
        assert!("music".parse::<Method>().is_err());
        let cfg = PipelineConfig {
            outlier_rate: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
