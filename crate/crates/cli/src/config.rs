use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use mmw_slam::io::read_json;
use mmw_slam::pipeline::{Method, PipelineConfig};
use mmw_slam::slam::ObjectiveMode;
use mmw_slam::Scene;

use crate::{Classify, Outcome};

/// Seed used when neither the flag nor an earlier stage provides one.
pub const DEFAULT_SEED: u64 = 2024;

/// Power ratios (percent) swept by the estimate stage when none is given.
pub const POWER_RATIOS: [f64; 3] = [99.0, 99.9, 99.99];

/// Threshold multipliers applied by `--threshold-sweep`.
pub const THRESHOLD_SWEEP: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Svd,
    Cfar,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Svd => Method::Svd,
            MethodArg::Cfar => Method::Cfar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Ofv0,
    Ofv1,
    Ofv2,
    Proposed,
}

impl From<AblationArg> for ObjectiveMode {
    fn from(m: AblationArg) -> Self {
        match m {
            AblationArg::Ofv0 => ObjectiveMode::Ofv0,
            AblationArg::Ofv1 => ObjectiveMode::Ofv1,
            AblationArg::Ofv2 => ObjectiveMode::Ofv2,
            AblationArg::Proposed => ObjectiveMode::Proposed,
        }
    }
}

/// Where the SLAM stage takes its measurements from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Channel estimates of the estimate stage.
    Estimates,
    /// Noisy draws around the true paths written by simulate.
    Measurements,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scene JSON; the bundled indoor scene is used when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Pipeline configuration JSON; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// SVD power ratio in percent.
    #[arg(long)]
    pub power_ratio: Option<f64>,
    /// Peak threshold as a multiple of the noise floor.
    #[arg(long)]
    pub power_threshold_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Feed the true clock bias to the solver.
    #[arg(long)]
    pub known_bias: bool,
    /// Probability of replacing a measurement by a gross error.
    #[arg(long)]
    pub outlier_rate: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// simulate: draw the synthetic measurements without noise (maps keep
    /// their noise floor).
    #[arg(long)]
    pub noiseless: bool,
    /// simulate: also write each power map as CSV.
    #[arg(long)]
    pub map_csv: bool,
    /// estimate: repeat SVD extraction at 0.5×, 1× and 2× the threshold.
    #[arg(long)]
    pub threshold_sweep: bool,
    /// slam: measurement source.
    #[arg(long, value_enum, default_value = "estimates")]
    pub source: Source,
}

impl RunArgs {
    /// Pipeline settings: the file (or defaults) with flag overrides applied.
    pub fn pipeline(&self, base: PipelineConfig) -> Outcome<PipelineConfig> {
        let mut cfg = base;
        if let Some(p) = self.power_ratio {
            cfg.power_ratio = p;
        }
        if let Some(s) = self.power_threshold_scale {
            cfg.power_threshold_scale = s;
        }
        if let Some(m) = self.method {
            cfg.method = m.into();
        }
        if let Some(a) = self.ablation {
            cfg.mode = a.into();
        }
        if self.known_bias {
            cfg.known_bias = true;
        }
        if let Some(r) = self.outlier_rate {
            cfg.outlier_rate = r;
        }
        cfg.validate().config()?;
        Ok(cfg)
    }

    pub fn base_config(&self) -> Outcome<PipelineConfig> {
        match &self.config {
            Some(p) => load_json(p),
            None => Ok(PipelineConfig::default()),
        }
    }

    pub fn load_scene(&self, seed: u64) -> Outcome<Scene> {
        let mut scene = match &self.scene {
            Some(p) => load_json(p)?,
            None => Scene::default_indoor(seed),
        };
        scene
            .prepare()
            .with_context(|| format!("scene {}", self.scene.as_deref().unwrap_or(Path::new("<bundled>")).display()))
            .config()?;
        Ok(scene)
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    if !path.is_file() {
        return Err(anyhow::anyhow!("{}: file not found", path.display())).config();
    }
    read_json(path).config()
}

/// Rejects a `--seed` that disagrees with the one already recorded.
pub fn reconcile_seed(flag: Option<u64>, recorded: u64) -> anyhow::Result<u64> {
    match flag {
        Some(s) if s != recorded => bail!("--seed {s} does not match seed {recorded} of the simulated run"),
        _ => Ok(recorded),
    }
}
