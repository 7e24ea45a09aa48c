use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Reproducibility record written next to each stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    /// SHA-256 of the stage's canonical JSON settings.
    pub config_hash: String,
    pub scene_hash: String,
    /// Config hashes of the stage outputs this one consumed.
    pub upstream: BTreeMap<String, String>,
    pub settings: serde_json::Value,
    pub versions: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new<S: Serialize>(stage: &str, seed: u64, scene_hash: &str, settings: &S) -> anyhow::Result<Self> {
        let settings = serde_json::to_value(settings)?;
        let config_hash = hash_json(&(stage, seed, &settings))?;
        let versions = BTreeMap::from([
            ("mmw-slam".to_string(), mmw_slam::VERSION.to_string()),
            ("mmw-slam-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]);
        Ok(Self {
            stage: stage.to_string(),
            seed,
            config_hash,
            scene_hash: scene_hash.to_string(),
            upstream: BTreeMap::new(),
            settings,
            versions,
        })
    }

    pub fn with_upstream(mut self, m: &Manifest) -> Self {
        self.upstream.insert(m.stage.clone(), m.config_hash.clone());
        self
    }

    pub fn path(out_dir: &Path, stage: &str) -> PathBuf {
        out_dir.join(format!("manifest_{stage}.json"))
    }

    pub fn write(&self, out_dir: &Path) -> anyhow::Result<()> {
        mmw_slam::io::write_json(&Self::path(out_dir, &self.stage), self)?;
        Ok(())
    }

    pub fn read(out_dir: &Path, stage: &str) -> anyhow::Result<Self> {
        let path = Self::path(out_dir, stage);
        if !path.is_file() {
            bail!("{}: missing; run the {stage} stage first", path.display());
        }
        mmw_slam::io::read_json(&path).with_context(|| format!("reading {stage} manifest"))
    }

    /// Errors unless `self` was produced from exactly `upstream`.
    pub fn check_upstream(&self, upstream: &Manifest) -> anyhow::Result<()> {
        match self.upstream.get(&upstream.stage) {
            Some(h) if *h == upstream.config_hash => Ok(()),
            Some(h) => bail!(
                "{} manifest was built from {} output {h}, but the current {} output is {}",
                self.stage,
                upstream.stage,
                upstream.stage,
                upstream.config_hash
            ),
            None => bail!("{} manifest has no {} input recorded", self.stage, upstream.stage),
        }
    }
}

pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> anyhow::Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
