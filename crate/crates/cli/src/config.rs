use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use f2r_core::corpus::CorpusFormat;
use f2r_core::experiments::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Settings shared by every subcommand, read from a TOML file. Every key is
/// optional and falls back to the defaults of the corresponding library type.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Input format of raw dialogue and feedback corpora.
    pub format: CorpusFormat,
    /// Style-transfer training, synthetic corpus and ranker settings.
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Routes one seed to every random component.
    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        let p = &mut self.pipeline;
        p.seed = seed;
        p.synthetic.seed = seed;
        p.split.seed = seed;
        p.pretrain.seed = seed;
        p.adversarial.seed = seed;
        p.experiment.train.seed = seed;
        let n = p.experiment.seeds.len() as u64;
        p.experiment.seeds = (0..n).map(|i| seed.wrapping_add(i)).collect();
        self
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Relative paths missing from the working directory are looked up in the data directory.
pub fn resolve(path: &Path, data_dir: Option<&Path>) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() && !path.exists() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[pipeline]\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c: RunConfig = toml::from_str("[pipeline.adversarial]\nsteps = 7\n").unwrap();
        assert_eq!(c.pipeline.adversarial.steps, 7);
        assert_eq!(
            c.pipeline.adversarial.batch_size,
            PipelineConfig::default().adversarial.batch_size
        );
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn seed_reaches_every_component() {
        let c = RunConfig::default().with_seed(5);
        let p = &c.pipeline;
        assert_eq!(
            [
                p.seed,
                p.synthetic.seed,
                p.split.seed,
                p.pretrain.seed,
                p.adversarial.seed
            ],
            [5; 5]
        );
        assert_eq!(p.experiment.seeds, vec![5, 6, 7]);
        assert_ne!(c.digest(), RunConfig::default().digest());
    }
}
