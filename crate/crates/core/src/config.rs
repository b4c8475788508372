//! Single run configuration: one TOML file with a section per workflow
//! stage. Unknown keys are rejected; missing keys fall back to the desk
//! defaults, so an empty file is a valid (default) configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Which known-domain deblurrer the pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeblurrerKind {
    /// Closed-form Wiener deconvolution with the known domain's
    /// representative kernel.
    Wiener,
    /// Small residual network trained supervised on known-domain pairs.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeblurrerConfig {
    pub kind: DeblurrerKind,
    /// Wiener noise-to-signal ratio.
    pub nsr: f64,
    /// Channels of the learned deblurrer.
    pub channels: usize,
    pub crop: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DeblurrerConfig {
    fn default() -> Self {
        DeblurrerConfig {
            kind: DeblurrerKind::Wiener,
            nsr: 1e-2,
            channels: 8,
            crop: 64,
            iterations: 2_000,
            batch_size: 4,
            lr: 1e-3,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Blurry:sharp ratios, e.g. "6:4".
    pub ratios: Vec<String>,
    pub subset_seed: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            ratios: vec!["5:5".into(), "6:4".into(), "9:1".into()],
            subset_seed: 0,
        }
    }
}

/// Settings for the independent blur-domain classifier used to validate the
/// converter. It trains only on synthetically labeled blurs of the sharp
/// set, never on converter outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub base_channels: usize,
    pub crop: usize,
    pub iterations: usize,
    pub batch_per_class: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            base_channels: 8,
            crop: 64,
            iterations: 6_000,
            batch_per_class: 6,
            lr: 1e-3,
            seed: 23,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub deblurrer: DeblurrerConfig,
    pub ablate: AblateConfig,
    pub validate: ValidateConfig,
}

impl RunConfig {
    /// Hex SHA-256 of the canonical JSON serialization; stamped into
    /// checkpoints, archives, and evaluation summaries.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse_ratios(&self) -> Result<Vec<(u32, u32)>> {
        self.ablate
            .ratios
            .iter()
            .map(|r| {
                let (a, b) = r
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("ratio {r:?} is not of the form B:S")))?;
                let pa = a
                    .parse::<u32>()
                    .map_err(|_| Error::Config(format!("ratio {r:?}: bad blurry part")))?;
                let pb = b
                    .parse::<u32>()
                    .map_err(|_| Error::Config(format!("ratio {r:?}: bad sharp part")))?;
                if pa == 0 || pb == 0 {
                    return Err(Error::Config(format!("ratio {r:?} has a zero side")));
                }
                Ok((pa, pb))
            })
            .collect()
    }
}

/// Read and validate a TOML run configuration.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Serialize a configuration as TOML (used to scaffold a default file).
pub fn config_to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Serde(e.to_string()))
}
