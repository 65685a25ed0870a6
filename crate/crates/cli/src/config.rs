//! TOML configuration and the resolved run settings.
//!
//! Every value is looked up as command-line flag, then config file, then the
//! library default. The defaults live in the core crate's `Default` impls.

use std::path::Path;

use serde::Deserialize;

use motionssl_core::msrm::MsrmConfig;
use motionssl_core::synthworld::SceneConfig;
use motionssl_core::trainer::SslConfig;
use motionssl_core::GridSpec;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub verbosity: Option<u8>,
    pub msrm: MsrmFile,
    pub train: TrainFile,
    pub synth: SynthFile,
    /// Grid used by `voxelize`.
    pub grid: Option<GridSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsrmFile {
    pub k: Option<usize>,
    pub mu: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub theta_c: Option<f64>,
    pub theta_w: Option<f64>,
    pub epsilon: Option<f64>,
    pub sinkhorn_iters: Option<usize>,
    pub exclude_ground: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub ssl_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub labeled_frac: Option<f64>,
    pub temporal_prob: Option<f64>,
    pub bevmix_prob: Option<f64>,
    pub steps_per_epoch: Option<usize>,
    pub hidden: Option<[usize; 2]>,
    pub kernels: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthFile {
    pub scenes: Option<usize>,
    pub test_scenes: Option<usize>,
    pub labeled_frac: Option<f64>,
    pub scene: Option<SceneConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Settings shared by every subcommand after merging.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub verbosity: u8,
    pub msrm: MsrmConfig,
    pub ssl: SslConfig,
}

pub(crate) fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Library defaults, used both for resolution and for `--help` text.
pub(crate) fn defaults() -> (MsrmConfig, SslConfig) {
    (MsrmConfig::default(), SslConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(FileConfig::parse("seed = 1\nbogus = 2\n").is_err());
        assert!(FileConfig::parse("[msrm]\nkk = 5\n").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = FileConfig::parse(
            "seed = 3\n[msrm]\nk = 7\ngamma = 0.5\n[train]\nkernels = [5, 5, 1]\n[synth.scene]\nn_objects = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.msrm.k, Some(7));
        assert_eq!(cfg.train.kernels, Some([5, 5, 1]));
        assert_eq!(cfg.synth.scene.unwrap().n_objects, 2);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }

    #[test]
    fn library_defaults_match_documented_values() {
        let (m, s) = defaults();
        assert_eq!(m.regen.k, 5);
        assert_eq!(m.mu, 1.0);
        assert_eq!(m.regen.beta, 10.0);
        assert_eq!(m.regen.gamma, 0.6);
        assert_eq!(m.matching.theta_c, 3.0);
        assert_eq!(m.regen.theta_w, 5.0);
        assert_eq!(s.alpha, 0.999);
    }
}
