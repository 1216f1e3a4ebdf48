//! TOML run configuration. Every section and key is optional; unknown keys
//! are rejected.
//!
//! ```toml
//! [arch]
//! widths = [4, 5, 6, 3, 1]      # n_0..n_L
//! activation = "identity"       # or "relu"
//! # weights_file = "net.txt"    # start from saved weights instead of init
//!
//! [init]
//! distribution = "gaussian"     # "uniform", "rademacher"
//! seed = 0
//! # gain = 1.0                  # default 2 for relu, 1 otherwise
//!
//! [train]
//! loss = "l2"
//! lr = 0.01
//! halve_at = [40, 80, 120]
//! batch_size = 100
//! epochs = 100
//! # probe_every = 10            # default: first step of every epoch
//!
//! [data]
//! n_samples = 1000
//! seed = 0
//!
//! [mc]
//! trials = 20000
//! seed = 0
//! # compare_widths = [[16, 16, 16, 16, 1], [64, 64, 64, 64, 1]]
//! epsilons = [0.25, 0.5, 1.0, 1.5, 2.0]
//! [mc.tolerances]
//! mean_stderrs = 4.0
//! variance_ratio = 0.35
//! grad_norm_rel = 0.10
//!
//! [thm2]                        # closed-form bound evaluation only
//! # gamma = 1.0
//! # ...
//!
//! [sweep]
//! widths = [50, 200, 400]
//! n_seeds = 10
//!
//! [check]
//! nets = 5
//! batch = 3
//!
//! [out]
//! directory = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{default_init, InitKindGain, TrainConfig};
use crate::loss::Loss;
use crate::network::{Activation, Architecture, InitScheme};
use crate::rng::InitKind;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchSection,
    pub init: InitSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub mc: McSection,
    pub thm2: Thm2Section,
    pub sweep: SweepSection,
    pub check: CheckSection,
    pub out: OutSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub widths: Vec<usize>,
    pub activation: String,
    pub weights_file: Option<PathBuf>,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            widths: vec![4, 5, 6, 3, 1],
            activation: "identity".into(),
            weights_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub distribution: String,
    pub seed: u64,
    pub gain: Option<f64>,
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            distribution: "gaussian".into(),
            seed: 0,
            gain: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub loss: String,
    pub lr: f64,
    pub halve_at: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub probe_every: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            loss: "l2".into(),
            lr: 0.01,
            halve_at: vec![40, 80, 120],
            batch_size: 100,
            epochs: 100,
            probe_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n_samples: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub trials: usize,
    pub seed: u64,
    pub compare_widths: Option<Vec<Vec<usize>>>,
    pub epsilons: Vec<f64>,
    pub tolerances: Tolerances,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            trials: 20_000,
            seed: 0,
            compare_widths: None,
            epsilons: vec![0.25, 0.5, 1.0, 1.5, 2.0],
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// `|mean| ≤ k·stderr`.
    pub mean_stderrs: f64,
    /// Relative tolerance on measured/predicted variance ratios.
    pub variance_ratio: f64,
    /// Relative tolerance of the mean squared gradient norm.
    pub grad_norm_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            mean_stderrs: 4.0,
            variance_ratio: 0.35,
            grad_norm_rel: 0.10,
        }
    }
}

/// Explicit bound inputs. When `gamma` is set, `theory thm2` evaluates the
/// bound at every `(n, ε)` with `δ ≡ 0` instead of running trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thm2Section {
    pub gamma: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub n: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub y0_norm_sq: f64,
}

impl Default for Thm2Section {
    fn default() -> Self {
        Self {
            gamma: None,
            alpha: 2.0,
            beta: 1.0,
            n: vec![10_000.0],
            multipliers: vec![1.0; 5],
            y0_norm_sq: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub widths: Vec<usize>,
    pub n_seeds: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            widths: vec![50, 200, 400],
            n_seeds: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    pub nets: usize,
    pub batch: usize,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self { nets: 5, batch: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutSection {
    pub directory: PathBuf,
}

impl Default for OutSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and parses `path`, returning the config and the raw text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(w) = &cfg.arch.weights_file {
            if w.is_relative() {
                cfg.arch.weights_file = Some(path.parent().unwrap_or(Path::new(".")).join(w));
            }
        }
        Ok((cfg, text))
    }

    /// Replaces every seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.init.seed = seed;
        self.data.seed = seed;
        self.mc.seed = seed;
    }

    pub fn activation(&self) -> Result<Activation> {
        self.arch.activation.parse()
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.arch.widths.clone(), self.activation()?).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn init_kind_gain(&self) -> Result<InitKindGain> {
        let kind: InitKind = self.init.distribution.parse()?;
        let gain = self.init.gain.unwrap_or(default_init(self.activation()?).gain);
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::Config(format!("init gain must be positive, got {gain}")));
        }
        Ok(InitKindGain { kind, gain })
    }

    pub fn init_scheme(&self) -> Result<InitScheme> {
        Ok(self.init_kind_gain()?.into())
    }

    pub fn loss(&self) -> Result<Loss> {
        self.train.loss.parse()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            arch: self.architecture()?,
            init: self.init_kind_gain()?,
            loss: self.loss()?,
            lr: self.train.lr,
            halve_at: self.train.halve_at.clone(),
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            probe_every: self.train.probe_every,
            data_seed: self.data.seed,
            init_seed: self.init.seed,
        };
        cfg.validate(self.data.n_samples)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_uses_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.architecture().unwrap().widths(), &[4, 5, 6, 3, 1]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[arch]\nwidth = [1]\n"), Err(Error::Config(_))));
        assert!(RunConfig::parse("[nope]\n").is_err());
    }

    #[test]
    fn seed_override_and_relu_gain() {
        let mut cfg = RunConfig::parse("[arch]\nactivation = \"relu\"\nwidths = [3, 3, 1]\n").unwrap();
        cfg.override_seed(9);
        assert_eq!((cfg.init.seed, cfg.data.seed, cfg.mc.seed), (9, 9, 9));
        assert_eq!(cfg.init_scheme().unwrap().gain, 2.0);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let cfg = RunConfig::parse("[arch]\nactivation = \"tanh\"\n").unwrap();
        assert!(matches!(cfg.architecture(), Err(Error::Config(_))));
        let cfg = RunConfig::parse("[train]\nbatch_size = 5000\n").unwrap();
        assert!(matches!(cfg.train_config(), Err(Error::Config(_))));
    }
}
