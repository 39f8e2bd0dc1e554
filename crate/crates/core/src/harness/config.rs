//! Run configuration, parsed from a JSON document. Relative paths resolve
//! against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_names, AttackSpec};
use crate::bounds::BoundKind;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::s2o::{Damping, S2OConfig};
use crate::weight_stats::{CorrSource, Fig3Family, SamplingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Train and test rows share cluster centers.
    Blobs {
        num_classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { hidden: vec![256, 256] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    At,
    Trades,
    AtS2o,
    TradesS2o,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Standard, Method::At, Method::Trades, Method::AtS2o, Method::TradesS2o];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::At => "at",
            Method::Trades => "trades",
            Method::AtS2o => "at_s2o",
            Method::TradesS2o => "trades_s2o",
        }
    }

    pub fn uses_s2o(self) -> bool {
        matches!(self, Method::AtS2o | Method::TradesS2o)
    }

    pub fn uses_trades(self) -> bool {
        matches!(self, Method::Trades | Method::TradesS2o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    /// Base rate; divided by 10 at 50% and again at 75% of the epochs.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Rows of the training set scored for the per-epoch train metrics.
    pub eval_train_limit: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            method: Method::At,
            epochs: 30,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            eval_train_limit: 500,
        }
    }
}

impl TrainingConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let e = self.epochs as f64;
        let t = epoch as f64;
        if t >= 0.75 * e {
            self.lr / 100.0
        } else if t >= 0.5 * e {
            self.lr / 10.0
        } else {
            self.lr
        }
    }
}

/// An attack by registry name with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub method: String,
    #[serde(flatten)]
    pub spec: AttackSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub source: CorrSource,
    /// Layers to estimate; empty means every layer for sampling and the
    /// output layer for Laplace.
    pub layers: Vec<usize>,
    pub sampling: SamplingConfig,
    pub damping: Damping,
    /// Leading training rows used for the estimate.
    pub data_limit: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            source: CorrSource::Sampling,
            layers: Vec::new(),
            sampling: SamplingConfig::default(),
            damping: Damping::Relative(1e-3),
            data_limit: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub kinds: Vec<BoundKind>,
    pub gamma: f64,
    pub delta: f64,
    pub c: f64,
    /// Defaults to the training-set size.
    pub m: Option<usize>,
    /// Defaults to the largest ℓ2 norm of a training input.
    pub b: Option<f64>,
    /// Defaults to the training attack radius expressed in ℓ2.
    pub epsilon: Option<f64>,
    /// Stats CSVs; relative names resolve against the output directory
    /// first, then the config directory.
    pub stats_files: Vec<PathBuf>,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            kinds: vec![BoundKind::Neyshabur22, BoundKind::Xiao24],
            gamma: 1.0,
            delta: 0.05,
            c: 1.0,
            m: None,
            b: None,
            epsilon: None,
            stats_files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub family: Fig3Family,
    pub dim: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            family: Fig3Family::RandomCorrelation,
            dim: 9,
            n_samples: 10_000,
            seed: 0,
        }
    }
}

fn default_attack_train() -> AttackSpec {
    AttackSpec::linf(0.1, 10)
}

fn default_trades_lambda() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_attack_train")]
    pub attack_train: AttackSpec,
    #[serde(default)]
    pub attack_eval: Vec<NamedAttack>,
    #[serde(default)]
    pub s2o: S2OConfig,
    /// Weight `1/λ` of the TRADES KL term.
    #[serde(default = "default_trades_lambda")]
    pub trades_lambda: f64,
    /// Checkpoint read by `evaluate`, `stats` and `bound`; defaults to
    /// `checkpoint.json` in the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub bound: BoundConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::from_json(&text, &base)
    }

    /// Replaces the master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self.stats.sampling.seed = seed;
        self.simulate.seed = seed;
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config values are finite");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", t.momentum)));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", t.weight_decay)));
        }
        if self.network.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.s2o.validate()?;
        if t.method.uses_trades() && !(self.trades_lambda > 0.0 && self.trades_lambda.is_finite()) {
            return Err(Error::Config(format!("TRADES needs trades_lambda > 0, got {}", self.trades_lambda)));
        }
        if t.method != Method::Standard {
            self.attack_train.validate().map_err(|e| Error::Config(format!("attack_train: {e}")))?;
        }
        for a in &self.attack_eval {
            if !attack_names().contains(&a.method.as_str()) {
                return Err(Error::Config(format!(
                    "unknown attack '{}', expected one of {:?}",
                    a.method,
                    attack_names()
                )));
            }
            if a.spec.epsilon != 0.0 {
                a.spec.validate().map_err(|e| Error::Config(format!("attack_eval '{}': {e}", a.method)))?;
            }
        }
        let b = &self.bound;
        if !(b.gamma > 0.0) {
            return Err(Error::Config(format!("bound.gamma must be positive, got {}", b.gamma)));
        }
        Ok(())
    }

    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset.as_ref().ok_or_else(|| Error::Config("config has no dataset section".into()))? {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = data::load_idx(&self.resolve(train_images), &self.resolve(train_labels))?;
                let mut test = data::load_idx(&self.resolve(test_images), &self.resolve(test_labels))?;
                if let Some(n) = train_limit {
                    train = train.head(*n);
                }
                if let Some(n) = test_limit {
                    test = test.head(*n);
                }
                Ok((train, test))
            }
            &DatasetConfig::Blobs {
                num_classes,
                per_class,
                test_per_class,
                dim,
                spread,
                seed,
            } => {
                let all = data::synth_blobs(num_classes, per_class + test_per_class, dim, spread, seed)?;
                // rows are interleaved by class, so each prefix is balanced
                let split = num_classes * per_class;
                let train = all.head(split);
                let test_idx: Vec<usize> = (split..all.len()).collect();
                let mut test = all.subset(&test_idx);
                test.name = format!("{}-test", all.name);
                Ok((train, test))
            }
        }
    }

    pub fn layer_dims(&self, train: &Dataset) -> Vec<usize> {
        let mut dims = vec![train.dim()];
        dims.extend(&self.network.hidden);
        dims.push(train.num_classes);
        dims
    }

    pub fn simulate_family_name(&self) -> &'static str {
        match self.simulate.family {
            Fig3Family::Equicorrelation => "equicorrelation",
            Fig3Family::RandomCorrelation => "random_correlation",
        }
    }
}
