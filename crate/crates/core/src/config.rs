//! Run configuration: a flat `key = value` file plus overrides.
//!
//! ```text
//! # MNIST, two dense layers
//! model = fc:784-400-10
//! timesteps = 4
//! budgets = 0.25, 0.05
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_mnist, synthetic_dataset, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::minimax::schedule::validate_budgets;
use crate::minimax::{BudgetSchedule, Etas, FinetunePolicy, PruningState, RunSettings, SparsityMode};
use crate::optim::{LrPolicy, OptimizerKind};
use crate::resource::ResourceKind;
use crate::snn::{Architecture, LifParams, LossKind, SpikingNetwork, DEFAULT_MIN_PRUNABLE};
use crate::sparsity::{Granularity, DEFAULT_SNAP_EPS};

/// Environment variable naming the MNIST directory.
pub const DATA_DIR_ENV: &str = "SNN_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Mnist,
    Synthetic { train: SyntheticSpec, test_samples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    Scratch,
    Pretrained(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub dataset: DatasetSpec,
    pub data_dir: Option<PathBuf>,
    /// Use only the first `n` training / test samples (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub timesteps: usize,
    pub lif: LifParams,
    pub detach_reset: bool,
    pub bias: bool,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub loss: LossKind,
    pub epochs: usize,
    pub epoch_cap: usize,
    /// Proximal step size; the base learning rate when unset.
    pub eta1: Option<f64>,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
    pub budgets: Vec<f64>,
    pub finetune_policy: FinetunePolicy,
    pub finetune_lr: LrPolicy,
    pub sparsity_mode: SparsityMode,
    pub granularity: Granularity,
    pub resource: ResourceKind,
    pub seed: u64,
    pub snap_eps: f64,
    pub init: Option<InitMode>,
    pub min_prunable: usize,
    pub regrow: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let etas = Etas::default();
        Self {
            model: "fc:784-400-10".into(),
            dataset: DatasetSpec::Mnist,
            data_dir: None,
            train_limit: 0,
            test_limit: 0,
            timesteps: 8,
            lif: LifParams::default(),
            detach_reset: true,
            bias: false,
            optimizer: OptimizerChoice::Adam,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 100,
            eval_batch: 1000,
            loss: LossKind::Mse,
            epochs: 20,
            epoch_cap: 0,
            eta1: None,
            eta2: etas.eta2,
            eta3: etas.eta3,
            eta4: etas.eta4,
            budgets: Vec::new(),
            finetune_policy: FinetunePolicy::Weighted,
            finetune_lr: LrPolicy::Cosine { initial: 0.001 },
            sparsity_mode: SparsityMode::Global,
            granularity: Granularity::Unstructured,
            resource: ResourceKind::Connectivity,
            seed: 0,
            snap_eps: DEFAULT_SNAP_EPS,
            init: None,
            min_prunable: DEFAULT_MIN_PRUNABLE,
            regrow: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn synthetic_mut<'a>(cfg: &'a mut RunConfig, key: &str) -> Result<(&'a mut SyntheticSpec, &'a mut usize)> {
    match &mut cfg.dataset {
        DatasetSpec::Synthetic { train, test_samples } => Ok((train, test_samples)),
        DatasetSpec::Mnist => Err(Error::config(key, "only valid with dataset = synthetic")),
    }
}

impl RunConfig {
    /// Parse a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", no + 1), format!("expected key = value, got `{line}`")))?;
            cfg.apply_override(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Set one key.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => {
                value.parse::<Architecture>().map_err(|e| Error::config(key, e.to_string()))?;
                self.model = value.to_string();
            }
            "dataset" => {
                self.dataset = match value {
                    "mnist" => DatasetSpec::Mnist,
                    "synthetic" => DatasetSpec::Synthetic {
                        train: SyntheticSpec::default(),
                        test_samples: 256,
                    },
                    _ => return Err(Error::config(key, format!("unknown dataset `{value}`"))),
                }
            }
            "synthetic_samples" => synthetic_mut(self, key)?.0.samples = parse(key, value)?,
            "synthetic_test_samples" => *synthetic_mut(self, key)?.1 = parse(key, value)?,
            "synthetic_classes" => synthetic_mut(self, key)?.0.classes = parse(key, value)?,
            "synthetic_features" => synthetic_mut(self, key)?.0.features = parse(key, value)?,
            "synthetic_spread" => synthetic_mut(self, key)?.0.spread = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "train_limit" => self.train_limit = parse(key, value)?,
            "test_limit" => self.test_limit = parse(key, value)?,
            "timesteps" => self.timesteps = parse(key, value)?,
            "tau_m" => self.lif.tau_m = parse(key, value)?,
            "v_rest" => self.lif.v_rest = parse(key, value)?,
            "v_th" => self.lif.v_th = parse(key, value)?,
            "detach_reset" => self.detach_reset = parse_bool(key, value)?,
            "bias" => self.bias = parse_bool(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerChoice::Adam,
                    "sgd" => OptimizerChoice::Sgd,
                    _ => return Err(Error::config(key, format!("expected adam or sgd, got `{value}`"))),
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eval_batch" => self.eval_batch = parse(key, value)?,
            "loss" => {
                self.loss = match value {
                    "mse" => LossKind::Mse,
                    "ce" | "cross_entropy" => LossKind::CrossEntropy,
                    _ => return Err(Error::config(key, format!("expected mse or ce, got `{value}`"))),
                }
            }
            "epochs" | "total_epochs" => self.epochs = parse(key, value)?,
            "epoch_cap" => self.epoch_cap = parse(key, value)?,
            "eta1" => self.eta1 = Some(parse(key, value)?),
            "eta2" => self.eta2 = parse(key, value)?,
            "eta3" | "ylr" => self.eta3 = parse(key, value)?,
            "eta4" | "zlr" => self.eta4 = parse(key, value)?,
            "budgets" => {
                self.budgets = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?;
            }
            "finetune_policy" => {
                self.finetune_policy = match value.split_once(':') {
                    None if value == "weighted" => FinetunePolicy::Weighted,
                    Some(("fixed", n)) => FinetunePolicy::Fixed(parse(key, n)?),
                    _ => return Err(Error::config(key, format!("expected weighted or fixed:N, got `{value}`"))),
                }
            }
            "finetune_lr" => {
                self.finetune_lr = match value.split_once(':') {
                    None if value == "constant" => LrPolicy::Constant,
                    None if value == "cosine" => LrPolicy::Cosine { initial: 0.001 },
                    Some(("cosine", lr)) => LrPolicy::Cosine {
                        initial: parse(key, lr)?,
                    },
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected constant or cosine[:LR], got `{value}`"),
                        ))
                    }
                }
            }
            "sparsity_mode" => self.sparsity_mode = parse(key, value)?,
            "granularity" => self.granularity = parse(key, value)?,
            "resource" => self.resource = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "snap_eps" => self.snap_eps = parse(key, value)?,
            "init" => {
                self.init = Some(match value.split_once(':') {
                    None if value == "scratch" => InitMode::Scratch,
                    Some(("pretrained", p)) if !p.is_empty() => InitMode::Pretrained(PathBuf::from(p)),
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected scratch or pretrained:PATH, got `{value}`"),
                        ))
                    }
                })
            }
            "min_prunable" => self.min_prunable = parse(key, value)?,
            "regrow" => self.regrow = parse_bool(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::config("timesteps", "must be at least 1"));
        }
        self.lif.validate().map_err(|e| Error::config("tau_m/v_rest/v_th", e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        validate_budgets(&self.budgets).map_err(|e| Error::config("budgets", e.to_string()))?;
        self.etas().validate().map_err(|e| Error::config("eta1..eta4", e.to_string()))?;
        if !(self.snap_eps.is_finite() && self.snap_eps >= 0.0) {
            return Err(Error::config("snap_eps", "must be >= 0"));
        }
        if let DatasetSpec::Synthetic { train, test_samples } = &self.dataset {
            if train.samples == 0 || train.classes == 0 || train.features == 0 || *test_samples == 0 {
                return Err(Error::config("synthetic_*", "sizes must be at least 1"));
            }
            if !(train.spread.is_finite() && train.spread >= 0.0) {
                return Err(Error::config("synthetic_spread", "must be >= 0"));
            }
        }
        let arch = self.architecture()?;
        let input: usize = arch.input_shape.iter().product();
        let (features, classes) = match &self.dataset {
            DatasetSpec::Mnist => (784, 10),
            DatasetSpec::Synthetic { train, .. } => (train.features, train.classes),
        };
        let out = arch.geometries().map_err(|e| Error::config("model", e.to_string()))?;
        let outputs = out.last().map_or(0, |k| k.output_len());
        if input != features || outputs < classes {
            return Err(Error::config(
                "model",
                format!("{arch} does not map {features} features to {classes} classes"),
            ));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.model.parse().map_err(|e: Error| Error::config("model", e.to_string()))
    }

    pub fn etas(&self) -> Etas {
        Etas {
            eta1: self.eta1.unwrap_or(self.lr),
            eta2: self.eta2,
            eta3: self.eta3,
            eta4: self.eta4,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::adam(),
            OptimizerChoice::Sgd => OptimizerKind::sgd(self.momentum, self.weight_decay),
        }
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer_kind(),
            loss: self.loss,
            snap_eps: self.snap_eps,
            regrow: self.regrow,
            epoch_cap: self.epoch_cap,
            eval_batch: self.eval_batch,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> Result<BudgetSchedule> {
        BudgetSchedule::new(self.budgets.clone(), self.epochs, self.finetune_policy, self.finetune_lr)
    }

    /// Freshly initialised network, seeded from `seed`.
    pub fn build_network(&self) -> Result<SpikingNetwork> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1417_5eed);
        let mut net = SpikingNetwork::init(&self.architecture()?, self.timesteps, self.lif, self.bias, &mut rng)?;
        net.detach_reset = self.detach_reset;
        net.mark_prunable(self.min_prunable);
        Ok(net)
    }

    pub fn pruning_state(&self, net: &SpikingNetwork) -> PruningState {
        PruningState::new(net, self.sparsity_mode, self.granularity, self.etas())
    }

    /// Directory holding the MNIST files: `data_dir`, else `$SNN_DATA_DIR`, else `data/mnist`.
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }

    /// Training and test sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.dataset {
            DatasetSpec::Mnist => {
                let dir = self.resolved_data_dir();
                (load_mnist(&dir, Split::Train)?, load_mnist(&dir, Split::Test)?)
            }
            DatasetSpec::Synthetic { train, test_samples } => {
                let test_spec = SyntheticSpec {
                    samples: *test_samples,
                    ..*train
                };
                (
                    synthetic_dataset(self.seed, *train, Split::Train)?,
                    synthetic_dataset(self.seed.wrapping_add(0x7e57), test_spec, Split::Test)?,
                )
            }
        };
        let limit = |d: Dataset, n: usize| if n == 0 { Ok(d) } else { d.take(n) };
        Ok((limit(train, self.train_limit)?, limit(test, self.test_limit)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_with_comments() {
        let cfg = RunConfig::parse(
            "# comment\nmodel = fc:784-100-10\n\ntimesteps=4 # trailing\nbudgets = 0.25, 0.1\nfinetune_policy = fixed:3\nfinetune_lr = constant\ninit = pretrained:/tmp/b.ckpt\n",
        )
        .unwrap();
        assert_eq!(cfg.model, "fc:784-100-10");
        assert_eq!(cfg.timesteps, 4);
        assert_eq!(cfg.budgets, vec![0.25, 0.1]);
        assert_eq!(cfg.finetune_policy, FinetunePolicy::Fixed(3));
        assert_eq!(cfg.finetune_lr, LrPolicy::Constant);
        assert_eq!(cfg.init, Some(InitMode::Pretrained("/tmp/b.ckpt".into())));
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse("timesteps = four").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "timesteps"));
        let err = RunConfig::parse("colour = blue").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "colour"));
        let err = RunConfig::parse("synthetic_classes = 3").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "synthetic_classes"));
        let mut cfg = RunConfig::default();
        cfg.apply_override("budgets", "0.1,0.25").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "budgets"));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::parse("lr = 0.01").unwrap();
        cfg.apply_override("lr", "0.5").unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.etas().eta1, 0.5);
        cfg.apply_override("eta1", "0.2").unwrap();
        assert_eq!(cfg.etas().eta1, 0.2);
    }

    #[test]
    fn model_must_fit_dataset() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("dataset", "synthetic").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply_override("model", "fc:16-8-4").unwrap();
        cfg.validate().unwrap();
        let (train, test) = cfg.load_data().unwrap();
        assert_eq!(train.len(), 512);
        assert_eq!(test.len(), 256);
    }
}
