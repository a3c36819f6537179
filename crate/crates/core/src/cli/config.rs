//! Experiment configuration file.
//!
//! TOML. Every key has a default and unknown keys are rejected. Full
//! schema with defaults:
//!
//! ```toml
//! [experiment]
//! name = "demo"          # run label
//! seed = 0               # root of every derived seed
//! parallel_runs = 1      # worker threads; --jobs overrides
//!
//! [data]
//! dataset = "synthetic"  # synthetic | mnist | cifar10
//! path = ""              # directory for mnist / cifar10
//! aux_mode = "named_split"   # named_split | fraction
//! aux_fraction = 0.5     # used with aux_mode = "fraction"
//! num_targets = 4
//! batch_size = 1
//! aux_classes = []       # restrict the prior's training images; [] = all
//! target_classes = []    # restrict attacked images; [] = all
//! synthetic_train = 256  # synthetic only
//! synthetic_test = 64
//! image_size = 16
//! channels = 3
//! num_classes = 10
//!
//! [model]
//! arch = "convnet"       # dense1 | mlp2 | convnet
//! init = "kaiming"       # kaiming | normal
//! init_sigma = 0.1       # normal only
//!
//! [prior]
//! enabled = true
//! epochs = 50
//! lr = 1e-3
//! batch_size = 64
//! model_path = "prior.gipip"   # relative paths resolve against the output dir
//!
//! [attack]
//! method = "gipip"       # gipip | ig | dlg
//! lr = 0.1
//! iterations = 4000
//! lambda_tv = 1e-2       # default 0 for dlg
//! lambda_as = 1e-4       # default 0 for ig and dlg
//! restarts = 1
//! clamp = true
//! record_every = 50
//! reduction = "sum"      # sum | mean
//! dlg_optimizer = "lbfgs"    # lbfgs | adam
//! assignment = true      # optimal pairing of recovered and true images
//!
//! [ablation]
//! weights = [0.0, 1e-5, 1e-4, 1e-3, 1e-2]
//! seeds = [0, 1, 2, 3, 4]
//!
//! [output]
//! dir = "out"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, DlgOptimizer, Method};
use crate::error::{Error, Result};
use crate::flsim::AuxMode;
use crate::losses::{LossWeights, RegReduction};
use crate::nn::{Arch, InitScheme};
use crate::prior::PriorTrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub prior: PriorSection,
    pub attack: AttackSection,
    pub ablation: AblationSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
    pub parallel_runs: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { name: "experiment".into(), seed: 0, parallel_runs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dataset: String,
    pub path: String,
    pub aux_mode: String,
    pub aux_fraction: f64,
    pub num_targets: usize,
    pub batch_size: usize,
    pub aux_classes: Vec<usize>,
    pub target_classes: Vec<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: "synthetic".into(),
            path: String::new(),
            aux_mode: "named_split".into(),
            aux_fraction: 0.5,
            num_targets: 4,
            batch_size: 1,
            aux_classes: vec![],
            target_classes: vec![],
            synthetic_train: 256,
            synthetic_test: 64,
            image_size: 16,
            channels: 3,
            num_classes: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: String,
    pub init: String,
    pub init_sigma: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { arch: "convnet".into(), init: "kaiming".into(), init_sigma: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub model_path: String,
}

impl Default for PriorSection {
    fn default() -> Self {
        let d = PriorTrainConfig::default();
        PriorSection {
            enabled: true,
            epochs: d.epochs,
            lr: d.learning_rate,
            batch_size: d.batch_size,
            model_path: "prior.gipip".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub method: String,
    pub lr: f64,
    pub iterations: usize,
    pub lambda_tv: Option<f64>,
    pub lambda_as: Option<f64>,
    pub restarts: usize,
    pub clamp: bool,
    pub record_every: usize,
    pub reduction: String,
    pub dlg_optimizer: String,
    pub assignment: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            method: "gipip".into(),
            lr: 0.1,
            iterations: 4000,
            lambda_tv: None,
            lambda_as: None,
            restarts: 1,
            clamp: true,
            record_every: 50,
            reduction: "sum".into(),
            dlg_optimizer: "lbfgs".into(),
            assignment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub weights: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { weights: vec![0.0, 1e-5, 1e-4, 1e-3, 1e-2], seeds: vec![0, 1, 2, 3, 4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

/// Dataset source after validation.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { train: usize, test: usize, shape: [usize; 3], num_classes: usize },
    Mnist(PathBuf),
    Cifar10(PathBuf),
}

/// Everything the commands need, parsed into library types.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub source: DataSource,
    pub aux_mode: AuxMode,
    pub arch: Arch,
    pub init: InitScheme,
    pub prior: PriorTrainConfig,
    pub attack: AttackConfig,
    pub output_dir: PathBuf,
    pub model_path: PathBuf,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

fn nonneg_weight(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(Error::config(format!("{name} must be finite and >= 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn method(&self) -> Result<Method> {
        self.attack.method.parse()
    }

    /// Validates every field and builds library-level settings.
    pub fn resolve(&self) -> Result<Resolved> {
        let d = &self.data;
        let source = match d.dataset.as_str() {
            "synthetic" => {
                if d.channels == 0 || d.image_size == 0 || d.num_classes < 2 || d.synthetic_train == 0 {
                    return Err(Error::config(
                        "synthetic data needs channels, image_size, synthetic_train >= 1 and num_classes >= 2",
                    ));
                }
                DataSource::Synthetic {
                    train: d.synthetic_train,
                    test: d.synthetic_test,
                    shape: [d.channels, d.image_size, d.image_size],
                    num_classes: d.num_classes,
                }
            }
            "mnist" | "cifar10" if d.path.is_empty() => {
                return Err(Error::config(format!("[data] path is required for {}", d.dataset)))
            }
            "mnist" => DataSource::Mnist(PathBuf::from(&d.path)),
            "cifar10" => DataSource::Cifar10(PathBuf::from(&d.path)),
            other => return Err(Error::config(format!("unknown dataset {other:?} (synthetic, mnist, cifar10)"))),
        };
        let aux_mode = match d.aux_mode.as_str() {
            "named_split" => AuxMode::NamedSplit,
            "fraction" => {
                if !(d.aux_fraction > 0.0 && d.aux_fraction < 1.0) {
                    return Err(Error::config(format!("aux_fraction must lie in (0, 1), got {}", d.aux_fraction)));
                }
                AuxMode::Fraction(d.aux_fraction)
            }
            other => return Err(Error::config(format!("unknown aux_mode {other:?} (named_split, fraction)"))),
        };
        if d.batch_size == 0 || d.num_targets == 0 {
            return Err(Error::config("num_targets and batch_size must be at least 1"));
        }
        if d.num_targets % d.batch_size != 0 {
            return Err(Error::config(format!(
                "num_targets {} is not a multiple of batch_size {}",
                d.num_targets, d.batch_size
            )));
        }
        if d.batch_size > 8 && self.attack.assignment {
            return Err(Error::config("optimal assignment supports batch sizes up to 8"));
        }
        if self.experiment.parallel_runs == 0 {
            return Err(Error::config("parallel_runs must be at least 1"));
        }

        let arch: Arch = self.model.arch.parse()?;
        let seed = self.experiment.seed;
        let init = match self.model.init.as_str() {
            "kaiming" => InitScheme::kaiming(derive_seed(seed, Stream::Model, 0)),
            "normal" => InitScheme::normal(
                nonneg_weight("init_sigma", self.model.init_sigma)?,
                derive_seed(seed, Stream::Model, 0),
            ),
            other => return Err(Error::config(format!("unknown init {other:?} (kaiming, normal)"))),
        };

        let prior = PriorTrainConfig {
            epochs: self.prior.epochs,
            learning_rate: self.prior.lr,
            batch_size: self.prior.batch_size,
            seed: derive_seed(seed, Stream::PriorShuffle, 0),
        };
        prior.validate()?;

        let a = &self.attack;
        let method = self.method()?;
        let default = AttackConfig::for_method(method);
        let weights = LossWeights {
            lambda_as: nonneg_weight("lambda_as", a.lambda_as.unwrap_or(default.weights.lambda_as))?,
            lambda_tv: nonneg_weight("lambda_tv", a.lambda_tv.unwrap_or(default.weights.lambda_tv))?,
        };
        let attack = AttackConfig {
            method,
            learning_rate: a.lr,
            iterations: a.iterations,
            weights,
            restarts: a.restarts,
            seed: derive_seed(seed, Stream::Attack, 0),
            clamp_to_unit_box: a.clamp,
            record_every: a.record_every,
            reduction: a.reduction.parse::<RegReduction>()?,
            dlg_optimizer: a.dlg_optimizer.parse::<DlgOptimizer>()?,
        };
        attack.validate()?;
        if method == Method::GiPip && !self.prior.enabled {
            return Err(Error::config("method gipip needs [prior] enabled = true"));
        }

        let output_dir = PathBuf::from(&self.output.dir);
        let mp = PathBuf::from(&self.prior.model_path);
        let model_path = if mp.is_absolute() { mp } else { output_dir.join(mp) };
        Ok(Resolved { source, aux_mode, arch, init, prior, attack, output_dir, model_path })
    }

    pub fn validate_ablation(&self) -> Result<()> {
        let ab = &self.ablation;
        if ab.weights.len() < 2 {
            return Err(Error::config("ablation needs at least two weights"));
        }
        for &w in &ab.weights {
            nonneg_weight("ablation weight", w)?;
        }
        if ab.seeds.is_empty() {
            return Err(Error::config("ablation needs at least one seed"));
        }
        Ok(())
    }
}

/// Independent random streams derived from the experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Model = 2,
    PriorInit = 3,
    PriorShuffle = 4,
    Partition = 5,
    Attack = 6,
}

/// SplitMix64 finaliser over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add((stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
