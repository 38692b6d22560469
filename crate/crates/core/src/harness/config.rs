use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, LayerSpec};
use crate::optim::TrainConfig;
use crate::render::RenderOptions;
use crate::surface::GridSpec;

fn cfg_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArchitectureConfig {
    /// Fully connected ReLU network.
    MlpSmall {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
    LenetStyle,
    /// The lenet-style stack with one identity-shortcut block after the second pool.
    LenetStyleResidual,
    Custom {
        layers: Vec<LayerSpec>,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig::MlpSmall {
            hidden: default_hidden(),
        }
    }
}

impl ArchitectureConfig {
    pub fn preset_name(&self) -> &'static str {
        match self {
            ArchitectureConfig::MlpSmall { .. } => "mlp-small",
            ArchitectureConfig::LenetStyle => "lenet-style",
            ArchitectureConfig::LenetStyleResidual => "lenet-style-residual",
            ArchitectureConfig::Custom { .. } => "custom",
        }
    }

    /// Resolves the preset against the dataset's example shape and class count.
    pub fn build(&self, input_shape: &[usize], classes: usize) -> Result<ArchSpec> {
        let input = input_shape.to_vec();
        let layers = match self {
            ArchitectureConfig::MlpSmall { hidden } => {
                let mut layers = Vec::new();
                if input.len() > 1 {
                    layers.push(LayerSpec::Flatten);
                }
                let mut width: usize = input.iter().product();
                for &h in hidden {
                    layers.push(LayerSpec::dense(width, h));
                    layers.push(LayerSpec::Relu);
                    width = h;
                }
                layers.push(LayerSpec::dense(width, classes));
                layers
            }
            ArchitectureConfig::LenetStyle | ArchitectureConfig::LenetStyleResidual => {
                let [c, h, w] = input[..] else {
                    return Err(cfg_err(
                        "architecture",
                        format!("{} needs image input [channels, height, width], got {input:?}", self.preset_name()),
                    ));
                };
                let side = |s: usize| s.checked_sub(4).map(|s| s / 2).and_then(|s| s.checked_sub(4)).map(|s| s / 2);
                let (Some(oh), Some(ow)) = (side(h), side(w)) else {
                    return Err(cfg_err("architecture", format!("image {h}x{w} too small for two 5x5 convolutions")));
                };
                if oh == 0 || ow == 0 {
                    return Err(cfg_err("architecture", format!("image {h}x{w} too small for two 5x5 convolutions")));
                }
                let mut layers = vec![
                    LayerSpec::conv2d(c, 6, 5),
                    LayerSpec::batch_norm(6),
                    LayerSpec::Relu,
                    LayerSpec::avg_pool(2),
                    LayerSpec::conv2d(6, 16, 5),
                    LayerSpec::batch_norm(16),
                    LayerSpec::Relu,
                    LayerSpec::avg_pool(2),
                ];
                if matches!(self, ArchitectureConfig::LenetStyleResidual) {
                    let source = layers.len() - 1;
                    layers.extend([
                        LayerSpec::Conv2d {
                            in_channels: 16,
                            out_channels: 16,
                            kernel: 3,
                            stride: 1,
                            padding: 1,
                        },
                        LayerSpec::batch_norm(16),
                        LayerSpec::Relu,
                        LayerSpec::residual_add(source),
                    ]);
                }
                layers.extend([
                    LayerSpec::Flatten,
                    LayerSpec::dense(16 * oh * ow, 120),
                    LayerSpec::Relu,
                    LayerSpec::dropout(0.5),
                    LayerSpec::dense(120, 84),
                    LayerSpec::Relu,
                    LayerSpec::dense(84, classes),
                ]);
                layers
            }
            ArchitectureConfig::Custom { layers } => layers.clone(),
        };
        Ok(ArchSpec::new(input, layers))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_dims")]
        dims: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar {
        train_batches: Vec<PathBuf>,
        test_batches: Vec<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn default_classes() -> usize {
    4
}
fn default_per_class() -> usize {
    500
}
fn default_dims() -> usize {
    16
}
fn default_separation() -> f64 {
    6.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth {
            classes: default_classes(),
            per_class: default_per_class(),
            dims: default_dims(),
            separation: default_separation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Examples per surface point.
    pub n: usize,
    pub seed: u64,
    /// Tolerance for the flat-area statistic.
    pub flat_epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 250,
            seed: 0,
            flat_epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectionConfig {
    pub seeds: (u64, u64),
    /// Extra surfaces with fresh direction pairs.
    pub repeats: usize,
}

impl Default for DirectionConfig {
    fn default() -> Self {
        DirectionConfig {
            seeds: (1, 2),
            repeats: 1,
        }
    }
}

impl DirectionConfig {
    /// Seeds for repeat `r`; repeat 0 uses the configured pair.
    pub fn seeds_for(&self, r: usize) -> (u64, u64) {
        let shift = 2 * r as u64;
        (self.seeds.0.wrapping_add(shift), self.seeds.1.wrapping_add(shift))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub batch_sizes: Vec<usize>,
    pub eval_counts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            batch_sizes: vec![2, 16, 160, 1600, 16000],
            eval_counts: vec![1, 10, 100, 1000, 3000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpConfig {
    pub prune_fraction: f64,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub random_mask_seed: u64,
    /// Rounds that get surfaces; empty means every round.
    pub surface_rounds: Vec<usize>,
}

impl Default for ImpConfig {
    fn default() -> Self {
        ImpConfig {
            prune_fraction: 0.1,
            rounds: 10,
            epochs_per_round: 35,
            random_mask_seed: 0,
            surface_rounds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives network initialization, synthetic data, and the validation holdout.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub directions: DirectionConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub imp: ImpConfig,
    #[serde(default)]
    pub render: RenderOptions,
}

fn default_holdout() -> f64 {
    0.1
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            architecture: ArchitectureConfig::default(),
            dataset: DatasetConfig::default(),
            holdout_fraction: default_holdout(),
            data_dir: None,
            out_dir: default_out(),
            train: TrainConfig::default(),
            grid: GridSpec::default(),
            eval: EvalConfig::default(),
            directions: DirectionConfig::default(),
            sweep: SweepConfig::default(),
            imp: ImpConfig::default(),
            render: RenderOptions::default(),
        }
    }
}

/// Train, validation and test splits materialized from a config.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl LoadedData {
    pub fn splits(&self) -> crate::pruning::Splits<'_> {
        crate::pruning::Splits {
            train: &self.train,
            val: &self.val,
            test: &self.test,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("byte {}..{}", s.start, s.end)).unwrap_or_default();
            cfg_err(if field.is_empty() { "config" } else { &field }, e.message().to_string())
        })
    }

    /// Parses a TOML file and checks that every referenced data file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, detail } => Error::Config {
                field: format!("{}: {field}", path.display()),
                detail,
            },
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.grid.validate()?;
        self.render.validate()?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(cfg_err("holdout_fraction", "must lie in (0, 1)"));
        }
        if self.eval.n == 0 {
            return Err(cfg_err("eval.n", "must be positive"));
        }
        if !(self.eval.flat_epsilon > 0.0) {
            return Err(cfg_err("eval.flat_epsilon", "must be positive"));
        }
        if self.directions.seeds.0 == self.directions.seeds.1 {
            return Err(cfg_err("directions.seeds", "the two seeds must differ"));
        }
        if self.directions.repeats == 0 {
            return Err(cfg_err("directions.repeats", "must be at least 1"));
        }
        if !(self.imp.prune_fraction > 0.0 && self.imp.prune_fraction < 1.0) {
            return Err(cfg_err("imp.prune_fraction", "must lie in (0, 1)"));
        }
        for path in self.data_files() {
            if !path.is_file() {
                return Err(cfg_err("dataset", format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    fn data_files(&self) -> Vec<PathBuf> {
        let dir = self.data_dir.as_deref();
        match &self.dataset {
            DatasetConfig::Synth { .. } => Vec::new(),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => [train_images, train_labels, test_images, test_labels]
                .into_iter()
                .map(|p| data::resolve(dir, p))
                .collect(),
            DatasetConfig::Cifar {
                train_batches,
                test_batches,
                ..
            } => train_batches
                .iter()
                .chain(test_batches)
                .map(|p| data::resolve(dir, p))
                .collect(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form of the whole config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Metadata attached to every artifact a command writes.
    pub fn artifact_meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_digest".to_string(), self.digest()),
            ("config".to_string(), serde_json::to_string(self).expect("config serializes")),
        ])
    }

    pub fn load_data(&self) -> Result<LoadedData> {
        let dir = self.data_dir.as_deref();
        let limit = |d: Dataset, n: &Option<usize>| match n {
            Some(n) if *n < d.len() => d.take(*n),
            _ => Ok(d),
        };
        let (train, test) = match &self.dataset {
            DatasetConfig::Synth {
                classes,
                per_class,
                dims,
                separation,
            } => data::synth_blobs(*classes, *per_class, *dims, *separation, self.seed)?,
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit: l,
                test_limit,
            } => {
                let train = data::load_idx(data::resolve(dir, train_images), data::resolve(dir, train_labels))?;
                let test = data::load_idx(data::resolve(dir, test_images), data::resolve(dir, test_labels))?;
                (limit(train, l)?, limit(test, test_limit)?)
            }
            DatasetConfig::Cifar {
                train_batches,
                test_batches,
                limit: l,
                test_limit,
            } => {
                let resolve = |ps: &[PathBuf]| ps.iter().map(|p| data::resolve(dir, p)).collect::<Vec<_>>();
                let train = data::load_cifar10(&resolve(train_batches))?;
                let test = data::load_cifar10(&resolve(test_batches))?;
                (limit(train, l)?, limit(test, test_limit)?)
            }
        };
        let (train, val) = train.holdout(self.holdout_fraction, self.seed)?;
        debug_assert_eq!(test.split(), Split::Test);
        Ok(LoadedData { train, val, test })
    }

    pub fn arch_spec(&self, data: &LoadedData) -> Result<ArchSpec> {
        self.architecture.build(data.train.example_shape(), data.train.classes())
    }
}
