//! Run configuration: one flat file of `key = value` lines with dotted
//! keys, plus command-line overrides applied on top.
//!
//! ```text
//! # comments start with '#'
//! data.budget = 0.001
//! train.mode = cpcm
//! train.epochs = 30
//! mask.ratio = 0.75
//! eval.ratios = 0, 0.2, 0.4, 0.6, 0.8
//! ```
//!
//! Unknown keys and repeated keys within one source are errors. When
//! `train.alpha`, `train.beta` or `mask.region_size` are not given, they
//! follow the label budget (see [`LossWeights::for_budget`] and
//! [`region_size_for_budget`]).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experiment::{DataConfig, RunSpec};
use crate::losses::LossWeights;
use crate::masking::{region_size_for_budget, MaskStrategy};
use crate::model::ModelConfig;
use crate::pointcloud::LabelBudget;
use crate::trainer::{TrainConfig, TrainMode};

/// Where a setting came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Flag(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Flag(name) => write!(f, "flag {name}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

impl Entry {
    pub fn flag(name: &str, key: &str, value: impl ToString) -> Self {
        Self {
            key: key.to_string(),
            value: value.to_string(),
            origin: Origin::Flag(name.to_string()),
        }
    }

    /// Parses a `key=value` override.
    pub fn parse_override(s: &str) -> Result<Self> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
        Ok(Self::flag("--set", k.trim(), v.trim()))
    }
}

pub fn parse_entries(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, format!("expected key = value, found {line:?}")))?;
        let key = k.trim().to_string();
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::parse(path, i + 1, format!("duplicate key {key:?} (first set at {})", prev.origin)));
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
            origin: Origin::File {
                path: path.to_path_buf(),
                line: i + 1,
            },
        });
    }
    Ok(out)
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub region_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            seeds: vec![0, 1, 2],
            region_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub budget: LabelBudget,
    pub label_seed: u64,
    pub manifest: Option<PathBuf>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        // Resolved through `from_entries` so budget-dependent defaults apply.
        Self::from_entries(&[]).expect("defaults are valid")
    }
}

fn parse<T: FromStr>(e: &Entry) -> Result<T>
where
    T::Err: fmt::Display,
{
    e.value
        .parse()
        .map_err(|err| Error::Config(format!("{}: invalid value {:?} for {}: {err}", e.origin, e.value, e.key)))
}

fn parse_list<T: FromStr>(e: &Entry) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|err| Error::Config(format!("{}: invalid list item {s:?} for {}: {err}", e.origin, e.key)))
        })
        .collect()
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "scene.room",
    "scene.density",
    "scene.min_objects",
    "scene.max_objects",
    "scene.num_classes",
    "scene.color_noise",
    "scene.instance_color_jitter",
    "data.manifest",
    "data.train_scenes",
    "data.eval_scenes",
    "data.voxel_size",
    "data.budget",
    "data.budget_count",
    "train.mode",
    "train.epochs",
    "train.lr",
    "train.weight_decay",
    "train.poly_power",
    "train.momentum",
    "train.batch",
    "train.alpha",
    "train.beta",
    "mask.ratio",
    "mask.region_size",
    "mask.strategy",
    "augment.rotation",
    "augment.flip_prob",
    "augment.scale_min",
    "augment.scale_max",
    "augment.color_jitter",
    "augment.translation",
    "model.hidden_dim",
    "model.num_blocks",
    "model.k_neighbors",
    "eval.ratios",
    "eval.seeds",
    "eval.region_size",
    "seeds.data",
    "seeds.label",
    "seeds.train",
    "seeds.mask",
    "seeds.init",
];

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, &[])
    }

    /// Loads `path` and applies `overrides` on top (later entries win).
    pub fn load_with(path: impl AsRef<Path>, overrides: &[Entry]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut entries = parse_entries(&text, path)?;
        entries.extend_from_slice(overrides);
        Self::from_entries(&entries)
    }

    /// Builds a configuration from defaults and `entries`, applied in order.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut c = RunConfig {
            data: DataConfig::default(),
            budget: LabelBudget::Ratio(0.001),
            label_seed: 0,
            manifest: None,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
        };
        let mut alpha = None;
        let mut beta = None;
        let mut region_size = None;
        let mut budget_ratio = None;
        let mut budget_count = None;

        for e in entries {
            match e.key.as_str() {
                "scene.room" => {
                    let v: Vec<f64> = parse_list(e)?;
                    c.data.scene.room = v
                        .try_into()
                        .map_err(|_| Error::Config(format!("{}: scene.room needs three values", e.origin)))?;
                }
                "scene.density" => c.data.scene.density = parse(e)?,
                "scene.min_objects" => c.data.scene.min_objects = parse(e)?,
                "scene.max_objects" => c.data.scene.max_objects = parse(e)?,
                "scene.num_classes" => c.data.scene.num_classes = parse(e)?,
                "scene.color_noise" => c.data.scene.color_noise = parse(e)?,
                "scene.instance_color_jitter" => c.data.scene.instance_color_jitter = parse(e)?,
                "data.manifest" => c.manifest = Some(PathBuf::from(&e.value)),
                "data.train_scenes" => c.data.train_scenes = parse(e)?,
                "data.eval_scenes" => c.data.eval_scenes = parse(e)?,
                "data.voxel_size" => c.data.voxel_size = parse(e)?,
                "data.budget" => {
                    budget_ratio = Some(parse::<f64>(e)?);
                    budget_count = None;
                }
                "data.budget_count" => {
                    budget_count = Some(parse::<usize>(e)?);
                    budget_ratio = None;
                }
                "train.mode" => c.train.mode = parse(e)?,
                "train.epochs" => c.train.epochs = parse(e)?,
                "train.lr" => c.train.base_lr = parse(e)?,
                "train.weight_decay" => c.train.weight_decay = parse(e)?,
                "train.poly_power" => c.train.poly_power = parse(e)?,
                "train.momentum" => c.train.momentum = parse(e)?,
                "train.batch" => c.train.batch = parse(e)?,
                "train.alpha" => alpha = Some(parse::<f64>(e)?),
                "train.beta" => beta = Some(parse::<f64>(e)?),
                "mask.ratio" => c.train.mask.ratio = parse(e)?,
                "mask.region_size" => region_size = Some(parse::<usize>(e)?),
                "mask.strategy" => c.train.mask.strategy = parse::<MaskStrategy>(e)?,
                "augment.rotation" => c.train.augment.rotation = parse(e)?,
                "augment.flip_prob" => c.train.augment.flip_prob = parse(e)?,
                "augment.scale_min" => c.train.augment.scale_range.0 = parse(e)?,
                "augment.scale_max" => c.train.augment.scale_range.1 = parse(e)?,
                "augment.color_jitter" => c.train.augment.color_jitter = parse(e)?,
                "augment.translation" => c.train.augment.translation = parse(e)?,
                "model.hidden_dim" => c.model.hidden_dim = parse(e)?,
                "model.num_blocks" => c.model.num_blocks = parse(e)?,
                "model.k_neighbors" => c.model.k_neighbors = parse(e)?,
                "eval.ratios" => c.eval.ratios = parse_list(e)?,
                "eval.seeds" => c.eval.seeds = parse_list(e)?,
                "eval.region_size" => c.eval.region_size = parse(e)?,
                "seeds.data" => c.data.data_seed = parse(e)?,
                "seeds.label" => c.label_seed = parse(e)?,
                "seeds.train" => c.train.seed = parse(e)?,
                "seeds.mask" => c.train.mask_seed = parse(e)?,
                "seeds.init" => c.model.init_seed = parse(e)?,
                other => {
                    return Err(Error::Config(format!("{}: unknown key {other:?}", e.origin)));
                }
            }
        }

        c.budget = match (budget_ratio, budget_count) {
            (_, Some(n)) => LabelBudget::Count(n),
            (Some(r), None) => LabelBudget::Ratio(r),
            (None, None) => LabelBudget::Ratio(0.001),
        };
        let ratio_for_defaults = match c.budget {
            LabelBudget::Ratio(r) => r,
            // Counts carry no ratio; use the higher-budget defaults.
            LabelBudget::Count(_) => 1.0,
        };
        let weights = LossWeights::for_budget(ratio_for_defaults);
        c.train.weights = LossWeights::new(alpha.unwrap_or(weights.alpha), beta.unwrap_or(weights.beta))?;
        c.train.mask.region_size = region_size.unwrap_or_else(|| region_size_for_budget(ratio_for_defaults));
        if c.train.mode == TrainMode::CeOnly {
            c.train.weights = LossWeights { alpha: 0.0, beta: 0.0 };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        if self.data.voxel_size < 0.0 || !self.data.voxel_size.is_finite() {
            return Err(Error::Config(format!("data.voxel_size must be >= 0, got {}", self.data.voxel_size)));
        }
        match self.budget {
            LabelBudget::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                return Err(Error::Config(format!("data.budget must be in (0, 1], got {r}")));
            }
            LabelBudget::Count(0) => return Err(Error::Config("data.budget_count must be positive".into())),
            _ => {}
        }
        self.train.validate()?;
        self.model.validate()?;
        if self.eval.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!("eval.ratios must lie in [0, 1]: {:?}", self.eval.ratios)));
        }
        if self.eval.seeds.is_empty() || self.eval.region_size == 0 {
            return Err(Error::Config("eval.seeds must be non-empty and eval.region_size positive".into()));
        }
        Ok(())
    }

    /// A single training run as configured.
    pub fn run_spec(&self, label: impl Into<String>) -> RunSpec {
        RunSpec {
            label: label.into(),
            train: self.train.clone(),
            model: self.model.clone(),
            budget: self.budget,
            label_seed: self.label_seed,
            mask_eval_ratios: Vec::new(),
            mask_eval_region_size: self.eval.region_size,
            mask_eval_seeds: self.eval.seeds.clone(),
        }
    }

    /// The budget as a ratio, if it is one.
    pub fn budget_ratio(&self) -> Option<f64> {
        match self.budget {
            LabelBudget::Ratio(r) => Some(r),
            LabelBudget::Count(_) => None,
        }
    }
}
