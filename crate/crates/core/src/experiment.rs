//! Multi-seed experiment cells: dataset preparation, one training run per
//! (configuration, seed) and seed-averaged summaries.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{evaluate, masked_evaluation, mean_sd, EvalScene, MaskedEvalRow};
use crate::model::{ModelConfig, ModelParams};
use crate::pointcloud::{load_scene, sample_weak_labels, voxel_downsample, LabelBudget, PointCloud, Scene, WeakLabels};
use crate::seed::{self, stream};
use crate::synth::{generate_dataset, read_manifest, SceneConfig, Split};
use crate::trainer::{train, StepRecord, TrainConfig, TrainMode, TrainScene};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Voxel edge applied at load time; 0 disables voxelization.
    pub voxel_size: f64,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train_scenes: 20,
            eval_scenes: 5,
            voxel_size: 0.1,
            data_seed: 0,
        }
    }
}

/// A voxelized scene with dense ground truth, plus the raw scene it came
/// from.
#[derive(Clone, Debug)]
pub struct DenseScene {
    pub raw: Scene,
    pub cloud: PointCloud,
    pub truth: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<DenseScene>,
    pub eval: Vec<EvalScene>,
    pub num_classes: usize,
    pub voxel_size: f64,
}

fn voxelize(cloud: &PointCloud, labels: &[i32], voxel_size: f64) -> Result<(PointCloud, Vec<i32>)> {
    if voxel_size > 0.0 {
        voxel_downsample(cloud, labels, voxel_size)
    } else {
        Ok((cloud.clone(), labels.to_vec()))
    }
}

fn densify(scene: &Scene, voxel_size: f64) -> Result<DenseScene> {
    let (cloud, labels) = voxelize(&scene.cloud, &scene.labels, voxel_size)?;
    let truth = Scene::new(cloud.clone(), labels, scene.num_classes)?.dense_labels()?;
    Ok(DenseScene {
        raw: scene.clone(),
        cloud,
        truth,
    })
}

/// Samples weak labels on the raw points of `scene`, then voxelizes; a
/// voxel is labeled by majority vote over its labeled raw points.
pub fn weak_scene(scene: &Scene, budget: LabelBudget, voxel_size: f64, label_seed: u64) -> Result<TrainScene> {
    let weak = sample_weak_labels(&scene.labels, scene.num_classes, budget, label_seed)?;
    let (cloud, labels) = voxelize(&scene.cloud, weak.as_slice(), voxel_size)?;
    TrainScene::new(cloud, WeakLabels::new(labels, scene.num_classes)?)
}

impl PreparedData {
    pub fn from_scenes(train: &[Scene], eval: &[Scene], voxel_size: f64) -> Result<Self> {
        let num_classes = train
            .first()
            .map(|s| s.num_classes)
            .ok_or_else(|| Error::Precondition("no training scenes".into()))?;
        if train.iter().chain(eval).any(|s| s.num_classes != num_classes) {
            return Err(Error::Precondition("scenes disagree on the class count".into()));
        }
        let train = train
            .par_iter()
            .map(|s| densify(s, voxel_size))
            .collect::<Result<Vec<_>>>()?;
        let eval = eval
            .par_iter()
            .map(|s| {
                let d = densify(s, voxel_size)?;
                EvalScene::new(d.cloud, d.truth)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train,
            eval,
            num_classes,
            voxel_size,
        })
    }

    /// Generates `train_scenes + eval_scenes` scenes; the last
    /// `eval_scenes` form the held-out split.
    pub fn generate(config: &DataConfig) -> Result<Self> {
        let all = generate_dataset(config.train_scenes + config.eval_scenes, &config.scene, config.data_seed)?;
        let (train, eval) = all.split_at(config.train_scenes);
        Self::from_scenes(train, eval, config.voxel_size)
    }

    /// Training scenes with weak labels; scene `i` draws its labels with
    /// seed `derive(label_seed, LABELS, i)`.
    pub fn weak_train(&self, budget: LabelBudget, label_seed: u64) -> Result<Vec<TrainScene>> {
        self.train
            .iter()
            .enumerate()
            .map(|(i, s)| {
                weak_scene(
                    &s.raw,
                    budget,
                    self.voxel_size,
                    seed::derive(label_seed, stream::LABELS, i as u64),
                )
            })
            .collect()
    }

    /// Loads the scenes listed in a manifest.
    pub fn from_manifest(path: impl AsRef<std::path::Path>, voxel_size: f64) -> Result<Self> {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for entry in read_manifest(path)? {
            let scene = load_scene(&entry.path)?;
            match entry.split {
                Split::Train => train.push(scene),
                Split::Eval => eval.push(scene),
            }
        }
        Self::from_scenes(&train, &eval, voxel_size)
    }

    /// Training scenes with dense ground truth, for scoring fit.
    pub fn train_as_eval(&self) -> Result<Vec<EvalScene>> {
        self.train
            .iter()
            .map(|s| EvalScene::new(s.cloud.clone(), s.truth.clone()))
            .collect()
    }

    /// Voxelized points over all training scenes.
    pub fn total_train_points(&self) -> usize {
        self.train.iter().map(|s| s.cloud.len()).sum()
    }
}

/// One training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    /// Group key for summaries, e.g. `"cpcm"` or `"cpcm R=0.75"`.
    pub label: String,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub budget: LabelBudget,
    pub label_seed: u64,
    /// Masked-evaluation ratios run after training; empty to skip.
    pub mask_eval_ratios: Vec<f64>,
    pub mask_eval_region_size: usize,
    pub mask_eval_seeds: Vec<u64>,
}

impl RunSpec {
    pub fn new(label: impl Into<String>, mode: TrainMode, budget: LabelBudget) -> Self {
        let mut train = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        if let LabelBudget::Ratio(r) = budget {
            train.weights = crate::losses::LossWeights::for_budget(r);
            train.mask.region_size = crate::masking::region_size_for_budget(r);
        }
        Self {
            label: label.into(),
            train,
            model: ModelConfig::default(),
            budget,
            label_seed: 0,
            mask_eval_ratios: Vec::new(),
            mask_eval_region_size: 4,
            mask_eval_seeds: vec![0],
        }
    }

    /// The same run under replicate seed `s`: initialization, augmentation,
    /// masks and the weak label draw all change together.
    pub fn replicate(&self, s: u64) -> Self {
        let mut out = self.clone();
        out.train.seed = seed::derive(s, 11, 0);
        out.train.mask_seed = seed::derive(s, 12, 0);
        out.model.init_seed = seed::derive(s, 13, 0);
        out.label_seed = seed::derive(s, 14, 0);
        out
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub label: String,
    pub spec: RunSpec,
    pub miou: f64,
    /// Mean supervised loss over the last epoch.
    pub final_seg_loss: f64,
    pub masked: Vec<MaskedEvalRow>,
    pub history: Vec<StepRecord>,
    pub params: ModelParams,
}

pub fn run(data: &PreparedData, spec: &RunSpec) -> Result<RunResult> {
    let scenes = data.weak_train(spec.budget, spec.label_seed)?;
    let model = ModelConfig {
        num_classes: data.num_classes,
        ..spec.model.clone()
    };
    let out = train(&scenes, &spec.train, &model, None)?;
    let miou = evaluate(&out.params, &data.eval)?.miou;
    let masked = if spec.mask_eval_ratios.is_empty() {
        Vec::new()
    } else {
        masked_evaluation(
            &out.params,
            &data.eval,
            &spec.mask_eval_ratios,
            spec.mask_eval_region_size,
            &spec.mask_eval_seeds,
        )?
    };
    let final_seg_loss = out.epochs.last().map_or(f64::NAN, |e| e.mean_loss.seg);
    Ok(RunResult {
        label: spec.label.clone(),
        spec: spec.clone(),
        miou,
        final_seg_loss,
        masked,
        history: out.history,
        params: out.params,
    })
}

/// Runs independent cells concurrently; results keep the input order.
pub fn run_all(data: &PreparedData, specs: &[RunSpec]) -> Result<Vec<RunResult>> {
    specs.par_iter().map(|s| run(data, s)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub label: String,
    pub budget: LabelBudget,
    pub miou_mean: f64,
    pub miou_sd: f64,
    pub seg_loss_mean: f64,
    pub runs: usize,
}

/// Groups results by label (first-appearance order) and averages over seeds.
pub fn summarize(results: &[RunResult]) -> Vec<Summary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunResult> = results.iter().filter(|r| r.label == label).collect();
            let mious: Vec<f64> = group.iter().map(|r| r.miou).collect();
            let ces: Vec<f64> = group.iter().map(|r| r.final_seg_loss).collect();
            let (miou_mean, miou_sd) = mean_sd(&mious);
            Summary {
                label: label.to_string(),
                budget: group[0].spec.budget,
                miou_mean,
                miou_sd,
                seg_loss_mean: mean_sd(&ces).0,
                runs: group.len(),
            }
        })
        .collect()
}
