//! Training loop: per step, two augmented views and one masked view of the
//! same scene go through the shared network, the selected objective is
//! evaluated and the parameters take one SGD step under a polynomial
//! learning-rate decay.

use std::sync::OnceLock;

use rand::seq::SliceRandom;

use crate::augment::{augment, AugmentConfig};
use crate::autodiff::{Graph, Matrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalScene};
use crate::knn::Neighborhood;
use crate::losses::{objective_with_targets, LossBreakdown, LossWeights, Objective, ProbMatrix};
use crate::masking::{apply_mask, mask_flags, MaskConfig};
use crate::model::{ModelConfig, ModelParams};
use crate::pointcloud::{PointCloud, WeakLabels};
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Cross-entropy on the two augmented views only.
    CeOnly,
    /// Cross-entropy plus JS consistency between the augmented views.
    ConsisBaseline,
    /// Consistency baseline plus the masked branch with detached targets.
    Cpcm,
    /// Region masking used as a plain augmentation of the second view, with
    /// no separate masked branch.
    NoCmt,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::CeOnly,
        TrainMode::ConsisBaseline,
        TrainMode::Cpcm,
        TrainMode::NoCmt,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::CeOnly => "ce_only",
            TrainMode::ConsisBaseline => "consis_baseline",
            TrainMode::Cpcm => "cpcm",
            TrainMode::NoCmt => "no_cmt",
        }
    }

    pub fn uses_mask(&self) -> bool {
        matches!(self, TrainMode::Cpcm | TrainMode::NoCmt)
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown training mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub momentum: f64,
    /// Scenes per step.
    pub batch: usize,
    pub weights: LossWeights,
    pub mask: MaskConfig,
    pub augment: AugmentConfig,
    pub mode: TrainMode,
    /// Shuffling and augmentation seed.
    pub seed: u64,
    pub mask_seed: u64,
    /// Detach the unmasked targets of the masked consistency loss. Only
    /// turned off to check that detaching matters.
    pub detach_mask_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            base_lr: 1e-2,
            weight_decay: 1e-3,
            poly_power: 0.9,
            momentum: 0.0,
            batch: 1,
            weights: LossWeights { alpha: 1.0, beta: 5.0 },
            mask: MaskConfig::default(),
            augment: AugmentConfig::default(),
            mode: TrainMode::Cpcm,
            seed: 0,
            mask_seed: 0,
            detach_mask_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Param(format!("invalid learning rate {}", self.base_lr)));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::Param(format!("poly power must be positive, got {}", self.poly_power)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param("weight decay must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.batch == 0 {
            return Err(Error::Param("batch must be at least 1".into()));
        }
        LossWeights::new(self.weights.alpha, self.weights.beta)?;
        self.augment.validate()?;
        if self.mode.uses_mask() {
            self.mask.validate()?;
            if self.mask.ratio == 0.0 {
                return Err(Error::Config(format!(
                    "mode {} needs a mask ratio above zero",
                    self.mode
                )));
            }
        }
        Ok(())
    }

    /// Weights actually applied for the configured mode.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            TrainMode::CeOnly => LossWeights { alpha: 0.0, beta: 0.0 },
            TrainMode::ConsisBaseline | TrainMode::NoCmt => LossWeights {
                alpha: self.weights.alpha,
                beta: 0.0,
            },
            TrainMode::Cpcm => self.weights,
        }
    }
}

/// Polynomial decay `base_lr * (1 - step / total_steps)^poly_power`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Param("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Param(format!("step {step} beyond {total_steps}")));
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    Ok(config.base_lr * frac.powf(config.poly_power))
}

/// A training scene: cloud plus its sparse labels. The neighbor table is
/// built on first use and shared by all views of the scene, since the
/// augmentations are similarity transforms and masking keeps positions.
#[derive(Clone, Debug)]
pub struct TrainScene {
    cloud: PointCloud,
    labels: WeakLabels,
    neighborhood: OnceLock<Neighborhood>,
}

impl TrainScene {
    pub fn new(cloud: PointCloud, labels: WeakLabels) -> Result<Self> {
        if cloud.len() != labels.len() {
            return Err(Error::Precondition(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.len()
            )));
        }
        if labels.labeled().is_empty() {
            return Err(Error::NoLabeledPoints);
        }
        Ok(Self {
            cloud,
            labels,
            neighborhood: OnceLock::new(),
        })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn labels(&self) -> &WeakLabels {
        &self.labels
    }

    /// Runs `f` with the neighbor table of the raw cloud for `k` neighbors.
    pub fn with_neighborhood<T>(&self, k: usize, f: impl FnOnce(&Neighborhood) -> T) -> T {
        let cached = self
            .neighborhood
            .get_or_init(|| Neighborhood::build(self.cloud.positions(), k));
        if cached.k == k.min(self.cloud.len()) {
            f(cached)
        } else {
            f(&Neighborhood::build(self.cloud.positions(), k))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub eval_miou: Option<f64>,
}

/// The three (or two) inputs of one training step.
#[derive(Clone, Debug)]
pub struct StepViews {
    pub view1: PointCloud,
    pub view2: PointCloud,
    pub masked: Option<PointCloud>,
}

/// Builds the branch inputs for `scene` at global step `step`, scene slot
/// `slot` within the batch.
pub fn step_views(cloud: &PointCloud, config: &TrainConfig, step: usize, slot: usize) -> Result<StepViews> {
    let key = seed::derive(step as u64, 0, slot as u64);
    let view1 = augment(cloud, &config.augment, seed::derive(config.seed, stream::AUG1, key))?;
    let mut view2 = augment(cloud, &config.augment, seed::derive(config.seed, stream::AUG2, key))?;
    let mut masked = None;
    if config.mode.uses_mask() {
        let flags = mask_flags(cloud, &config.mask, seed::derive(config.mask_seed, stream::MASK, key))?;
        match config.mode {
            TrainMode::Cpcm => masked = Some(apply_mask(cloud, &flags)?),
            TrainMode::NoCmt => view2 = apply_mask(&view2, &flags)?,
            _ => unreachable!(),
        }
    }
    Ok(StepViews { view1, view2, masked })
}

#[derive(Clone, Debug)]
pub struct TrainState {
    params: ModelParams,
    step: usize,
    velocity: Vec<(Matrix, Matrix)>,
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Gradients of one step, in layer order.
pub type Gradients = Vec<(Matrix, Matrix)>;

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let velocity = params
            .layers()
            .iter()
            .map(|l| {
                (
                    Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    Matrix::zeros(1, l.bias.cols()),
                )
            })
            .collect();
        Self {
            params,
            step: 0,
            velocity,
            history: Vec::new(),
            epochs: Vec::new(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Loss and parameter gradients for a batch of scenes at the current
    /// step, without touching the parameters.
    pub fn loss_and_grads(&self, batch: &[&TrainScene], config: &TrainConfig) -> Result<(LossBreakdown, Gradients)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let weights = config.effective_weights();
        let objective = if config.mode == TrainMode::Cpcm {
            Objective::Cpcm
        } else {
            Objective::ConsisBaseline
        };
        let mut total = None;
        let mut sum = LossBreakdown::default();
        for (slot, scene) in batch.iter().enumerate() {
            let views = step_views(&scene.cloud, config, self.step, slot)?;
            let k = self.params.config().k_neighbors;
            let (z1, z2, zm) = scene.with_neighborhood(k, |nb| -> Result<_> {
                let mut branch = |c: &PointCloud| -> Result<ProbMatrix> {
                    let logits = self.params.forward_with_neighbors(&mut g, &bound, c, nb)?;
                    ProbMatrix::from_logits(&mut g, logits)
                };
                let z1 = branch(&views.view1)?;
                let z2 = branch(&views.view2)?;
                let zm = views.masked.as_ref().map(&mut branch).transpose()?;
                Ok((z1, z2, zm))
            })?;
            let (loss, rec) = objective_with_targets(
                &mut g,
                z1,
                z2,
                zm,
                &scene.labels,
                weights,
                objective,
                config.detach_mask_targets,
            )?;
            sum.seg += rec.seg;
            sum.consis += rec.consis;
            sum.mask += rec.mask;
            sum.total += rec.total;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let total = total.ok_or_else(|| Error::Precondition("empty batch".into()))?;
        let inv = 1.0 / batch.len() as f64;
        let mean = g.scale(total, inv)?;
        let rec = LossBreakdown {
            seg: sum.seg * inv,
            consis: sum.consis * inv,
            mask: sum.mask * inv,
            total: g.value(mean).data()[0],
        };
        if !rec.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                seg: rec.seg,
                consis: rec.consis,
                mask: rec.mask,
            });
        }
        g.backward(mean)?;
        let grads = bound
            .tensors()
            .iter()
            .zip(self.params.layers())
            .map(|(&(w, b), layer)| {
                let gw = g.grad(w).cloned().unwrap_or_else(|| Matrix::zeros(layer.weight.rows(), layer.weight.cols()));
                let gb = g.grad(b).cloned().unwrap_or_else(|| Matrix::zeros(1, layer.bias.cols()));
                (gw, gb)
            })
            .collect();
        Ok((rec, grads))
    }

    /// `v <- momentum * v + (grad + wd * theta)`, `theta <- theta - lr * v`.
    pub fn apply_update(&mut self, grads: &Gradients, lr: f64, config: &TrainConfig) -> Result<()> {
        let wd = config.weight_decay;
        let mu = config.momentum;
        for ((layer, (gw, gb)), (vw, vb)) in self
            .params
            .layers_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.velocity.iter_mut())
        {
            for (theta, grad, vel) in [(&mut layer.weight, gw, vw), (&mut layer.bias, gb, vb)] {
                for ((t, &g), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                    let d = g + wd * *t;
                    *v = if mu == 0.0 { d } else { mu * *v + d };
                    *t -= lr * *v;
                }
            }
        }
        if !self.params.is_finite() {
            return Err(Error::Numeric { op: "sgd_update" });
        }
        Ok(())
    }

    /// One optimization step on `batch` with learning rate `lr`.
    pub fn train_step(&mut self, batch: &[&TrainScene], config: &TrainConfig, lr: f64, epoch: usize) -> Result<StepRecord> {
        let (loss, grads) = self.loss_and_grads(batch, config)?;
        self.apply_update(&grads, lr, config)?;
        let rec = StepRecord {
            step: self.step,
            epoch,
            lr,
            loss,
        };
        self.history.push(rec);
        self.step += 1;
        Ok(rec)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub fn total_steps(num_scenes: usize, config: &TrainConfig) -> usize {
    config.epochs * num_scenes.div_ceil(config.batch)
}

pub fn train(
    dataset: &[TrainScene],
    config: &TrainConfig,
    model: &ModelConfig,
    eval_set: Option<&[EvalScene]>,
) -> Result<TrainOutput> {
    train_with(dataset, config, model, eval_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    dataset: &[TrainScene],
    config: &TrainConfig,
    model: &ModelConfig,
    eval_set: Option<&[EvalScene]>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    config.validate()?;
    let mut state = TrainState::new(ModelParams::init(model.clone())?);
    let total = total_steps(dataset.len(), config);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(config.seed, stream::SHUFFLE, epoch as u64)));
        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&TrainScene> = chunk.iter().map(|&i| &dataset[i]).collect();
            let lr = lr_at(state.step(), total, config)?;
            let rec = state.train_step(&batch, config, lr, epoch)?;
            sum.seg += rec.loss.seg;
            sum.consis += rec.loss.consis;
            sum.mask += rec.loss.mask;
            sum.total += rec.loss.total;
            steps += 1;
        }
        let inv = 1.0 / steps as f64;
        let eval_miou = match eval_set {
            Some(scenes) if !scenes.is_empty() => Some(evaluate(state.params(), scenes)?.miou),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            mean_loss: LossBreakdown {
                seg: sum.seg * inv,
                consis: sum.consis * inv,
                mask: sum.mask * inv,
                total: sum.total * inv,
            },
            eval_miou,
        };
        on_epoch(&rec);
        state.epochs.push(rec);
    }
    let TrainState {
        params,
        history,
        epochs,
        ..
    } = state;
    Ok(TrainOutput {
        params,
        history,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{LabelBudget, sample_weak_labels};
    use rand::Rng;

    fn toy_scene(seed: u64, n: usize) -> TrainScene {
        // Two color-coded clusters with labels 0 and 1.
        let mut rng = seed::rng(seed);
        let mut pos = Vec::new();
        let mut col = Vec::new();
        let mut lab = Vec::new();
        for i in 0..n {
            let c = i % 2;
            pos.push([c as f64 * 2.0 + rng.random::<f64>(), rng.random(), rng.random()]);
            col.push(if c == 0 { [0.9, 0.1, 0.1] } else { [0.1, 0.1, 0.9] });
            lab.push(c as i32);
        }
        let cloud = PointCloud::new(pos, col).unwrap();
        let labels = sample_weak_labels(&lab, 2, LabelBudget::Count(6), seed).unwrap();
        TrainScene::new(cloud, labels).unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            num_blocks: 1,
            k_neighbors: 4,
            num_classes: 2,
            init_seed: 1,
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &cfg).unwrap(), 1e-2);
        assert_eq!(lr_at(100, 100, &cfg).unwrap(), 0.0);
        assert!((lr_at(50, 100, &cfg).unwrap() - 5.358867312681466e-3).abs() < 1e-12);
        assert!(lr_at(0, 0, &cfg).is_err());
        assert!(lr_at(5, 4, &cfg).is_err());
    }

    #[test]
    fn mode_parsing_round_trips() {
        for m in TrainMode::ALL {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
        }
        assert!("adam".parse::<TrainMode>().is_err());
    }

    #[test]
    fn cpcm_without_mask_ratio_is_a_config_error() {
        let mut cfg = TrainConfig::default();
        cfg.mask.ratio = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.mode = TrainMode::ConsisBaseline;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let scene = toy_scene(1, 40);
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(ModelParams::init(small_model()).unwrap());
        let before = state.params().clone();
        state.train_step(&[&scene], &cfg, 0.0, 0).unwrap();
        assert_eq!(state.params(), &before);
    }

    #[test]
    fn ce_only_ignores_consistency_and_mask() {
        let scene = toy_scene(2, 40);
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::CeOnly;
        cfg.weights = LossWeights { alpha: 5.0, beta: 10.0 };
        let state = TrainState::new(ModelParams::init(small_model()).unwrap());
        let (rec, grads) = state.loss_and_grads(&[&scene], &cfg).unwrap();
        assert_eq!(rec.total, rec.seg);
        assert_eq!(rec.mask, 0.0);

        // Same gradient as an explicit zero-weight consistency objective.
        let mut explicit = cfg.clone();
        explicit.mode = TrainMode::ConsisBaseline;
        explicit.weights = LossWeights { alpha: 0.0, beta: 0.0 };
        let (_, g2) = state.loss_and_grads(&[&scene], &explicit).unwrap();
        assert_eq!(grads, g2);
    }

    #[test]
    fn step_is_reproducible() {
        let scene = toy_scene(3, 40);
        let cfg = TrainConfig::default();
        let run = || {
            let mut s = TrainState::new(ModelParams::init(small_model()).unwrap());
            let r = s.train_step(&[&scene], &cfg, 0.01, 0).unwrap();
            (r.loss.total.to_bits(), s.params().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn removing_detach_changes_gradients() {
        let scene = toy_scene(4, 60);
        let cfg = TrainConfig::default();
        let state = TrainState::new(ModelParams::init(small_model()).unwrap());
        let (_, detached) = state.loss_and_grads(&[&scene], &cfg).unwrap();
        let mut attached = cfg.clone();
        attached.detach_mask_targets = false;
        let (_, grads) = state.loss_and_grads(&[&scene], &attached).unwrap();
        assert_ne!(detached, grads);
    }

    #[test]
    fn weight_decay_zero_is_plain_sgd() {
        let scene = toy_scene(5, 40);
        let mut cfg = TrainConfig::default();
        cfg.weight_decay = 0.0;
        let mut state = TrainState::new(ModelParams::init(small_model()).unwrap());
        let (_, grads) = state.loss_and_grads(&[&scene], &cfg).unwrap();
        let mut expected = state.params().clone();
        for (l, (gw, gb)) in expected.layers_mut().iter_mut().zip(&grads) {
            for (t, g) in l.weight.data_mut().iter_mut().zip(gw.data()) {
                *t -= 0.05 * g;
            }
            for (t, g) in l.bias.data_mut().iter_mut().zip(gb.data()) {
                *t -= 0.05 * g;
            }
        }
        state.apply_update(&grads, 0.05, &cfg).unwrap();
        assert_eq!(state.params(), &expected);
    }

    #[test]
    fn one_scene_one_epoch_is_one_step() {
        let scene = toy_scene(6, 30);
        let mut cfg = TrainConfig::default();
        cfg.epochs = 1;
        let out = train(&[scene], &cfg, &small_model(), None).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.epochs.len(), 1);
    }

    #[test]
    fn training_requires_data_and_labels() {
        assert!(train(&[], &TrainConfig::default(), &small_model(), None).is_err());
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]]).unwrap();
        let labels = WeakLabels::new(vec![-1], 2).unwrap();
        assert!(matches!(TrainScene::new(cloud, labels), Err(Error::NoLabeledPoints)));
    }

    #[test]
    fn no_cmt_masks_the_second_view() {
        let scene = toy_scene(7, 50);
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::NoCmt;
        cfg.mask.ratio = 1.0;
        cfg.mask.region_size = 1;
        let v = step_views(&scene.cloud, &cfg, 0, 0).unwrap();
        assert!(v.masked.is_none());
        assert!(v.view2.colors().iter().all(|c| *c == [0.0; 3]));
        assert!(v.view1.colors().iter().any(|c| *c != [0.0; 3]));
    }

    #[test]
    fn cpcm_masks_the_raw_cloud() {
        let scene = toy_scene(8, 50);
        let cfg = TrainConfig::default();
        let v = step_views(&scene.cloud, &cfg, 3, 0).unwrap();
        let m = v.masked.unwrap();
        assert_eq!(m.positions(), scene.cloud.positions());
    }
}
