//! Prediction, confusion matrices and mean IoU, with and without test-time
//! masking.

use rayon::prelude::*;

use crate::autodiff::{Graph, Matrix};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, mask_flags, MaskConfig, MaskStrategy};
use crate::model::ModelParams;
use crate::pointcloud::PointCloud;
use crate::seed::{self, stream};

/// A scene with dense ground truth.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub cloud: PointCloud,
    pub truth: Vec<usize>,
}

impl EvalScene {
    pub fn new(cloud: PointCloud, truth: Vec<usize>) -> Result<Self> {
        if cloud.len() != truth.len() {
            return Err(Error::Precondition(format!(
                "{} labels for {} points",
                truth.len(),
                cloud.len()
            )));
        }
        Ok(Self { cloud, truth })
    }
}

/// Row-wise argmax; ties go to the smallest class index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Predicted class per point: argmax of the softmax output.
pub fn predict(params: &ModelParams, cloud: &PointCloud) -> Result<Vec<usize>> {
    let logits = params.logits(cloud)?;
    let mut g = Graph::new();
    let t = g.constant(logits);
    let probs = g.row_softmax(t)?;
    Ok(argmax_rows(g.value(probs)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row = ground truth, column = prediction.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_predictions(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Precondition(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let mut cm = Self::new(num_classes);
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= num_classes || t >= num_classes {
                return Err(Error::Precondition(format!(
                    "class {} outside 0..{num_classes}",
                    p.max(t)
                )));
            }
            cm.counts[t * num_classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Precondition("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from the ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let gt: u64 = (0..c).map(|p| self.get(k, p)).sum();
                if gt == 0 {
                    return None;
                }
                let predicted: u64 = (0..c).map(|t| self.get(t, k)).sum();
                Some(tp as f64 / (gt + predicted - tp) as f64)
            })
            .collect()
    }

    /// Mean over classes present in the ground truth.
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    }
}

/// Per-class IoU and their mean over classes present in `truth`.
pub fn miou(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let cm = ConfusionMatrix::from_predictions(pred, truth, num_classes)?;
    let m = cm
        .miou()
        .ok_or_else(|| Error::Precondition("no ground-truth points".into()))?;
    Ok((cm.iou(), m))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

fn report(cm: ConfusionMatrix) -> Result<EvalReport> {
    let miou = cm
        .miou()
        .ok_or_else(|| Error::Precondition("no ground-truth points".into()))?;
    Ok(EvalReport {
        per_class: cm.iou(),
        confusion: cm,
        miou,
    })
}

fn pooled(
    params: &ModelParams,
    scenes: &[EvalScene],
    prep: impl Fn(usize, &EvalScene) -> Result<PointCloud> + Sync,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Precondition("empty evaluation set".into()));
    }
    let c = params.config().num_classes;
    let parts: Vec<ConfusionMatrix> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cloud = prep(i, s)?;
            let pred = predict(params, &cloud)?;
            ConfusionMatrix::from_predictions(&pred, &s.truth, c)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(c);
    for p in &parts {
        cm.merge(p)?;
    }
    report(cm)
}

/// mIoU from one confusion matrix pooled over all scenes.
pub fn evaluate(params: &ModelParams, scenes: &[EvalScene]) -> Result<EvalReport> {
    pooled(params, scenes, |_, s| Ok(s.cloud.clone()))
}

/// Evaluation with a region mask applied to every scene; scene `i` uses
/// mask seed `derive(mask_seed, EVAL_MASK, i)`.
pub fn evaluate_masked(
    params: &ModelParams,
    scenes: &[EvalScene],
    ratio: f64,
    region_size: usize,
    mask_seed: u64,
) -> Result<EvalReport> {
    let config = MaskConfig {
        ratio,
        region_size,
        strategy: MaskStrategy::Region,
    };
    config.validate()?;
    pooled(params, scenes, |i, s| {
        let flags = mask_flags(&s.cloud, &config, seed::derive(mask_seed, stream::EVAL_MASK, i as u64))?;
        apply_mask(&s.cloud, &flags)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedEvalRow {
    pub ratio: f64,
    pub miou_mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub miou_sd: f64,
    pub per_seed: Vec<f64>,
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Robustness sweep: one row per ratio, averaged over mask seeds.
pub fn masked_evaluation(
    params: &ModelParams,
    scenes: &[EvalScene],
    ratios: &[f64],
    region_size: usize,
    seeds: &[u64],
) -> Result<Vec<MaskedEvalRow>> {
    if seeds.is_empty() {
        return Err(Error::Param("at least one mask seed is required".into()));
    }
    ratios
        .iter()
        .map(|&ratio| {
            let per_seed = seeds
                .iter()
                .map(|&s| Ok(evaluate_masked(params, scenes, ratio, region_size, s)?.miou))
                .collect::<Result<Vec<f64>>>()?;
            let (miou_mean, miou_sd) = mean_sd(&per_seed);
            Ok(MaskedEvalRow {
                ratio,
                miou_mean,
                miou_sd,
                per_seed,
            })
        })
        .collect()
}
