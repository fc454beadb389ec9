//! Training objectives over row-stochastic class probability matrices.
//!
//! All logs are natural logs, taken after clamping probabilities to
//! `[PROB_EPS, 1]`.

use crate::autodiff::{Graph, Matrix, Tensor};
use crate::error::{Error, Result};
use crate::pointcloud::WeakLabels;

pub const PROB_EPS: f64 = 1e-12;

/// Softmax output of the network, one row per point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbMatrix(pub Tensor);

impl ProbMatrix {
    pub fn from_logits(g: &mut Graph, logits: Tensor) -> Result<Self> {
        Ok(Self(g.row_softmax(logits)?))
    }

    pub fn tensor(&self) -> Tensor {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::Param(format!("loss weights must be non-negative, got ({alpha}, {beta})")));
        }
        Ok(Self { alpha, beta })
    }

    /// `(alpha, beta) = (5, 10)` for budgets below 0.1%, `(1, 5)` otherwise.
    pub fn for_budget(ratio: f64) -> Self {
        if ratio < 1e-3 {
            Self { alpha: 5.0, beta: 10.0 }
        } else {
            Self { alpha: 1.0, beta: 5.0 }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `seg + alpha * consis`.
    ConsisBaseline,
    /// `seg + alpha * consis + beta * mask`.
    Cpcm,
}

/// Component values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub seg: f64,
    pub consis: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.seg.is_finite() && self.consis.is_finite() && self.mask.is_finite() && self.total.is_finite()
    }
}

/// Jensen-Shannon divergence of two probability rows.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let a = a.clamp(PROB_EPS, 1.0);
        let b = b.clamp(PROB_EPS, 1.0);
        let lm = (0.5 * (a + b)).ln();
        total += a * (a.ln() - lm) + b * (b.ln() - lm);
    }
    0.5 * total
}

fn check_same(g: &Graph, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        });
    }
    Ok(())
}

/// Row-wise JS divergence as an `N x 1` tensor.
pub fn js_rows(g: &mut Graph, p: Tensor, q: Tensor) -> Result<Tensor> {
    check_same(g, "js_rows", p, q)?;
    let pc = g.clamp(p, PROB_EPS, 1.0)?;
    let qc = g.clamp(q, PROB_EPS, 1.0)?;
    let sum = g.add(pc, qc)?;
    let m = g.scale(sum, 0.5)?;
    let log_m = g.log(m)?;
    let log_p = g.log(pc)?;
    let log_q = g.log(qc)?;
    let dp = g.sub(log_p, log_m)?;
    let dq = g.sub(log_q, log_m)?;
    let tp = g.mul(pc, dp)?;
    let tq = g.mul(qc, dq)?;
    let t = g.add(tp, tq)?;
    let rows = g.sum_rows(t)?;
    g.scale(rows, 0.5)
}

/// Mean negative log-likelihood of the labeled points under each branch,
/// summed over the two branches.
pub fn ce_labeled(g: &mut Graph, z1: ProbMatrix, z2: ProbMatrix, labels: &WeakLabels) -> Result<Tensor> {
    check_same(g, "ce_labeled", z1.0, z2.0)?;
    let (n, c) = g.shape(z1.0);
    if labels.len() != n {
        return Err(Error::Shape {
            op: "ce_labeled",
            detail: format!("{} labels for {n} rows", labels.len()),
        });
    }
    let labeled = labels.labeled();
    if labeled.is_empty() {
        return Err(Error::NoLabeledPoints);
    }
    let mut onehot = Matrix::zeros(labeled.len(), c);
    for (row, &s) in labeled.iter().enumerate() {
        let y = labels.get(s).expect("labeled index");
        if y >= c {
            return Err(Error::Shape {
                op: "ce_labeled",
                detail: format!("label {y} for {c} classes"),
            });
        }
        onehot.set(row, y, 1.0);
    }
    let onehot = g.constant(onehot);
    let branch = |g: &mut Graph, z: Tensor| -> Result<Tensor> {
        let picked = g.gather_rows(z, &labeled)?;
        let clamped = g.clamp(picked, PROB_EPS, 1.0)?;
        let logp = g.log(clamped)?;
        let sel = g.mul(logp, onehot)?;
        let rows = g.sum_rows(sel)?;
        let mean = g.mean_all(rows)?;
        g.scale(mean, -1.0)
    };
    let a = branch(g, z1.0)?;
    let b = branch(g, z2.0)?;
    g.add(a, b)
}

/// Mean row-wise JS divergence between the two branches.
pub fn consis_loss(g: &mut Graph, z1: ProbMatrix, z2: ProbMatrix) -> Result<Tensor> {
    check_same(g, "consis_loss", z1.0, z2.0)?;
    let rows = js_rows(g, z1.0, z2.0)?;
    g.mean_all(rows)
}

/// Masked consistency: the unmasked branches act as fixed targets, so
/// gradients only reach `zm`.
pub fn mask_loss(g: &mut Graph, z1: ProbMatrix, z2: ProbMatrix, zm: ProbMatrix) -> Result<Tensor> {
    mask_loss_with_targets(g, z1, z2, zm, true)
}

/// [`mask_loss`] with the target detach made optional. `detach = false`
/// exists to check that detaching actually changes the gradients.
pub fn mask_loss_with_targets(
    g: &mut Graph,
    z1: ProbMatrix,
    z2: ProbMatrix,
    zm: ProbMatrix,
    detach: bool,
) -> Result<Tensor> {
    check_same(g, "mask_loss", z1.0, zm.0)?;
    check_same(g, "mask_loss", z2.0, zm.0)?;
    let (t1, t2) = if detach {
        (g.detach(z1.0), g.detach(z2.0))
    } else {
        (z1.0, z2.0)
    };
    let a = js_rows(g, t1, zm.0)?;
    let b = js_rows(g, t2, zm.0)?;
    let both = g.add(a, b)?;
    g.mean_all(both)
}

/// Combined objective. Components with zero weight are evaluated for the
/// breakdown but left out of the returned graph.
pub fn objective(
    g: &mut Graph,
    z1: ProbMatrix,
    z2: ProbMatrix,
    zm: Option<ProbMatrix>,
    labels: &WeakLabels,
    weights: LossWeights,
    mode: Objective,
) -> Result<(Tensor, LossBreakdown)> {
    objective_with_targets(g, z1, z2, zm, labels, weights, mode, true)
}

#[allow(clippy::too_many_arguments)]
pub fn objective_with_targets(
    g: &mut Graph,
    z1: ProbMatrix,
    z2: ProbMatrix,
    zm: Option<ProbMatrix>,
    labels: &WeakLabels,
    weights: LossWeights,
    mode: Objective,
    detach_targets: bool,
) -> Result<(Tensor, LossBreakdown)> {
    let seg = ce_labeled(g, z1, z2, labels)?;
    let consis = consis_loss(g, z1, z2)?;
    let scalar = |g: &Graph, t: Tensor| g.value(t).data()[0];
    let mut breakdown = LossBreakdown {
        seg: scalar(g, seg),
        consis: scalar(g, consis),
        ..Default::default()
    };

    let mut total = seg;
    if weights.alpha != 0.0 {
        let w = g.scale(consis, weights.alpha)?;
        total = g.add(total, w)?;
    }
    if mode == Objective::Cpcm {
        let zm = zm.ok_or_else(|| Error::Precondition("cpcm objective needs the masked branch".into()))?;
        let mask = mask_loss_with_targets(g, z1, z2, zm, detach_targets)?;
        breakdown.mask = scalar(g, mask);
        if weights.beta != 0.0 {
            let w = g.scale(mask, weights.beta)?;
            total = g.add(total, w)?;
        }
    }
    breakdown.total = scalar(g, total);
    Ok((total, breakdown))
}
