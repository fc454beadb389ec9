//! Reverse-mode gradients against central finite differences.
//!
//! Every graph is reduced to a scalar as `mean(out * W)` with a fixed
//! random `W`, so all output entries contribute distinct weights.

use cpcm::autodiff::{Graph, Matrix, Tensor};
use cpcm::losses::{objective_with_targets, LossWeights, Objective, ProbMatrix};
use cpcm::model::{BoundParams, ModelConfig, ModelParams};
use cpcm::pointcloud::{PointCloud, WeakLabels, UNLABELED};
use cpcm::seed;
use cpcm::Result;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradient entries below this magnitude are compared in absolute terms
/// against `ABS_FLOOR`, where relative error is dominated by rounding.
pub const TINY: f64 = 1e-6;
pub const ABS_FLOOR: f64 = 1e-9;

pub type Build = Box<dyn Fn(&mut Graph, &[Tensor]) -> Result<Tensor>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Matrix>,
    pub build: Build,
}

fn case(name: &'static str, inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Tensor]) -> Result<Tensor> + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

pub fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut seed::Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Entries with magnitude in `[0.1, 1)`, away from the kinks at 0.
fn away_from_zero(rows: usize, cols: usize, rng: &mut seed::Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn scalar(g: &mut Graph, inputs: &[Matrix], build: &Build) -> Result<(Tensor, Vec<Tensor>)> {
    let leaves: Vec<Tensor> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let out = build(g, &leaves)?;
    let (r, c) = g.shape(out);
    let w = g.constant(random(r, c, -1.0, 1.0, &mut seed::rng(0xC0FFEE)));
    let weighted = g.mul(out, w)?;
    Ok((g.mean_all(weighted)?, leaves))
}

fn value(inputs: &[Matrix], build: &Build) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = scalar(&mut g, inputs, build)?;
    Ok(g.value(loss).data()[0])
}

/// Worst relative error over all input entries, or a description of the
/// first entry outside tolerance.
pub fn check(case: &Case) -> std::result::Result<f64, String> {
    let fail = |e: cpcm::Error| format!("{}: {e}", case.name);
    let mut g = Graph::new();
    let (loss, leaves) = scalar(&mut g, &case.inputs, &case.build).map_err(fail)?;
    g.backward(loss).map_err(fail)?;
    let analytic: Vec<Matrix> = leaves
        .iter()
        .zip(&case.inputs)
        .map(|(&t, m)| g.grad(t).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();

    let mut worst = 0.0f64;
    for (i, m) in case.inputs.iter().enumerate() {
        for j in 0..m.data().len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (value(&plus, &case.build).map_err(fail)? - value(&minus, &case.build).map_err(fail)?) / (2.0 * H);
            let a = analytic[i].data()[j];
            let diff = (a - numeric).abs();
            let magnitude = a.abs().max(numeric.abs());
            if magnitude < TINY {
                if diff > ABS_FLOOR {
                    return Err(format!("{}: input {i} entry {j}: analytic {a} numeric {numeric}", case.name));
                }
                continue;
            }
            let rel = diff / magnitude;
            if rel > REL_TOL {
                return Err(format!(
                    "{}: input {i} entry {j}: analytic {a} numeric {numeric} rel {rel:.3e}",
                    case.name
                ));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// One case per primitive op.
pub fn op_cases() -> Vec<Case> {
    let mut rng = seed::rng(1);
    let a = random(4, 3, -1.0, 1.0, &mut rng);
    let b = random(4, 3, -1.0, 1.0, &mut rng);
    let row = random(1, 3, -1.0, 1.0, &mut rng);
    let right = random(3, 5, -1.0, 1.0, &mut rng);
    let narrow = random(4, 2, -1.0, 1.0, &mut rng);
    let tall = random(6, 3, -1.0, 1.0, &mut rng);
    let five = random(5, 3, -1.0, 1.0, &mut rng);
    // Entries sit clearly inside or outside [-0.5, 0.5].
    let clamp_input: Vec<f64> = away_from_zero(5, 4, &mut rng)
        .data()
        .iter()
        .map(|v| if v.abs() > 0.45 && v.abs() < 0.55 { v * 0.5 } else { *v })
        .collect();

    vec![
        case("add", vec![a.clone(), b.clone()], |g, t| g.add(t[0], t[1])),
        case("add_row", vec![a.clone(), row], |g, t| g.add(t[0], t[1])),
        case("sub", vec![a.clone(), b.clone()], |g, t| g.sub(t[0], t[1])),
        case("mul", vec![a.clone(), b], |g, t| g.mul(t[0], t[1])),
        case("scale", vec![a.clone()], |g, t| g.scale(t[0], -2.5)),
        case("matmul", vec![a.clone(), right], |g, t| g.matmul(t[0], t[1])),
        case("relu", vec![away_from_zero(5, 4, &mut rng)], |g, t| g.relu(t[0])),
        case("log", vec![random(5, 4, 0.2, 2.0, &mut rng)], |g, t| g.log(t[0])),
        case("row_softmax", vec![random(5, 4, -2.0, 2.0, &mut rng)], |g, t| g.row_softmax(t[0])),
        case("clamp", vec![Matrix::new(5, 4, clamp_input).unwrap()], |g, t| g.clamp(t[0], -0.5, 0.5)),
        case("mean_all", vec![a.clone()], |g, t| g.mean_all(t[0])),
        case("sum_rows", vec![a.clone()], |g, t| g.sum_rows(t[0])),
        case("concat_cols", vec![a, narrow], |g, t| g.concat_cols(t[0], t[1])),
        case("gather_rows", vec![five.clone()], |g, t| g.gather_rows(t[0], &[4, 0, 0, 2, 3, 4])),
        case("group_mean", vec![tall], |g, t| g.group_mean(t[0], 3)),
        case("neighbor_mean", vec![five], |g, t| {
            g.neighbor_mean(t[0], &[0, 1, 2, 1, 1, 4, 3, 0, 2, 4, 4, 4, 2, 3, 0], 3)
        }),
    ]
}

/// Two-layer perceptron with softmax cross-entropy.
fn mlp_cross_entropy() -> Case {
    let mut rng = seed::rng(6);
    let inputs = vec![
        random(6, 4, -1.0, 1.0, &mut rng),
        random(4, 5, -1.0, 1.0, &mut rng),
        random(1, 5, -0.5, 0.5, &mut rng),
        random(5, 3, -1.0, 1.0, &mut rng),
    ];
    let targets = [0usize, 2, 1, 1, 0, 2];
    case("mlp_cross_entropy", inputs, move |g, t| {
        let h = g.matmul(t[0], t[1])?;
        let h = g.add(h, t[2])?;
        let h = g.relu(h)?;
        let logits = g.matmul(h, t[3])?;
        let p = g.row_softmax(logits)?;
        let p = g.clamp(p, 1e-12, 1.0)?;
        let lp = g.log(p)?;
        let mut onehot = Matrix::zeros(6, 3);
        for (r, &c) in targets.iter().enumerate() {
            onehot.set(r, c, -1.0);
        }
        let oh = g.constant(onehot);
        let picked = g.mul(lp, oh)?;
        let per_row = g.sum_rows(picked)?;
        g.mean_all(per_row)
    })
}

/// The segmentation network on a small cloud through the full masked
/// consistency objective, with gradients flowing into both targets.
fn model_objective() -> Case {
    let mut rng = seed::rng(7);
    let n = 12;
    let positions: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let cloud = PointCloud::new(positions.clone(), colors.clone()).unwrap();
    let masked_colors = colors
        .iter()
        .enumerate()
        .map(|(i, c)| if i % 3 == 0 { [0.0; 3] } else { *c })
        .collect();
    let masked = PointCloud::new(positions, masked_colors).unwrap();
    let mut labels = vec![UNLABELED; n];
    labels[1] = 0;
    labels[5] = 2;
    labels[8] = 1;
    let labels = WeakLabels::new(labels, 3).unwrap();

    let params = ModelParams::init(ModelConfig {
        hidden_dim: 4,
        num_blocks: 2,
        k_neighbors: 3,
        num_classes: 3,
        init_seed: 9,
    })
    .unwrap();
    let mut inputs = Vec::new();
    for l in params.layers() {
        inputs.push(l.weight.clone());
        // Nonzero biases keep ReLU inputs off exact zeros.
        let mut b = l.bias.clone();
        b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        inputs.push(b);
    }
    case("model_objective", inputs, move |g, t| {
        let bound = BoundParams::from_tensors(t.chunks(2).map(|c| (c[0], c[1])).collect());
        let branch = |g: &mut Graph, cloud: &PointCloud| -> Result<ProbMatrix> {
            let logits = params.forward(g, &bound, cloud)?;
            ProbMatrix::from_logits(g, logits)
        };
        let z1 = branch(g, &cloud)?;
        let z2 = branch(g, &cloud)?;
        let zm = branch(g, &masked)?;
        let weights = LossWeights { alpha: 1.0, beta: 5.0 };
        let (total, _) = objective_with_targets(g, z1, z2, Some(zm), &labels, weights, Objective::Cpcm, false)?;
        Ok(total)
    })
}

/// A randomly composed chain of unary and binary ops.
fn random_chain() -> Case {
    let mut rng = seed::rng(8);
    let inputs = vec![random(5, 4, -1.0, 1.0, &mut rng), random(5, 4, -1.0, 1.0, &mut rng)];
    let ops: Vec<u32> = (0..10).map(|_| rng.random_range(0..6)).collect();
    case("random_chain", inputs, move |g, t| {
        let mut x = t[0];
        for &op in &ops {
            x = match op {
                0 => g.add(x, t[1])?,
                1 => g.mul(x, t[1])?,
                2 => {
                    let s = g.row_softmax(x)?;
                    g.scale(s, 3.0)?
                }
                3 => g.scale(x, 0.7)?,
                4 => {
                    let sq = g.mul(x, x)?;
                    let pos = g.scale(sq, 0.5)?;
                    let one = g.constant(Matrix::filled(5, 4, 1.0));
                    let shifted = g.add(pos, one)?;
                    g.log(shifted)?
                }
                _ => g.sub(x, t[1])?,
            };
        }
        Ok(x)
    })
}

pub fn composite_cases() -> Vec<Case> {
    vec![mlp_cross_entropy(), model_objective(), random_chain()]
}
