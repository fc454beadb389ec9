//! Weight-shared point segmentation network.
//!
//! Per point, the input is `[(xyz - centroid) / diag, rgb]` where `diag` is
//! the bounding-box diagonal. The network is
//!
//! ```text
//! h0 = relu(x W0 + b0)
//! h_{i+1} = relu([h_i, mean_{j in knn(n)} h_i[j]] W_{i+1} + b_{i+1})
//! logits = h_B W_head + b_head
//! ```
//!
//! with exact k-NN (self included) over the input positions.

use rand::Rng;

use crate::autodiff::{Graph, Matrix, Tensor};
use crate::error::{Error, Result};
use crate::knn::Neighborhood;
use crate::pointcloud::{bounding_box, PointCloud};
use crate::seed;

pub const INPUT_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub k_neighbors: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_blocks: 2,
            k_neighbors: 8,
            num_classes: 4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.k_neighbors == 0 || self.num_classes == 0 {
            return Err(Error::Param(
                "hidden_dim, k_neighbors and num_classes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    /// `fan_in x fan_out`.
    pub weight: Matrix,
    /// `1 x fan_out`.
    pub bias: Matrix,
}

impl Linear {
    fn glorot(name: String, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Self {
            name,
            weight: Matrix::new(fan_in, fan_out, data).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layers: Vec<Linear>,
}

/// Graph handles for one set of parameters, in layer order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    layers: Vec<(Tensor, Tensor)>,
}

impl BoundParams {
    /// Wraps `(weight, bias)` tensors already on a graph, in layer order.
    pub fn from_tensors(layers: Vec<(Tensor, Tensor)>) -> Self {
        Self { layers }
    }

    /// `(weight, bias)` handles per layer.
    pub fn tensors(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }
}

/// Per-point input features and the neighbor table of a cloud.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub features: Matrix,
    pub neighborhood: Neighborhood,
}

/// Sum that does not depend on the order of `values`.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

pub fn input_features(cloud: &PointCloud) -> Result<Matrix> {
    let n = cloud.len();
    if n == 0 {
        return Err(Error::Precondition("forward on an empty cloud".into()));
    }
    let bbox = bounding_box(cloud)?;
    let diag = bbox.diagonal();
    let scale = if diag > 0.0 { 1.0 / diag } else { 1.0 };
    let mut centroid = [0.0; 3];
    let mut column = Vec::with_capacity(n);
    for (a, c) in centroid.iter_mut().enumerate() {
        column.clear();
        column.extend(cloud.positions().iter().map(|p| p[a]));
        *c = order_free_sum(&mut column) / n as f64;
    }
    let mut data = Vec::with_capacity(n * INPUT_DIM);
    for (p, rgb) in cloud.positions().iter().zip(cloud.colors()) {
        for a in 0..3 {
            data.push((p[a] - centroid[a]) * scale);
        }
        data.extend_from_slice(rgb);
    }
    Matrix::new(n, INPUT_DIM, data)
}

impl ModelParams {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.init_seed);
        let h = config.hidden_dim;
        let mut layers = vec![Linear::glorot("input".into(), INPUT_DIM, h, &mut rng)];
        for b in 0..config.num_blocks {
            layers.push(Linear::glorot(format!("block{b}"), 2 * h, h, &mut rng));
        }
        layers.push(Linear::glorot("head".into(), h, config.num_classes, &mut rng));
        Ok(Self { config, layers })
    }

    /// Rebuilds parameters from explicit layers, checking shapes.
    pub fn from_layers(config: ModelConfig, layers: Vec<Linear>) -> Result<Self> {
        let reference = Self::init(config.clone())?;
        if reference.layers.len() != layers.len() {
            return Err(Error::Precondition(format!(
                "expected {} layers, got {}",
                reference.layers.len(),
                layers.len()
            )));
        }
        for (r, l) in reference.layers.iter().zip(&layers) {
            if r.name != l.name
                || r.weight.shape() != l.weight.shape()
                || r.bias.shape() != l.bias.shape()
            {
                return Err(Error::Precondition(format!("layer {} has the wrong shape", l.name)));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Precondition(format!("layer {} is not finite", l.name)));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.data().len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// Registers the parameters as gradient-accumulating leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            layers: self
                .layers
                .iter()
                .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Registers the parameters as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            layers: self
                .layers
                .iter()
                .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
                .collect(),
        }
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<Prepared> {
        let features = input_features(cloud)?;
        let neighborhood = Neighborhood::build(cloud.positions(), self.config.k_neighbors);
        Ok(Prepared { features, neighborhood })
    }

    /// Forward pass with a precomputed neighbor table, e.g. the table of
    /// the raw cloud reused for a rigidly transformed or recolored copy.
    pub fn forward_with_neighbors(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        cloud: &PointCloud,
        neighborhood: &Neighborhood,
    ) -> Result<Tensor> {
        let n = cloud.len();
        if neighborhood.len() != n || neighborhood.k != self.config.k_neighbors.min(n) {
            return Err(Error::Shape {
                op: "forward_with_neighbors",
                detail: format!(
                    "table of {} rows x {} for {n} points with k = {}",
                    neighborhood.len(),
                    neighborhood.k,
                    self.config.k_neighbors
                ),
            });
        }
        self.forward_parts(g, bound, input_features(cloud)?, neighborhood)
    }

    /// Builds the forward pass for `cloud` on `g`; returns `N x C` logits.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, cloud: &PointCloud) -> Result<Tensor> {
        let prepared = self.prepare(cloud)?;
        self.forward_prepared(g, bound, &prepared)
    }

    pub fn forward_prepared(&self, g: &mut Graph, bound: &BoundParams, input: &Prepared) -> Result<Tensor> {
        self.forward_parts(g, bound, input.features.clone(), &input.neighborhood)
    }

    fn forward_parts(&self, g: &mut Graph, bound: &BoundParams, features: Matrix, nb: &Neighborhood) -> Result<Tensor> {
        let layers = &bound.layers;
        let x = g.constant(features);
        let linear = |g: &mut Graph, x: Tensor, (w, b): (Tensor, Tensor)| -> Result<Tensor> {
            let y = g.matmul(x, w)?;
            g.add(y, b)
        };
        let pre = linear(g, x, layers[0])?;
        let mut h = g.relu(pre)?;
        for &layer in &layers[1..layers.len() - 1] {
            let pooled = g.neighbor_mean(h, &nb.table, nb.k)?;
            let joined = g.concat_cols(h, pooled)?;
            let pre = linear(g, joined, layer)?;
            h = g.relu(pre)?;
        }
        linear(g, h, layers[layers.len() - 1])
    }

    /// Inference-only logits.
    pub fn logits(&self, cloud: &PointCloud) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let out = self.forward(&mut g, &bound, cloud)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = seed::rng(seed);
        PointCloud::new(
            (0..n).map(|_| [rng.random::<f64>() * 3.0, rng.random::<f64>() * 2.0, rng.random()]).collect(),
            (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
        )
        .unwrap()
    }

    fn config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            num_blocks: 2,
            k_neighbors: 5,
            num_classes: 4,
            init_seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias_and_bounded_weights() {
        let a = ModelParams::init(config()).unwrap();
        let b = ModelParams::init(config()).unwrap();
        assert_eq!(a, b);
        for l in a.layers() {
            assert!(l.bias.data().iter().all(|&v| v == 0.0));
            let bound = (6.0 / (l.fan_in() + l.fan_out()) as f64).sqrt();
            assert!(l.weight.data().iter().all(|v| v.abs() <= bound));
        }
        assert_eq!(a.layers().len(), 4);
    }

    #[test]
    fn single_point_cloud() {
        let p = ModelParams::init(config()).unwrap();
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]], vec![[0.2, 0.3, 0.4]]).unwrap();
        let out = p.logits(&c).unwrap();
        assert_eq!(out.shape(), (1, 4));
    }

    #[test]
    fn identical_points_identical_rows() {
        let p = ModelParams::init(config()).unwrap();
        let c = PointCloud::new(vec![[0.5, 0.5, 0.5]; 2], vec![[0.1, 0.9, 0.4]; 2]).unwrap();
        let out = p.logits(&c).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let p = ModelParams::init(config()).unwrap();
        let c = cloud(120, 4);
        let out = p.logits(&c).unwrap();
        let mut order: Vec<usize> = (0..120).collect();
        let mut rng = seed::rng(9);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted = p.logits(&c.permuted(&order)).unwrap();
        for (i, &src) in order.iter().enumerate() {
            assert_eq!(permuted.row(i), out.row(src));
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let p = ModelParams::init(config()).unwrap();
        let c = cloud(80, 6);
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let logits = p.forward(&mut g, &bound, &c).unwrap();
        let probs = g.row_softmax(logits).unwrap();
        let w = g.constant(Matrix::new(80, 4, (0..320).map(|i| ((i * 37) % 11) as f64 - 5.0).collect()).unwrap());
        let prod = g.mul(probs, w).unwrap();
        let loss = g.mean_all(prod).unwrap();
        g.backward(loss).unwrap();
        for &(w, b) in bound.tensors() {
            assert!(g.grad(w).unwrap().data().iter().any(|&v| v != 0.0));
            assert!(g.grad(b).unwrap().data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn positions_path_is_color_independent() {
        let p = ModelParams::init(config()).unwrap();
        let c = cloud(60, 7);
        let dark = PointCloud::new(c.positions().to_vec(), vec![[0.0; 3]; 60]).unwrap();
        let a = input_features(&c).unwrap();
        let b = input_features(&dark).unwrap();
        for r in 0..60 {
            assert_eq!(a.row(r)[..3], b.row(r)[..3]);
        }
        assert_ne!(p.logits(&c).unwrap(), p.logits(&dark).unwrap());
    }

    #[test]
    fn features_are_translation_invariant() {
        let c = cloud(40, 8);
        let a = input_features(&c).unwrap();
        let b = input_features(&c.translated([10.0, -3.0, 2.0])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
