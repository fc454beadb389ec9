//! Procedural indoor-like scenes with per-point ground truth: a floor, four
//! walls and a few objects resting on the floor.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::{save_scene, PointCloud, Scene};
use crate::seed::{self, stream, Rng};

pub mod class {
    pub const FLOOR: usize = 0;
    pub const WALL: usize = 1;
    pub const BOX: usize = 2;
    pub const SPHERE: usize = 3;
    pub const CYLINDER: usize = 4;
}

pub const CLASS_NAMES: [&str; 5] = ["floor", "wall", "box", "sphere", "cylinder"];

/// Base RGB per class. Boxes and walls are close on purpose.
pub const BASE_COLORS: [[f64; 3]; 5] = [
    [0.55, 0.42, 0.30],
    [0.72, 0.72, 0.66],
    [0.66, 0.66, 0.58],
    [0.30, 0.45, 0.70],
    [0.62, 0.32, 0.30],
];

const MAX_PLACEMENT_RETRIES: usize = 100;
const WALL_MARGIN: f64 = 0.1;
const OBJECT_GAP: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Room extents in meters along x, y, z.
    pub room: [f64; 3],
    /// Points per square meter of surface.
    pub density: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// 2..=5; classes are taken from the front of [`CLASS_NAMES`].
    pub num_classes: usize,
    /// Standard deviation of the per-point, per-channel color noise.
    pub color_noise: f64,
    /// Each surface instance (the floor, each wall, each object) shifts its
    /// class color by a uniform draw from `[-x, x]` per channel.
    pub instance_color_jitter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room: [4.0, 4.0, 2.5],
            density: 400.0,
            min_objects: 3,
            max_objects: 6,
            num_classes: 4,
            color_noise: 0.05,
            instance_color_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Param(format!("room extents must be positive, got {:?}", self.room)));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::Param(format!("density must be positive, got {}", self.density)));
        }
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::Param(format!(
                "num_classes must be in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Param(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        if self.num_classes <= class::BOX && self.max_objects > 0 {
            return Err(Error::Param(format!(
                "{} classes leave no object class; set max_objects = 0",
                self.num_classes
            )));
        }
        if !(self.color_noise >= 0.0 && self.color_noise.is_finite()) {
            return Err(Error::Param(format!("invalid color noise {}", self.color_noise)));
        }
        if !(0.0..=1.0).contains(&self.instance_color_jitter) {
            return Err(Error::Param(format!(
                "instance color jitter must be in [0, 1], got {}",
                self.instance_color_jitter
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    /// Center of the footprint and full size.
    Box { center: [f64; 2], size: [f64; 3] },
    Sphere { center: [f64; 2], radius: f64 },
    Cylinder { center: [f64; 2], radius: f64, height: f64 },
}

impl Shape {
    fn class(&self) -> usize {
        match self {
            Shape::Box { .. } => class::BOX,
            Shape::Sphere { .. } => class::SPHERE,
            Shape::Cylinder { .. } => class::CYLINDER,
        }
    }

    /// Footprint half extents along x and y.
    fn half(&self) -> [f64; 2] {
        match *self {
            Shape::Box { size, .. } => [size[0] / 2.0, size[1] / 2.0],
            Shape::Sphere { radius, .. } | Shape::Cylinder { radius, .. } => [radius, radius],
        }
    }

    fn center(&self) -> [f64; 2] {
        match *self {
            Shape::Box { center, .. } | Shape::Sphere { center, .. } | Shape::Cylinder { center, .. } => center,
        }
    }

    fn overlaps(&self, other: &Shape) -> bool {
        let (a, b) = (self.center(), other.center());
        let (ha, hb) = (self.half(), other.half());
        (0..2).all(|i| (a[i] - b[i]).abs() < ha[i] + hb[i] + OBJECT_GAP)
    }

    /// Whether the object hides the floor at `(x, y)`.
    fn covers_floor(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Box { center, size } => {
                (x - center[0]).abs() <= size[0] / 2.0 && (y - center[1]).abs() <= size[1] / 2.0
            }
            Shape::Cylinder { center, radius, .. } => (x - center[0]).powi(2) + (y - center[1]).powi(2) <= radius * radius,
            Shape::Sphere { .. } => false,
        }
    }
}

struct Sampler<'a> {
    rng: Rng,
    config: &'a SceneConfig,
    noise: Option<Normal<f64>>,
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    labels: Vec<i32>,
}

impl Sampler<'_> {
    fn count(&mut self, area: f64) -> usize {
        // Stochastic rounding keeps the expected count exact.
        let x = area * self.config.density;
        let base = x.floor();
        base as usize + usize::from(self.rng.random::<f64>() < x - base)
    }

    /// Class color shifted by this instance's jitter.
    fn instance_color(&mut self, cls: usize) -> [f64; 3] {
        let j = self.config.instance_color_jitter;
        BASE_COLORS[cls].map(|b| b + j * (2.0 * self.rng.random::<f64>() - 1.0))
    }

    fn push(&mut self, p: [f64; 3], cls: usize, base: [f64; 3]) {
        let color = match self.noise {
            Some(n) => base.map(|b| (b + n.sample(&mut self.rng)).clamp(0.0, 1.0)),
            None => base,
        };
        self.positions.push(p);
        self.colors.push(color);
        self.labels.push(cls as i32);
    }

    /// Uniform samples on the rectangle `origin + s * u + t * v`, with
    /// `s, t` in `[0, 1]`.
    fn rect(&mut self, origin: [f64; 3], u: [f64; 3], v: [f64; 3], cls: usize, base: [f64; 3]) {
        let area = norm(cross(u, v));
        for _ in 0..self.count(area) {
            let (s, t): (f64, f64) = (self.rng.random(), self.rng.random());
            self.push([0, 1, 2].map(|a| origin[a] + s * u[a] + t * v[a]), cls, base);
        }
    }

    fn shape(&mut self, shape: &Shape) {
        let cls = shape.class();
        let base = self.instance_color(cls);
        match *shape {
            Shape::Box { center, size } => {
                let [sx, sy, sz] = size;
                let (x0, y0) = (center[0] - sx / 2.0, center[1] - sy / 2.0);
                self.rect([x0, y0, sz], [sx, 0.0, 0.0], [0.0, sy, 0.0], cls, base);
                self.rect([x0, y0, 0.0], [sx, 0.0, 0.0], [0.0, 0.0, sz], cls, base);
                self.rect([x0, y0 + sy, 0.0], [sx, 0.0, 0.0], [0.0, 0.0, sz], cls, base);
                self.rect([x0, y0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz], cls, base);
                self.rect([x0 + sx, y0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz], cls, base);
            }
            Shape::Sphere { center, radius } => {
                let area = 4.0 * std::f64::consts::PI * radius * radius;
                for _ in 0..self.count(area) {
                    let d = unit_vector(&mut self.rng);
                    self.push([center[0] + radius * d[0], center[1] + radius * d[1], radius + radius * d[2]], cls, base);
                }
            }
            Shape::Cylinder { center, radius, height } => {
                let tau = std::f64::consts::TAU;
                for _ in 0..self.count(tau * radius * height) {
                    let (a, z): (f64, f64) = (self.rng.random::<f64>() * tau, self.rng.random::<f64>() * height);
                    self.push([center[0] + radius * a.cos(), center[1] + radius * a.sin(), z], cls, base);
                }
                for _ in 0..self.count(std::f64::consts::PI * radius * radius) {
                    let (a, r): (f64, f64) = (self.rng.random::<f64>() * tau, radius * self.rng.random::<f64>().sqrt());
                    self.push([center[0] + r * a.cos(), center[1] + r * a.sin(), height], cls, base);
                }
            }
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = norm(v);
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

fn draw_shape(rng: &mut Rng, kind: usize, room: [f64; 3]) -> Shape {
    let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let (shape, half) = match kind {
        class::BOX => {
            let size = [uniform(0.4, 1.0), uniform(0.4, 1.0), uniform(0.3, 1.0)];
            (Shape::Box { center: [0.0; 2], size }, [size[0] / 2.0, size[1] / 2.0])
        }
        class::SPHERE => {
            let radius = uniform(0.2, 0.45);
            (Shape::Sphere { center: [0.0; 2], radius }, [radius; 2])
        }
        _ => {
            let radius = uniform(0.15, 0.35);
            let height = uniform(0.4, 1.2);
            (
                Shape::Cylinder {
                    center: [0.0; 2],
                    radius,
                    height,
                },
                [radius; 2],
            )
        }
    };
    let lo = [WALL_MARGIN + half[0], WALL_MARGIN + half[1]];
    let hi = [room[0] - WALL_MARGIN - half[0], room[1] - WALL_MARGIN - half[1]];
    let center = [uniform(lo[0], hi[0].max(lo[0])), uniform(lo[1], hi[1].max(lo[1]))];
    match shape {
        Shape::Box { size, .. } => Shape::Box { center, size },
        Shape::Sphere { radius, .. } => Shape::Sphere { center, radius },
        Shape::Cylinder { radius, height, .. } => Shape::Cylinder { center, radius, height },
    }
}

fn fits(shape: &Shape, room: [f64; 3]) -> bool {
    let (c, h) = (shape.center(), shape.half());
    let top = match *shape {
        Shape::Box { size, .. } => size[2],
        Shape::Sphere { radius, .. } => 2.0 * radius,
        Shape::Cylinder { height, .. } => height,
    };
    (0..2).all(|i| c[i] - h[i] >= WALL_MARGIN && c[i] + h[i] <= room[i] - WALL_MARGIN) && top <= room[2]
}

/// Generates one scene; labels are dense class indices.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = seed::rng(config.seed);
    let [w, d, h] = config.room;

    let n_objects = rng.random_range(config.min_objects..=config.max_objects);
    let kinds: Vec<usize> = (class::BOX..config.num_classes).collect();
    let mut shapes: Vec<Shape> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let kind = kinds[rng.random_range(0..kinds.len())];
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let s = draw_shape(&mut rng, kind, config.room);
            if fits(&s, config.room) && shapes.iter().all(|o| !o.overlaps(&s)) {
                shapes.push(s);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {} of {n_objects} after {MAX_PLACEMENT_RETRIES} attempts",
                i + 1
            )));
        }
    }

    let noise = if config.color_noise > 0.0 {
        Some(Normal::new(0.0, config.color_noise).map_err(|e| Error::Param(e.to_string()))?)
    } else {
        None
    };
    let mut s = Sampler {
        rng,
        config,
        noise,
        positions: Vec::new(),
        colors: Vec::new(),
        labels: Vec::new(),
    };

    let floor = s.instance_color(class::FLOOR);
    for _ in 0..s.count(w * d) {
        let (x, y) = (s.rng.random::<f64>() * w, s.rng.random::<f64>() * d);
        if shapes.iter().all(|o| !o.covers_floor(x, y)) {
            s.push([x, y, 0.0], class::FLOOR, floor);
        }
    }
    let walls = [
        ([0.0, 0.0, 0.0], [0.0, d, 0.0]),
        ([w, 0.0, 0.0], [0.0, d, 0.0]),
        ([0.0, 0.0, 0.0], [w, 0.0, 0.0]),
        ([0.0, d, 0.0], [w, 0.0, 0.0]),
    ];
    for (origin, along) in walls {
        let color = s.instance_color(class::WALL);
        s.rect(origin, along, [0.0, 0.0, h], class::WALL, color);
    }
    for shape in &shapes {
        s.shape(shape);
    }

    let cloud = PointCloud::new(s.positions, s.colors)?;
    Scene::new(cloud, s.labels, config.num_classes)
}

/// `n` scenes from `template` with per-scene seeds derived from `seed`.
pub fn generate_dataset(n: usize, template: &SceneConfig, seed: u64) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::Param("n_scenes must be at least 1".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let config = SceneConfig {
                seed: seed::derive(seed, stream::SCENE, i as u64),
                ..template.clone()
            };
            generate_scene(&config)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

/// Writes scene files and `manifest.txt` into `dir`; returns the manifest
/// path. Scene paths in the manifest are relative to `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, train: &[Scene], eval: &[Scene]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (split, scenes) in [(Split::Train, train), (Split::Eval, eval)] {
        for (i, scene) in scenes.iter().enumerate() {
            let name = format!("{}_{i:04}.txt", split.as_str());
            save_scene(&scene.cloud, &scene.labels, scene.num_classes, dir.join(&name))?;
            manifest.push_str(&format!("{name} {}\n", split.as_str()));
        }
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Parses a manifest; relative paths resolve against the manifest's
/// directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(file), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(path, i + 1, "expected \"path split\""));
        };
        let split = match split {
            "train" => Split::Train,
            "eval" => Split::Eval,
            other => return Err(Error::parse(path, i + 1, format!("unknown split {other:?}"))),
        };
        out.push(ManifestEntry {
            path: base.join(file),
            split,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn histogram(scene: &Scene) -> Vec<usize> {
        let mut h = vec![0; scene.num_classes];
        for &l in &scene.labels {
            h[l as usize] += 1;
        }
        h
    }

    #[test]
    fn zero_objects_gives_floor_and_walls() {
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..Default::default()
        };
        let h = histogram(&generate_scene(&cfg).unwrap());
        assert!(h[0] > 0 && h[1] > 0);
        assert_eq!(h[2..].iter().sum::<usize>(), 0);
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig { seed: 9, ..Default::default() };
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        let other = SceneConfig { seed: 10, ..Default::default() };
        assert_ne!(generate_scene(&cfg).unwrap(), generate_scene(&other).unwrap());
    }

    #[test]
    fn default_scene_has_every_class() {
        for seed in 0..10 {
            let scene = generate_scene(&SceneConfig { seed, ..Default::default() }).unwrap();
            let h = histogram(&scene);
            let present = h.iter().filter(|&&c| c >= 50).count();
            // Every scene has floor and walls; objects are drawn at random.
            assert!(present >= 3, "seed {seed}: {h:?}");
        }
        let data = generate_dataset(20, &SceneConfig::default(), 3).unwrap();
        let mut total = vec![0; 4];
        for s in &data {
            for (t, c) in total.iter_mut().zip(histogram(s)) {
                *t += c;
            }
        }
        assert!(total.iter().all(|&c| c >= 50), "{total:?}");
        let sum: usize = total.iter().sum();
        assert!(total.iter().all(|&c| (c as f64) < 0.7 * sum as f64), "{total:?}");
    }

    #[test]
    fn geometry_matches_labels() {
        let cfg = SceneConfig {
            num_classes: 5,
            seed: 4,
            ..Default::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let [w, d, h] = cfg.room;
        for (p, &l) in scene.cloud.positions().iter().zip(&scene.labels) {
            assert!(p[0] >= -1e-9 && p[0] <= w + 1e-9 && p[1] >= -1e-9 && p[1] <= d + 1e-9);
            assert!(p[2] >= -1e-9 && p[2] <= h + 1e-9);
            if l as usize == class::FLOOR {
                assert_eq!(p[2], 0.0);
            }
            if l as usize == class::WALL {
                let on = p[0] == 0.0 || p[0] == w || p[1] == 0.0 || p[1] == d;
                assert!(on, "{p:?}");
            }
        }
        for c in scene.cloud.colors() {
            assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn impossible_placement_is_an_error() {
        let cfg = SceneConfig {
            room: [0.5, 0.5, 2.5],
            min_objects: 3,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn dataset_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let template = SceneConfig {
            density: 30.0,
            ..Default::default()
        };
        let train = generate_dataset(2, &template, 1).unwrap();
        let eval = generate_dataset(1, &template, 2).unwrap();
        let manifest = write_dataset(dir.path(), &train, &eval).unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[2].split, Split::Eval);
        let back = crate::pointcloud::load_scene(&entries[0].path).unwrap();
        assert_eq!(back.labels, train[0].labels);
    }
}
