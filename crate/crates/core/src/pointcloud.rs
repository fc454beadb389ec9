//! Point cloud data model, scene text files, bounding boxes, voxel
//! downsampling and weak label sampling.
//!
//! Scene files are line-oriented ASCII:
//!
//! ```text
//! # optional comment lines
//! N C
//! x y z r g b label      (N rows)
//! ```
//!
//! A label of `-1` marks an unlabeled point. Colors are stored in `[0, 1]`;
//! a file whose color columns are all integers with at least one value above
//! 1 is read as 8-bit color and divided by 255.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::seed;

/// Label value for "no annotation".
pub const UNLABELED: i32 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Precondition("point cloud must have at least one point".into()));
        }
        if positions.len() != colors.len() {
            return Err(Error::Precondition(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(n) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Precondition(format!("non-finite position at point {n}")));
        }
        if let Some(n) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::Precondition(format!("color outside [0, 1] at point {n}")));
        }
        Ok(Self { positions, colors })
    }

    // Callers guarantee the invariants (same length, finite, colors in range).
    pub(crate) fn from_parts_unchecked(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(positions.len(), colors.len());
        Self { positions, colors }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn into_parts(self) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
        (self.positions, self.colors)
    }

    /// Returns the cloud with rows reordered so that row `i` of the result is
    /// row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            colors: order.iter().map(|&i| self.colors[i]).collect(),
        }
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
            colors: self.colors.clone(),
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(min[a] <= max[a])) {
            return Err(Error::Precondition(format!("box min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn extents(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extents();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    /// Closed-box membership.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

pub fn bounding_box(cloud: &PointCloud) -> Result<Aabb> {
    let first = *cloud
        .positions
        .first()
        .ok_or_else(|| Error::Precondition("bounding box of an empty cloud".into()))?;
    let (min, max) = cloud.positions.iter().fold((first, first), |(mut lo, mut hi), p| {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
        (lo, hi)
    });
    Ok(Aabb { min, max })
}

/// A cloud with per-point labels (`UNLABELED` allowed) and its class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub labels: Vec<i32>,
    pub num_classes: usize,
}

impl Scene {
    pub fn new(cloud: PointCloud, labels: Vec<i32>, num_classes: usize) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(Error::Precondition(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.len()
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != UNLABELED && (l < 0 || l as usize >= num_classes))
        {
            return Err(Error::Precondition(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            cloud,
            labels,
            num_classes,
        })
    }

    /// Labels as class indices; fails if any point is unlabeled.
    pub fn dense_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| {
                usize::try_from(l)
                    .map_err(|_| Error::Precondition("scene has unlabeled points".into()))
            })
            .collect()
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_scene(&text, path)
}

pub fn parse_scene(text: &str, path: &Path) -> Result<Scene> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 {
        return Err(Error::parse(path, hline, "header must be \"N C\""));
    }
    let n: usize = head[0]
        .parse()
        .map_err(|_| Error::parse(path, hline, format!("bad point count {:?}", head[0])))?;
    let c: usize = head[1]
        .parse()
        .map_err(|_| Error::parse(path, hline, format!("bad class count {:?}", head[1])))?;
    if n == 0 || c == 0 {
        return Err(Error::parse(path, hline, "point and class counts must be positive"));
    }

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut color_lines = Vec::with_capacity(n);
    let mut integer_colors = true;
    for (lineno, line) in lines {
        if positions.len() == n {
            return Err(Error::parse(path, lineno, format!("more than {n} data rows")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 7 fields, found {}", fields.len()),
            ));
        }
        let mut vals = [0.0; 6];
        for (v, f) in vals.iter_mut().zip(&fields[..6]) {
            *v = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::parse(path, lineno, format!("non-numeric field {f:?}")))?;
        }
        integer_colors &= fields[3..6].iter().all(|f| f.parse::<i64>().is_ok());
        let label: i32 = fields[6]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("non-integer label {:?}", fields[6])))?;
        if label != UNLABELED && (label < 0 || label as usize >= c) {
            return Err(Error::parse(
                path,
                lineno,
                format!("label {label} out of range for {c} classes"),
            ));
        }
        positions.push([vals[0], vals[1], vals[2]]);
        colors.push([vals[3], vals[4], vals[5]]);
        labels.push(label);
        color_lines.push(lineno);
    }
    if positions.len() != n {
        return Err(Error::parse(
            path,
            text.lines().count(),
            format!("expected {n} data rows, found {}", positions.len()),
        ));
    }

    let eight_bit = integer_colors && colors.iter().flatten().any(|&v| v > 1.0);
    let (lo, hi, scale) = if eight_bit { (0.0, 255.0, 255.0) } else { (0.0, 1.0, 1.0) };
    for (rgb, &lineno) in colors.iter_mut().zip(&color_lines) {
        if rgb.iter().any(|v| !(lo..=hi).contains(v)) {
            return Err(Error::parse(path, lineno, format!("color channel outside [{lo}, {hi}]")));
        }
        for v in rgb.iter_mut() {
            *v /= scale;
        }
    }

    let cloud = PointCloud::from_parts_unchecked(positions, colors);
    Ok(Scene {
        cloud,
        labels,
        num_classes: c,
    })
}

/// Renders a scene in the text format with 6 decimals per real.
pub fn format_scene(cloud: &PointCloud, labels: &[i32], num_classes: usize) -> Result<String> {
    if labels.len() != cloud.len() {
        return Err(Error::Precondition(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.len()
        )));
    }
    let mut out = String::with_capacity(cloud.len() * 64);
    writeln!(out, "{} {}", cloud.len(), num_classes).unwrap();
    for ((p, c), l) in cloud.positions.iter().zip(&cloud.colors).zip(labels) {
        writeln!(
            out,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {}",
            p[0], p[1], p[2], c[0], c[1], c[2], l
        )
        .unwrap();
    }
    Ok(out)
}

pub fn save_scene(
    cloud: &PointCloud,
    labels: &[i32],
    num_classes: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let text = format_scene(cloud, labels, num_classes)?;
    fs::write(path, text)?;
    Ok(())
}

/// Integer voxel coordinate of `p` for cubic voxels of edge `size`.
pub fn voxel_key(p: [f64; 3], size: f64) -> [i64; 3] {
    [
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    ]
}

/// Collapses every occupied voxel to one point: centroid position, mean
/// color and the majority label among labeled members (ties go to the
/// smaller class, `UNLABELED` if no member is labeled). Output is ordered by
/// voxel key.
pub fn voxel_downsample(
    cloud: &PointCloud,
    labels: &[i32],
    voxel_size: f64,
) -> Result<(PointCloud, Vec<i32>)> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::Param(format!("voxel size must be positive, got {voxel_size}")));
    }
    if labels.len() != cloud.len() {
        return Err(Error::Precondition(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.len()
        )));
    }
    let mut buckets: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        buckets.entry(voxel_key(*p, voxel_size)).or_default().push(i);
    }

    let mut positions = Vec::with_capacity(buckets.len());
    let mut colors = Vec::with_capacity(buckets.len());
    let mut out_labels = Vec::with_capacity(buckets.len());
    let mut votes: Vec<usize> = Vec::new();
    for members in buckets.values() {
        let inv = 1.0 / members.len() as f64;
        let mut pos = [0.0; 3];
        let mut col = [0.0; 3];
        votes.iter_mut().for_each(|v| *v = 0);
        for &i in members {
            for a in 0..3 {
                pos[a] += cloud.positions[i][a];
                col[a] += cloud.colors[i][a];
            }
            if let Ok(l) = usize::try_from(labels[i]) {
                if votes.len() <= l {
                    votes.resize(l + 1, 0);
                }
                votes[l] += 1;
            }
        }
        positions.push(pos.map(|v| v * inv));
        colors.push(col.map(|v| (v * inv).clamp(0.0, 1.0)));
        let best = votes
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .fold(None, |best: Option<(usize, usize)>, (l, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((l, v)),
            });
        out_labels.push(best.map_or(UNLABELED, |(l, _)| l as i32));
    }
    Ok((PointCloud::from_parts_unchecked(positions, colors), out_labels))
}

/// Sparse annotation of a scene: labels with `UNLABELED` everywhere except
/// the labeled set S.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakLabels {
    labels: Vec<i32>,
    num_classes: usize,
}

impl WeakLabels {
    pub fn new(labels: Vec<i32>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != UNLABELED && (l < 0 || l as usize >= num_classes))
        {
            return Err(Error::Precondition(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.labels
    }

    pub fn get(&self, n: usize) -> Option<usize> {
        usize::try_from(self.labels[n]).ok()
    }

    /// The labeled index set S, ascending.
    pub fn labeled(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&n| self.labels[n] != UNLABELED).collect()
    }

    /// The unlabeled index set U, ascending.
    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&n| self.labels[n] == UNLABELED).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelBudget {
    /// Fraction of points to keep, in (0, 1].
    Ratio(f64),
    /// Fixed number of points per scene.
    Count(usize),
}

impl LabelBudget {
    pub fn count_for(&self, n: usize) -> Result<usize> {
        match *self {
            LabelBudget::Ratio(r) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::Param(format!("label ratio must be in (0, 1], got {r}")));
                }
                Ok(((r * n as f64).floor() as usize).max(1))
            }
            LabelBudget::Count(k) => {
                if k == 0 || k > n {
                    return Err(Error::Param(format!("label count {k} outside 1..={n}")));
                }
                Ok(k)
            }
        }
    }
}

/// Keeps the labels of a uniformly drawn subset of points (without
/// replacement) and marks the rest `UNLABELED`.
pub fn sample_weak_labels(
    full_labels: &[i32],
    num_classes: usize,
    budget: LabelBudget,
    rng_seed: u64,
) -> Result<WeakLabels> {
    let n = full_labels.len();
    if n == 0 {
        return Err(Error::Precondition("cannot sample labels from an empty scene".into()));
    }
    let k = budget.count_for(n)?;
    let mut labels = vec![UNLABELED; n];
    let mut rng = seed::rng(rng_seed);
    for i in index::sample(&mut rng, n, k) {
        labels[i] = full_labels[i];
    }
    WeakLabels::new(labels, num_classes)
}
