//! Mask construction: independent per-point masking and region-wise masking
//! over an even `G x G x G` partition of the scene's bounding box.
//!
//! A mask flag of `true` means the point is masked; masking zeroes the color
//! and leaves the position untouched.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::pointcloud::{bounding_box, Aabb, PointCloud};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskFlag {
    flags: Vec<bool>,
}

impl MaskFlag {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn none(n: usize) -> Self {
        Self::new(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.flags
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Flags as `0`/`1` labels, e.g. for dumping through the scene format.
    pub fn to_labels(&self) -> Vec<i32> {
        self.flags.iter().map(|&f| f as i32).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    Point,
    Region,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(MaskStrategy::Point),
            "region" => Ok(MaskStrategy::Region),
            _ => Err(Error::Param(format!("unknown mask strategy {s:?}"))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::Point => "point",
            MaskStrategy::Region => "region",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub ratio: f64,
    pub region_size: usize,
    pub strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            region_size: 4,
            strategy: MaskStrategy::Region,
        }
    }
}

/// Region grid per axis for a label ratio: 8 below 0.1%, 4 otherwise.
pub fn region_size_for_budget(label_ratio: f64) -> usize {
    if label_ratio < 1e-3 {
        8
    } else {
        4
    }
}

impl MaskConfig {
    /// Defaults for a label ratio: `R = 0.75` and the budget's region size.
    pub fn for_budget(label_ratio: f64) -> Self {
        Self {
            region_size: region_size_for_budget(label_ratio),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if self.region_size == 0 {
            return Err(Error::Param("region size must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Param(format!("mask ratio must be in [0, 1], got {ratio}")));
    }
    Ok(())
}

/// Masks each point independently with probability `ratio`.
pub fn point_mask_flags(n_points: usize, ratio: f64, rng_seed: u64) -> Result<MaskFlag> {
    check_ratio(ratio)?;
    if n_points == 0 {
        return Err(Error::Precondition("point mask over zero points".into()));
    }
    let mut rng = seed::rng(rng_seed);
    // random::<f64>() lies in [0, 1), so ratio 0 masks nothing and ratio 1 everything.
    Ok(MaskFlag::new(
        (0..n_points).map(|_| rng.random::<f64>() < ratio).collect(),
    ))
}

/// Even partition of a box into `G^3` cuboids. Region `(i, j, k)` spans
/// `[min + i*l/G, min + (i+1)*l/G)` along x (and likewise for y, z); the
/// last slab on each axis is closed at the box maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGrid {
    bbox: Aabb,
    region_size: usize,
}

impl RegionGrid {
    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn region_size(&self) -> usize {
        self.region_size
    }

    pub fn num_regions(&self) -> usize {
        self.region_size.pow(3)
    }

    /// Grid line `i` (0..=G) on `axis`.
    pub fn boundary(&self, axis: usize, i: usize) -> f64 {
        if i == self.region_size {
            return self.bbox.max[axis];
        }
        let extent = self.bbox.max[axis] - self.bbox.min[axis];
        self.bbox.min[axis] + i as f64 * extent / self.region_size as f64
    }

    pub fn flat_index(&self, ijk: [usize; 3]) -> usize {
        let g = self.region_size;
        (ijk[0] * g + ijk[1]) * g + ijk[2]
    }

    pub fn region(&self, ijk: [usize; 3]) -> Aabb {
        let min = [0, 1, 2].map(|a| self.boundary(a, ijk[a]));
        let max = [0, 1, 2].map(|a| self.boundary(a, ijk[a] + 1));
        Aabb { min, max }
    }

    /// All regions in flat-index order.
    pub fn regions(&self) -> Vec<Aabb> {
        let g = self.region_size;
        let mut out = Vec::with_capacity(self.num_regions());
        for i in 0..g {
            for j in 0..g {
                for k in 0..g {
                    out.push(self.region([i, j, k]));
                }
            }
        }
        out
    }

    fn slab(&self, axis: usize, v: f64) -> Option<usize> {
        let (lo, hi) = (self.bbox.min[axis], self.bbox.max[axis]);
        if !(lo <= v && v <= hi) {
            return None;
        }
        let g = self.region_size;
        let extent = hi - lo;
        if extent == 0.0 {
            return Some(0);
        }
        let mut i = (((v - lo) / extent) * g as f64).floor() as usize;
        i = i.min(g - 1);
        // Snap against the exact boundaries so membership agrees with
        // `region()` under floating point rounding.
        while i + 1 < g && v >= self.boundary(axis, i + 1) {
            i += 1;
        }
        while i > 0 && v < self.boundary(axis, i) {
            i -= 1;
        }
        Some(i)
    }

    /// Region containing `p`, or `None` outside the box.
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        Some([self.slab(0, p[0])?, self.slab(1, p[1])?, self.slab(2, p[2])?])
    }
}

pub fn region_partition(bbox: &Aabb, region_size: usize) -> Result<RegionGrid> {
    if region_size == 0 {
        return Err(Error::Param("region size must be at least 1".into()));
    }
    Ok(RegionGrid {
        bbox: *bbox,
        region_size,
    })
}

/// Number of regions selected for masking: `round(ratio * G^3)`.
pub fn masked_region_count(ratio: f64, region_size: usize) -> usize {
    (ratio * region_size.pow(3) as f64).round() as usize
}

/// Region indices (flat) selected for masking, drawn uniformly without
/// replacement among all `G^3` regions.
pub fn select_regions(ratio: f64, region_size: usize, rng_seed: u64) -> Result<Vec<usize>> {
    check_ratio(ratio)?;
    if region_size == 0 {
        return Err(Error::Param("region size must be at least 1".into()));
    }
    let total = region_size.pow(3);
    let count = masked_region_count(ratio, region_size).min(total);
    let mut rng = seed::rng(rng_seed);
    let mut chosen = index::sample(&mut rng, total, count).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Masks every point that falls in one of `round(R * G^3)` randomly chosen
/// regions of the cloud's bounding box.
pub fn region_mask_flags(cloud: &PointCloud, config: &MaskConfig, rng_seed: u64) -> Result<MaskFlag> {
    if cloud.is_empty() {
        return Err(Error::Precondition("region mask over an empty cloud".into()));
    }
    config.validate()?;
    let grid = region_partition(&bounding_box(cloud)?, config.region_size)?;
    let chosen = select_regions(config.ratio, config.region_size, rng_seed)?;
    let mut selected = vec![false; grid.num_regions()];
    for r in chosen {
        selected[r] = true;
    }
    let flags = cloud
        .positions()
        .iter()
        .map(|&p| {
            grid.locate(p)
                .map(|ijk| selected[grid.flat_index(ijk)])
                .unwrap_or(false)
        })
        .collect();
    Ok(MaskFlag::new(flags))
}

/// Dispatches on `config.strategy`.
pub fn mask_flags(cloud: &PointCloud, config: &MaskConfig, rng_seed: u64) -> Result<MaskFlag> {
    match config.strategy {
        MaskStrategy::Point => point_mask_flags(cloud.len(), config.ratio, rng_seed),
        MaskStrategy::Region => region_mask_flags(cloud, config, rng_seed),
    }
}

/// Zeroes the color of masked points; positions are copied unchanged.
pub fn apply_mask(cloud: &PointCloud, mask: &MaskFlag) -> Result<PointCloud> {
    if mask.len() != cloud.len() {
        return Err(Error::Precondition(format!(
            "mask has {} flags for {} points",
            mask.len(),
            cloud.len()
        )));
    }
    let colors = cloud
        .colors()
        .iter()
        .zip(mask.as_slice())
        .map(|(&c, &m)| if m { [0.0; 3] } else { c })
        .collect();
    Ok(PointCloud::from_parts_unchecked(cloud.positions().to_vec(), colors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = seed::rng(seed);
        let positions = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let colors = (0..n)
            .map(|_| [rng.random::<f64>() * 0.9 + 0.1, rng.random(), rng.random()])
            .collect();
        PointCloud::new(positions, colors).unwrap()
    }

    #[test]
    fn point_mask_extremes() {
        assert_eq!(point_mask_flags(100, 0.0, 1).unwrap().masked_count(), 0);
        assert_eq!(point_mask_flags(100, 1.0, 1).unwrap().masked_count(), 100);
        assert!(point_mask_flags(10, 1.5, 1).is_err());
        assert!(point_mask_flags(10, -0.1, 1).is_err());
    }

    #[test]
    fn point_mask_half_is_binomial() {
        let m = point_mask_flags(10_000, 0.5, 42).unwrap();
        let c = m.masked_count() as i64;
        assert!((c - 5000).abs() <= 200, "{c}");
    }

    #[test]
    fn point_mask_counts_stay_within_four_sigma() {
        let (n, r) = (2000usize, 0.3);
        let sigma = (n as f64 * r * (1.0 - r)).sqrt();
        for s in 0..50 {
            let c = point_mask_flags(n, r, s).unwrap().masked_count() as f64;
            assert!((c - n as f64 * r).abs() <= 4.0 * sigma, "seed {s}: {c}");
        }
    }

    #[test]
    fn partition_unit_cubes() {
        let b = Aabb::new([0.0; 3], [2.0; 3]).unwrap();
        let grid = region_partition(&b, 2).unwrap();
        let regions = grid.regions();
        assert_eq!(regions.len(), 8);
        for r in &regions {
            assert_eq!(r.extents(), [1.0; 3]);
        }
        assert_eq!(regions[grid.flat_index([1, 0, 1])].min, [1.0, 0.0, 1.0]);
    }

    #[test]
    fn partition_single_region_is_box() {
        let b = Aabb::new([-1.0, 2.0, 0.5], [3.0, 4.0, 0.75]).unwrap();
        let grid = region_partition(&b, 1).unwrap();
        assert_eq!(grid.regions(), vec![b]);
    }

    #[test]
    fn partition_anisotropic_box() {
        let b = Aabb::new([0.0; 3], [4.0, 2.0, 1.0]).unwrap();
        let regions = region_partition(&b, 4).unwrap().regions();
        assert_eq!(regions.len(), 64);
        for r in regions {
            let e = r.extents();
            assert!((e[0] - 1.0).abs() < 1e-15);
            assert!((e[1] - 0.5).abs() < 1e-15);
            assert!((e[2] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn partition_rejects_zero_size() {
        let b = Aabb::new([0.0; 3], [1.0; 3]).unwrap();
        assert!(matches!(region_partition(&b, 0), Err(Error::Param(_))));
    }

    #[test]
    fn degenerate_axis_is_a_single_slab() {
        let cloud = PointCloud::new(
            vec![[0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [0.2, 0.9, 1.0]],
            vec![[0.5; 3]; 3],
        )
        .unwrap();
        let grid = region_partition(&bounding_box(&cloud).unwrap(), 3).unwrap();
        assert_eq!(grid.num_regions(), 27);
        for &p in cloud.positions() {
            assert_eq!(grid.locate(p).unwrap()[2], 0);
        }
    }

    #[test]
    fn region_mask_extremes() {
        let cloud = uniform_cloud(500, 1);
        let all = MaskConfig { ratio: 1.0, region_size: 1, strategy: MaskStrategy::Region };
        assert_eq!(region_mask_flags(&cloud, &all, 3).unwrap().masked_count(), 500);
        let none = MaskConfig { ratio: 0.0, region_size: 4, strategy: MaskStrategy::Region };
        assert_eq!(region_mask_flags(&cloud, &none, 3).unwrap().masked_count(), 0);
    }

    #[test]
    fn region_mask_fraction_tracks_ratio() {
        let cloud = uniform_cloud(10_000, 2);
        let cfg = MaskConfig { ratio: 0.75, region_size: 4, strategy: MaskStrategy::Region };
        assert_eq!(select_regions(0.75, 4, 0).unwrap().len(), 48);
        let mean: f64 = (0..20)
            .map(|s| region_mask_flags(&cloud, &cfg, s).unwrap().masked_count() as f64 / 1e4)
            .sum::<f64>()
            / 20.0;
        assert!((mean - 0.75).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn region_mask_matches_point_in_cuboid_oracle() {
        let cloud = uniform_cloud(2000, 8);
        let cfg = MaskConfig { ratio: 0.4, region_size: 3, strategy: MaskStrategy::Region };
        let flags = region_mask_flags(&cloud, &cfg, 5).unwrap();
        let grid = region_partition(&bounding_box(&cloud).unwrap(), 3).unwrap();
        let chosen = select_regions(0.4, 3, 5).unwrap();
        let regions = grid.regions();
        let bmax = grid.bbox().max;
        let inside = |r: &Aabb, p: [f64; 3]| {
            (0..3).all(|a| r.min[a] <= p[a] && (p[a] < r.max[a] || (r.max[a] == bmax[a] && p[a] == bmax[a])))
        };
        for (p, &f) in cloud.positions().iter().zip(flags.as_slice()) {
            let expected = chosen.iter().any(|&r| inside(&regions[r], *p));
            assert_eq!(f, expected);
        }
    }

    #[test]
    fn apply_mask_zeroes_color_only() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]], vec![[0.5, 0.6, 0.7]]).unwrap();
        let out = apply_mask(&cloud, &MaskFlag::new(vec![true])).unwrap();
        assert_eq!(out.positions()[0], [1.0, 2.0, 3.0]);
        assert_eq!(out.colors()[0], [0.0; 3]);

        let c = uniform_cloud(50, 3);
        assert_eq!(apply_mask(&c, &MaskFlag::none(50)).unwrap(), c);
        assert!(apply_mask(&c, &MaskFlag::none(49)).is_err());
    }

    #[test]
    fn mask_flags_dump_as_labels() {
        assert_eq!(MaskFlag::new(vec![true, false]).to_labels(), vec![1, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn selected_region_count_is_exact(ratio in 0.0f64..=1.0, g in 1usize..9, seed in any::<u64>()) {
            let chosen = select_regions(ratio, g, seed).unwrap();
            prop_assert_eq!(chosen.len(), (ratio * (g * g * g) as f64).round() as usize);
            let mut dedup = chosen.clone();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), chosen.len());
        }

        #[test]
        fn masking_keeps_positions_and_is_idempotent(seed in any::<u64>(), ratio in 0.0f64..=1.0) {
            let cloud = uniform_cloud(300, seed);
            let cfg = MaskConfig { ratio, region_size: 4, strategy: MaskStrategy::Region };
            let m = region_mask_flags(&cloud, &cfg, seed ^ 1).unwrap();
            let once = apply_mask(&cloud, &m).unwrap();
            prop_assert_eq!(once.positions(), cloud.positions());
            for ((a, b), &f) in once.colors().iter().zip(cloud.colors()).zip(m.as_slice()) {
                if f { prop_assert_eq!(*a, [0.0; 3]); } else { prop_assert_eq!(a, b); }
            }
            prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        }

        #[test]
        fn every_point_in_exactly_one_region(seed in any::<u64>(), g in 1usize..7) {
            let cloud = uniform_cloud(200, seed);
            let grid = region_partition(&bounding_box(&cloud).unwrap(), g).unwrap();
            let regions = grid.regions();
            let bmax = grid.bbox().max;
            for &p in cloud.positions() {
                let hits = regions.iter().filter(|r| {
                    (0..3).all(|a| r.min[a] <= p[a] && (p[a] < r.max[a] || (r.max[a] == bmax[a] && p[a] == bmax[a])))
                }).count();
                prop_assert_eq!(hits, 1);
                let ijk = grid.locate(p).unwrap();
                let r = &regions[grid.flat_index(ijk)];
                prop_assert!(r.contains(p));
            }
        }
    }
}
