//! Random augmentations for the two consistency branches.
//!
//! Positions go through scale, yaw rotation about +z, optional mirroring of
//! x and/or y, then translation. Colors get uniform additive jitter and are
//! clamped to `[0, 1]`. Point order is never changed.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Yaw angle is drawn from `[-rotation, rotation]` (radians).
    pub rotation: f64,
    /// Probability of mirroring each horizontal axis.
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    /// Per-channel jitter drawn from `[-color_jitter, color_jitter]`.
    pub color_jitter: f64,
    /// Per-axis shift drawn from `[-translation, translation]` (meters).
    pub translation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: PI,
            flip_prob: 0.5,
            scale_range: (0.9, 1.1),
            color_jitter: 0.05,
            translation: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            flip_prob: 0.0,
            scale_range: (1.0, 1.0),
            color_jitter: 0.0,
            translation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Param(format!("invalid scale range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Param(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        for (name, v) in [
            ("rotation", self.rotation),
            ("color_jitter", self.color_jitter),
            ("translation", self.translation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub yaw: f64,
    pub flip: [bool; 2],
    pub shift: [f64; 3],
    jitter_seed: u64,
    jitter: f64,
}

fn symmetric(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        half_width * (2.0 * rng.random::<f64>() - 1.0)
    }
}

impl AugmentParams {
    pub fn draw(config: &AugmentConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(rng_seed);
        let (lo, hi) = config.scale_range;
        let scale = if lo == hi { lo } else { lo + (hi - lo) * rng.random::<f64>() };
        let yaw = symmetric(&mut rng, config.rotation);
        let flip = [
            rng.random::<f64>() < config.flip_prob,
            rng.random::<f64>() < config.flip_prob,
        ];
        let shift = [
            symmetric(&mut rng, config.translation),
            symmetric(&mut rng, config.translation),
            symmetric(&mut rng, config.translation),
        ];
        Ok(Self {
            scale,
            yaw,
            flip,
            shift,
            jitter_seed: rng.random(),
            jitter: config.color_jitter,
        })
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = if self.yaw == 0.0 { (0.0, 1.0) } else { self.yaw.sin_cos() };
        let (x, y, z) = (p[0] * self.scale, p[1] * self.scale, p[2] * self.scale);
        let mut rx = c * x - s * y;
        let mut ry = s * x + c * y;
        if self.flip[0] {
            rx = -rx;
        }
        if self.flip[1] {
            ry = -ry;
        }
        [rx + self.shift[0], ry + self.shift[1], z + self.shift[2]]
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let positions = cloud.positions().iter().map(|&p| self.transform_point(p)).collect();
        let mut rng = seed::rng(self.jitter_seed);
        let colors = cloud
            .colors()
            .iter()
            .map(|c| {
                c.map(|v| (v + symmetric(&mut rng, self.jitter)).clamp(0.0, 1.0))
            })
            .collect();
        PointCloud::from_parts_unchecked(positions, colors)
    }
}

pub fn augment(cloud: &PointCloud, config: &AugmentConfig, rng_seed: u64) -> Result<PointCloud> {
    Ok(AugmentParams::draw(config, rng_seed)?.apply(cloud))
}
