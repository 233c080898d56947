//! Random rigid-plus-scale views of a cloud for the swapped objective.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::io::LabelledCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Random rotation about the vertical axis, uniform in [0, 2π).
    pub rotate: bool,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Per-coordinate Gaussian jitter in meters; 0 disables it.
    pub jitter_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            scale_lo: 0.95,
            scale_hi: 1.05,
            jitter_sigma: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotate: false,
            scale_lo: 1.0,
            scale_hi: 1.0,
            jitter_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi && self.scale_hi.is_finite()) {
            return Err(invalid(format!(
                "scale range [{}, {}] is invalid",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(invalid(format!(
                "jitter sigma {} is invalid",
                self.jitter_sigma
            )));
        }
        Ok(())
    }
}

/// Two views with identical labels; point `i` of `a` is point `i` of `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub a: LabelledCloud,
    pub b: LabelledCloud,
}

pub fn make_views(cloud: &LabelledCloud, cfg: &AugmentConfig, seed: u64) -> Result<ViewPair> {
    let (a, b) = make_coord_views(&cloud.coords, cfg, seed)?;
    let view = |coords| LabelledCloud {
        scene_id: cloud.scene_id.clone(),
        coords,
        labels: cloud.labels.clone(),
    };
    Ok(ViewPair {
        a: view(a),
        b: view(b),
    })
}

pub type CoordViews = (Vec<[f64; 3]>, Vec<[f64; 3]>);

/// Coordinates of two independent views of the same points.
pub fn make_coord_views(coords: &[[f64; 3]], cfg: &AugmentConfig, seed: u64) -> Result<CoordViews> {
    cfg.validate()?;
    if coords.is_empty() {
        return Err(invalid("cannot augment an empty cloud"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = augment(coords, cfg, &mut rng);
    let b = augment(coords, cfg, &mut rng);
    Ok((a, b))
}

/// Rotation by `angle` about z followed by isotropic `scale`.
pub fn rotate_scale(p: [f64; 3], angle: f64, scale: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [
        scale * (c * p[0] - s * p[1]),
        scale * (s * p[0] + c * p[1]),
        scale * p[2],
    ]
}

fn augment(coords: &[[f64; 3]], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let angle = if cfg.rotate {
        rng.random_range(0.0..TAU)
    } else {
        0.0
    };
    let scale = if cfg.scale_hi > cfg.scale_lo {
        rng.random_range(cfg.scale_lo..=cfg.scale_hi)
    } else {
        cfg.scale_lo
    };
    let jitter =
        (cfg.jitter_sigma > 0.0).then(|| Normal::new(0.0, cfg.jitter_sigma).expect("validated"));
    coords
        .iter()
        .map(|&p| {
            let mut q = rotate_scale(p, angle, scale);
            if let Some(n) = &jitter {
                for v in &mut q {
                    *v += n.sample(rng);
                }
            }
            q
        })
        .collect()
}
