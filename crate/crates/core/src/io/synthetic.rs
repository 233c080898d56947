//! Seeded synthetic scenes standing in for LiDAR sweeps.
//!
//! Each class is either a flat ground-like slab or a set of Gaussian blobs
//! placed on a ring of fixed radius and height. Blob positions are redrawn per
//! scene, so classes are separable by geometry but not by absolute position.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::distr::weighted::WeightedIndex;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassTable, LabelledCloud};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Square slab of half-width `extent` centred at height `z`.
    Plane { extent: f64, z: f64, thickness: f64 },
    /// `blobs` isotropic Gaussians of std `spread`, centred on a ring.
    Blobs {
        radius: f64,
        height: f64,
        spread: f64,
        blobs: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archetype {
    pub id: u32,
    pub name: String,
    pub shape: Shape,
    /// Expected fraction of a scene's points, before presence sampling.
    pub share: f64,
    /// Probability that the class occurs in a given scene.
    pub presence: f64,
}

impl Archetype {
    pub fn plane(id: u32, name: &str, extent: f64, z: f64, thickness: f64, share: f64) -> Self {
        Self {
            id,
            name: name.into(),
            shape: Shape::Plane {
                extent,
                z,
                thickness,
            },
            share,
            presence: 1.0,
        }
    }

    pub fn blobs(id: u32, name: &str, radius: f64, height: f64, spread: f64, share: f64) -> Self {
        Self {
            id,
            name: name.into(),
            shape: Shape::Blobs {
                radius,
                height,
                spread,
                blobs: 3,
            },
            share,
            presence: 1.0,
        }
    }

    pub fn with_presence(mut self, presence: f64) -> Self {
        self.presence = presence;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_scenes: usize,
    pub points_per_scene: usize,
    pub seed: u64,
    pub archetypes: Vec<Archetype>,
}

impl SyntheticConfig {
    /// Five classes: a ground plane, two base blob classes and two
    /// well-separated blob classes that are absent from some scenes.
    pub fn toy(n_scenes: usize, points_per_scene: usize, seed: u64) -> Self {
        Self {
            n_scenes,
            points_per_scene,
            seed,
            archetypes: vec![
                Archetype::plane(1, "ground", 12.0, 0.0, 0.05, 0.35),
                Archetype::blobs(2, "bush", 9.0, 1.0, 0.5, 0.22),
                Archetype::blobs(3, "pole", 4.0, 2.0, 0.4, 0.18),
                Archetype::blobs(4, "crate", 7.0, 3.5, 0.4, 0.15).with_presence(0.8),
                Archetype::blobs(5, "drone", 3.0, 5.0, 0.35, 0.10).with_presence(0.8),
            ],
        }
    }

    pub fn class_table(&self) -> ClassTable {
        let classes = self
            .archetypes
            .iter()
            .map(|a| (a.id, a.name.clone()))
            .collect();
        ClassTable::from_parts("synthetic", classes, BTreeMap::new()).expect("validated archetypes")
    }

    // Negated comparisons reject NaN as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.points_per_scene == 0 {
            return Err(invalid(
                "synthetic config needs at least one scene and one point per scene",
            ));
        }
        if self.archetypes.is_empty() {
            return Err(invalid("synthetic config has no classes"));
        }
        let total: f64 = self.archetypes.iter().map(|a| a.share).sum();
        if (total - 1.0).abs() > 1e-9 || self.archetypes.iter().any(|a| !(a.share > 0.0)) {
            return Err(invalid(format!(
                "class shares must be positive and sum to 1, got {total}"
            )));
        }
        for a in &self.archetypes {
            let ok = match a.shape {
                Shape::Plane {
                    extent, thickness, ..
                } => extent > 0.0 && thickness > 0.0,
                Shape::Blobs { spread, blobs, .. } => spread > 0.0 && blobs > 0,
            };
            if !ok || !(0.0..=1.0).contains(&a.presence) || a.presence == 0.0 {
                return Err(invalid(format!(
                    "class {}: spreads must be > 0 and presence in (0, 1]",
                    a.name
                )));
            }
        }
        ClassTable::from_parts(
            "synthetic",
            self.archetypes
                .iter()
                .map(|a| (a.id, a.name.clone()))
                .collect(),
            BTreeMap::new(),
        )?;
        Ok(())
    }
}

/// Per-scene geometry of one class.
enum Placement {
    Plane {
        extent: f64,
        z: f64,
        noise: Normal<f64>,
    },
    Blobs {
        centres: Vec<[f64; 3]>,
        noise: Normal<f64>,
    },
}

impl Placement {
    fn draw(shape: &Shape, rng: &mut ChaCha8Rng) -> Self {
        match *shape {
            Shape::Plane {
                extent,
                z,
                thickness,
            } => Placement::Plane {
                extent,
                z,
                noise: Normal::new(0.0, thickness).expect("positive"),
            },
            Shape::Blobs {
                radius,
                height,
                spread,
                blobs,
            } => {
                let centres = (0..blobs)
                    .map(|_| {
                        let a = rng.random_range(0.0..TAU);
                        [radius * a.cos(), radius * a.sin(), height]
                    })
                    .collect();
                Placement::Blobs {
                    centres,
                    noise: Normal::new(0.0, spread).expect("positive"),
                }
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let p = match self {
            Placement::Plane { extent, z, noise } => [
                rng.random_range(-extent..=*extent),
                rng.random_range(-extent..=*extent),
                z + noise.sample(rng),
            ],
            Placement::Blobs { centres, noise } => {
                let c = centres.choose(rng).expect("at least one blob");
                [
                    c[0] + noise.sample(rng),
                    c[1] + noise.sample(rng),
                    c[2] + noise.sample(rng),
                ]
            }
        };
        // Stored at scan-file precision so that written datasets reload exactly.
        p.map(|v| v as f32 as f64)
    }
}

/// Generates `n_scenes` clouds. Every configured class occurs at least once
/// across the returned scenes; individual scenes may miss classes.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<LabelledCloud>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_cls = cfg.archetypes.len();
    let mut seen = vec![false; n_cls];
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut last_placements = Vec::new();
    for s in 0..cfg.n_scenes {
        let mut present: Vec<bool> = cfg
            .archetypes
            .iter()
            .map(|a| rng.random_bool(a.presence))
            .collect();
        if !present.contains(&true) {
            present = vec![true; n_cls];
        }
        let placements: Vec<Placement> = cfg
            .archetypes
            .iter()
            .map(|a| Placement::draw(&a.shape, &mut rng))
            .collect();
        let weights: Vec<f64> = cfg
            .archetypes
            .iter()
            .zip(&present)
            .map(|(a, &p)| if p { a.share } else { 0.0 })
            .collect();
        let pick = WeightedIndex::new(&weights).expect("at least one positive weight");
        let mut coords = Vec::with_capacity(cfg.points_per_scene);
        let mut labels = Vec::with_capacity(cfg.points_per_scene);
        for _ in 0..cfg.points_per_scene {
            let c = pick.sample(&mut rng);
            seen[c] = true;
            coords.push(placements[c].sample(&mut rng));
            labels.push(cfg.archetypes[c].id);
        }
        scenes.push(LabelledCloud::new(
            format!("synthetic-train-{s:05}"),
            coords,
            labels,
        )?);
        last_placements = placements;
    }
    // Classes never drawn take over random points of the last scene.
    let missing: Vec<usize> = (0..n_cls).filter(|&c| !seen[c]).collect();
    if missing.len() > cfg.points_per_scene {
        return Err(invalid(
            "fewer points per scene than classes that must appear",
        ));
    }
    if !missing.is_empty() {
        let last = scenes.last_mut().expect("n_scenes >= 1");
        let slots = rand::seq::index::sample(&mut rng, last.len(), missing.len());
        for (slot, c) in slots.into_iter().zip(missing) {
            last.coords[slot] = last_placements[c].sample(&mut rng);
            last.labels[slot] = cfg.archetypes[c].id;
        }
    }
    Ok(scenes)
}
