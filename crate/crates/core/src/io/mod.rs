//! Point cloud data: scenes, class tables, scan files, splits and the
//! synthetic scene generator.

mod classes;
mod kitti;
mod splits;
mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

pub use classes::{ClassTable, IGNORE_LABEL};
pub use kitti::{read_kitti_scan, read_scan_dir, write_kitti_scan};
pub use splits::{builtin_splits, find_split, read_split_file, write_split_file, SplitSpec};
pub use synthetic::{generate_synthetic, Archetype, Shape, SyntheticConfig};

use crate::config::{parse_kv, write_kv};
use crate::error::{Error, Result};

/// One scene: point coordinates in meters and one class id per point.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledCloud {
    pub scene_id: String,
    pub coords: Vec<[f64; 3]>,
    pub labels: Vec<u32>,
}

impl LabelledCloud {
    pub fn new(
        scene_id: impl Into<String>,
        coords: Vec<[f64; 3]>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let scene_id = scene_id.into();
        if coords.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "scene {scene_id} has no points"
            )));
        }
        if coords.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "scene {scene_id}: {} points but {} labels",
                coords.len(),
                labels.len()
            )));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scene {scene_id} has non-finite coordinates"
            )));
        }
        Ok(Self {
            scene_id,
            coords,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Training and validation scenes of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: ClassTable,
    pub train: Vec<LabelledCloud>,
    pub val: Vec<LabelledCloud>,
}

impl Dataset {
    /// Synthetic dataset; validation scenes come from an independent stream.
    pub fn synthetic(cfg: &SyntheticConfig, val_scenes: usize) -> Result<Self> {
        let train = generate_synthetic(cfg)?;
        let val_cfg = SyntheticConfig {
            n_scenes: val_scenes.max(1),
            seed: cfg.seed ^ 0x5ee_d0f7_a11d,
            ..cfg.clone()
        };
        let mut val = generate_synthetic(&val_cfg)?;
        for s in &mut val {
            s.scene_id = s.scene_id.replacen("train", "val", 1);
        }
        Ok(Self {
            classes: cfg.class_table(),
            train,
            val,
        })
    }

    /// Classes that occur in the validation scenes.
    pub fn val_classes_present(&self) -> BTreeSet<u32> {
        self.val
            .iter()
            .flat_map(|s| s.labels.iter().copied())
            .collect()
    }
}

const META_FILE: &str = "dataset.meta";
const TRAIN_SEQ: &str = "00";
const VAL_SEQ: &str = "01";

/// Writes a dataset as `sequences/<seq>/{velodyne,labels}` scan pairs plus a
/// `dataset.meta` file describing the class table.
pub fn write_dataset_dir(root: &Path, ds: &Dataset) -> Result<()> {
    for (seq, scenes) in [(TRAIN_SEQ, &ds.train), (VAL_SEQ, &ds.val)] {
        let base = root.join("sequences").join(seq);
        fs::create_dir_all(base.join("velodyne"))?;
        fs::create_dir_all(base.join("labels"))?;
        for (i, scene) in scenes.iter().enumerate() {
            let stem = format!("{i:06}");
            write_kitti_scan(
                scene,
                &base.join("velodyne").join(format!("{stem}.bin")),
                &base.join("labels").join(format!("{stem}.label")),
            )?;
        }
    }
    let classes = ds
        .classes
        .classes()
        .iter()
        .map(|(id, name)| format!("{id}:{name}"))
        .collect::<Vec<_>>()
        .join(",");
    let meta = vec![
        ("dataset".to_string(), ds.classes.dataset().to_string()),
        ("classes".to_string(), classes),
        ("train".to_string(), TRAIN_SEQ.to_string()),
        ("val".to_string(), VAL_SEQ.to_string()),
    ];
    fs::write(root.join(META_FILE), write_kv(&meta))?;
    Ok(())
}

/// Loads a dataset directory.
///
/// A `dataset.meta` file, when present, names the dataset, its classes and
/// the train/val sequences. Without it the directory is read as
/// `fallback_dataset` (`semantickitti` or `semanticposs`) with the official
/// validation sequence held out.
pub fn load_dataset_dir(root: &Path, fallback_dataset: Option<&str>) -> Result<Dataset> {
    let meta_path = root.join(META_FILE);
    let (classes, train_seqs, val_seqs) = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path)?;
        let kv = parse_kv(&text)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Format {
                    path: meta_path.display().to_string(),
                    detail: format!("missing `{k}`"),
                })
        };
        let dataset = get("dataset")?;
        let classes = match dataset.as_str() {
            "semantickitti" | "semanticposs" => ClassTable::builtin(&dataset)?,
            _ => ClassTable::parse_inline(&dataset, &get("classes")?)?,
        };
        let split = |s: String| {
            s.split(',')
                .map(|x| x.trim().to_string())
                .filter(|x| !x.is_empty())
                .collect::<Vec<_>>()
        };
        (classes, split(get("train")?), split(get("val")?))
    } else {
        let name = fallback_dataset.ok_or_else(|| Error::Format {
            path: meta_path.display().to_string(),
            detail: "no dataset.meta and no dataset name given".into(),
        })?;
        let classes = ClassTable::builtin(name)?;
        let (train, val) = official_sequences(name)?;
        (classes, train, val)
    };
    let load = |seqs: &[String]| -> Result<Vec<LabelledCloud>> {
        let mut out = Vec::new();
        for seq in seqs {
            let dir = root.join("sequences").join(seq);
            if !dir.exists() {
                continue;
            }
            for mut scene in read_scan_dir(&dir, seq)? {
                scene.labels = scene
                    .labels
                    .iter()
                    .map(|&raw| classes.map_raw(raw))
                    .collect();
                out.push(scene);
            }
        }
        Ok(out)
    };
    let train = load(&train_seqs)?;
    let val = load(&val_seqs)?;
    if train.is_empty() {
        return Err(Error::Format {
            path: root.display().to_string(),
            detail: "no training scans found".into(),
        });
    }
    Ok(Dataset {
        classes,
        train,
        val,
    })
}

fn official_sequences(name: &str) -> Result<(Vec<String>, Vec<String>)> {
    let seqs = |r: std::ops::RangeInclusive<u32>, held: u32| {
        let train = r
            .clone()
            .filter(|&s| s != held)
            .map(|s| format!("{s:02}"))
            .collect();
        (train, vec![format!("{held:02}")])
    };
    match name {
        "semantickitti" => Ok(seqs(0..=10, 8)),
        "semanticposs" => Ok(seqs(0..=5, 3)),
        other => Err(Error::UnknownDataset(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_ragged_clouds() {
        assert!(LabelledCloud::new("s", vec![], vec![]).is_err());
        assert!(LabelledCloud::new("s", vec![[0.0; 3]], vec![]).is_err());
        assert!(LabelledCloud::new("s", vec![[f64::NAN, 0.0, 0.0]], vec![1]).is_err());
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::toy(3, 40, 5);
        let ds = Dataset::synthetic(&cfg, 2).unwrap();
        write_dataset_dir(dir.path(), &ds).unwrap();
        let back = load_dataset_dir(dir.path(), None).unwrap();
        assert_eq!(back.classes, ds.classes);
        assert_eq!(back.train.len(), 3);
        assert_eq!(back.val.len(), 2);
        for (a, b) in back.train.iter().zip(&ds.train) {
            assert_eq!(a.labels, b.labels);
            for (p, q) in a.coords.iter().zip(&b.coords) {
                for k in 0..3 {
                    assert_eq!(p[k], q[k] as f32 as f64);
                }
            }
        }
    }
}
