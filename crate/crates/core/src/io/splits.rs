use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{ClassTable, SyntheticConfig};
use crate::config::{parse_kv, write_kv};
use crate::error::{Error, Result};

/// Partition of a dataset's evaluated classes into labelled base classes and
/// unlabelled novel classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub dataset: String,
    pub name: String,
    pub base: BTreeSet<u32>,
    pub novel: BTreeSet<u32>,
}

impl SplitSpec {
    /// Builds a split from novel class names; every other class is base.
    pub fn from_novel_names(classes: &ClassTable, name: &str, novel: &[&str]) -> Result<Self> {
        let novel = novel
            .iter()
            .map(|n| classes.id_of(n))
            .collect::<Result<BTreeSet<_>>>()?;
        Self::from_novel_ids(classes, name, novel)
    }

    pub fn from_novel_ids(classes: &ClassTable, name: &str, novel: BTreeSet<u32>) -> Result<Self> {
        if novel.is_empty() {
            return Err(Error::Config(format!("split {name} has no novel classes")));
        }
        if let Some(bad) = novel.iter().find(|&&c| !classes.contains(c)) {
            return Err(Error::Config(format!(
                "split {name}: class {bad} not in {}",
                classes.dataset()
            )));
        }
        let base: BTreeSet<u32> = classes
            .ids()
            .into_iter()
            .filter(|c| !novel.contains(c))
            .collect();
        if base.is_empty() {
            return Err(Error::Config(format!(
                "split {name} leaves no base classes"
            )));
        }
        Ok(Self {
            dataset: classes.dataset().to_string(),
            name: name.to_string(),
            base,
            novel,
        })
    }

    pub fn n_base(&self) -> usize {
        self.base.len()
    }

    pub fn n_novel(&self) -> usize {
        self.novel.len()
    }

    pub fn base_ids(&self) -> Vec<u32> {
        self.base.iter().copied().collect()
    }

    pub fn novel_ids(&self) -> Vec<u32> {
        self.novel.iter().copied().collect()
    }

    pub fn all_ids(&self) -> Vec<u32> {
        self.base.union(&self.novel).copied().collect()
    }

    /// Position of a base class in the base head output.
    pub fn base_index(&self, class: u32) -> Option<usize> {
        self.base.iter().position(|&c| c == class)
    }

    pub fn is_novel(&self, class: u32) -> bool {
        self.novel.contains(&class)
    }
}

/// Splits shipped with the crate. The two real datasets carry the four
/// published splits each; `synthetic` splits refer to the default toy
/// configuration.
pub fn builtin_splits(dataset: &str) -> Result<Vec<SplitSpec>> {
    let table: &[(&str, &[&str])] = match dataset {
        "semantickitti" => &[
            (
                "KITTI-5^0",
                &["building", "road", "sidewalk", "terrain", "vegetation"],
            ),
            (
                "KITTI-5^1",
                &["car", "fence", "other-ground", "parking", "trunk"],
            ),
            (
                "KITTI-5^2",
                &[
                    "motorcycle",
                    "other-vehicle",
                    "pole",
                    "traffic-sign",
                    "truck",
                ],
            ),
            (
                "KITTI-4^3",
                &["bicycle", "bicyclist", "motorcyclist", "person"],
            ),
        ],
        "semanticposs" => &[
            ("POSS-4^0", &["building", "car", "ground", "plants"]),
            ("POSS-3^1", &["bike", "fence", "person"]),
            ("POSS-3^2", &["pole", "traffic-sign", "trunk"]),
            ("POSS-3^3", &["cone-stone", "rider", "trashcan"]),
        ],
        "synthetic" => return synthetic_splits(&SyntheticConfig::toy(1, 1, 0).class_table()),
        other => return Err(Error::UnknownDataset(other.to_string())),
    };
    let classes = ClassTable::builtin(dataset)?;
    table
        .iter()
        .map(|(name, novel)| SplitSpec::from_novel_names(&classes, name, novel))
        .collect()
}

/// Splits over an arbitrary synthetic class table: the last two classes, and
/// the two classes after the first.
pub fn synthetic_splits(classes: &ClassTable) -> Result<Vec<SplitSpec>> {
    let ids = classes.ids();
    if ids.len() < 3 {
        return Err(Error::Config(
            "synthetic splits need at least 3 classes".into(),
        ));
    }
    let last_two: BTreeSet<u32> = ids[ids.len() - 2..].iter().copied().collect();
    let middle: BTreeSet<u32> = ids[1..3].iter().copied().collect();
    Ok(vec![
        SplitSpec::from_novel_ids(classes, "SYN-2^0", last_two)?,
        SplitSpec::from_novel_ids(classes, "SYN-2^1", middle)?,
    ])
}

/// Finds a split by name among the builtins of the dataset, or for synthetic
/// tables, among [`synthetic_splits`] of that table.
pub fn find_split(classes: &ClassTable, name: &str) -> Result<SplitSpec> {
    let candidates = match classes.dataset() {
        "semantickitti" | "semanticposs" => builtin_splits(classes.dataset())?,
        _ => synthetic_splits(classes)?,
    };
    candidates
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownSplit(name.to_string()))
}

/// Reads the plain-text split format:
///
/// ```text
/// dataset=semanticposs
/// split_name=POSS-3^3
/// novel=cone-stone,rider,trashcan
/// ```
pub fn read_split_file(path: &Path, classes: &ClassTable) -> Result<SplitSpec> {
    let kv = parse_kv(&fs::read_to_string(path)?)?;
    let get = |k: &str| {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: format!("missing `{k}`"),
            })
    };
    let dataset = get("dataset")?;
    if dataset != classes.dataset() {
        return Err(Error::Config(format!(
            "split is for `{dataset}`, dataset is `{}`",
            classes.dataset()
        )));
    }
    let novel: Vec<&str> = get("novel")?
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    SplitSpec::from_novel_names(classes, get("split_name")?, &novel)
}

pub fn write_split_file(path: &Path, split: &SplitSpec, classes: &ClassTable) -> Result<()> {
    let novel = split
        .novel
        .iter()
        .map(|&c| {
            classes
                .name(c)
                .map(str::to_string)
                .ok_or(Error::UnknownClass(c.to_string()))
        })
        .collect::<Result<Vec<_>>>()?
        .join(",");
    let kv = vec![
        ("dataset".to_string(), split.dataset.clone()),
        ("split_name".to_string(), split.name.clone()),
        ("novel".to_string(), novel),
    ];
    fs::write(path, write_kv(&kv))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(classes: &ClassTable, ids: &BTreeSet<u32>) -> BTreeSet<String> {
        ids.iter()
            .map(|&c| classes.name(c).unwrap().to_string())
            .collect()
    }

    #[test]
    fn published_novel_sets() {
        let kitti = ClassTable::builtin("semantickitti").unwrap();
        let split = find_split(&kitti, "KITTI-4^3").unwrap();
        let expected: BTreeSet<String> = ["bicycle", "bicyclist", "motorcyclist", "person"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(names(&kitti, &split.novel), expected);

        let poss = ClassTable::builtin("semanticposs").unwrap();
        let split = find_split(&poss, "POSS-3^3").unwrap();
        let expected: BTreeSet<String> = ["cone-stone", "rider", "trashcan"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(names(&poss, &split.novel), expected);
    }

    #[test]
    fn every_builtin_split_partitions_the_classes() {
        for ds in ["semantickitti", "semanticposs", "synthetic"] {
            let splits = builtin_splits(ds).unwrap();
            assert!(!splits.is_empty());
            for s in splits {
                assert!(s.base.is_disjoint(&s.novel), "{}", s.name);
                let all: BTreeSet<u32> = s.base.union(&s.novel).copied().collect();
                let expected: BTreeSet<u32> = match ds {
                    "synthetic" => SyntheticConfig::toy(1, 1, 0)
                        .class_table()
                        .ids()
                        .into_iter()
                        .collect(),
                    _ => ClassTable::builtin(ds).unwrap().ids().into_iter().collect(),
                };
                assert_eq!(all, expected);
                assert!(s.n_novel() > 0);
            }
        }
        assert!(builtin_splits("waymo").is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let poss = ClassTable::builtin("semanticposs").unwrap();
        let split = find_split(&poss, "POSS-3^1").unwrap();
        let path = dir.path().join("split.txt");
        write_split_file(&path, &split, &poss).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("novel=bike,fence,person"), "{text}");
        assert_eq!(read_split_file(&path, &poss).unwrap(), split);
    }
}
