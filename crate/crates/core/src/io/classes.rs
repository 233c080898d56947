use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Class id reserved for unlabelled points; excluded from training and metrics.
pub const IGNORE_LABEL: u32 = 0;

const KITTI_TABLE: &str = include_str!("../../data/semantickitti.classes");
const POSS_TABLE: &str = include_str!("../../data/semanticposs.classes");

/// Evaluated classes of a dataset plus the raw-label learning map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTable {
    dataset: String,
    classes: Vec<(u32, String)>,
    /// Raw label → class id. Empty means identity for known ids.
    raw_map: BTreeMap<u32, u32>,
}

impl ClassTable {
    pub fn builtin(dataset: &str) -> Result<Self> {
        let text = match dataset {
            "semantickitti" => KITTI_TABLE,
            "semanticposs" => POSS_TABLE,
            other => return Err(Error::UnknownDataset(other.to_string())),
        };
        Self::parse(dataset, text)
    }

    fn parse(dataset: &str, text: &str) -> Result<Self> {
        let mut classes = Vec::new();
        let mut raw_map = BTreeMap::new();
        let bad = |line: &str| Error::Format {
            path: format!("{dataset} class table"),
            detail: format!("bad line `{line}`"),
        };
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["class", id, name] => {
                    classes.push((id.parse().map_err(|_| bad(line))?, name.to_string()))
                }
                ["map", raw, id] => {
                    raw_map.insert(
                        raw.parse().map_err(|_| bad(line))?,
                        id.parse().map_err(|_| bad(line))?,
                    );
                }
                _ => return Err(bad(line)),
            }
        }
        Self::from_parts(dataset, classes, raw_map)
    }

    /// Parses `id:name,id:name,...`.
    pub fn parse_inline(dataset: &str, spec: &str) -> Result<Self> {
        let mut classes = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (id, name) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("class entry `{item}` is not id:name")))?;
            let id = id
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad class id in `{item}`")))?;
            classes.push((id, name.trim().to_string()));
        }
        Self::from_parts(dataset, classes, BTreeMap::new())
    }

    pub fn from_parts(
        dataset: &str,
        mut classes: Vec<(u32, String)>,
        raw_map: BTreeMap<u32, u32>,
    ) -> Result<Self> {
        classes.sort_by_key(|c| c.0);
        if classes.is_empty() {
            return Err(Error::Config(format!("{dataset}: no classes")));
        }
        if classes
            .windows(2)
            .any(|w| w[0].0 == w[1].0 || w[0].1 == w[1].1)
            || classes.iter().any(|c| c.0 == IGNORE_LABEL)
        {
            return Err(Error::Config(format!(
                "{dataset}: class ids/names must be unique and non-zero"
            )));
        }
        Ok(Self {
            dataset: dataset.to_string(),
            classes,
            raw_map,
        })
    }

    pub fn dataset(&self) -> &str {
        &self.dataset
    }

    pub fn classes(&self) -> &[(u32, String)] {
        &self.classes
    }

    pub fn ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.0).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.classes.iter().any(|c| c.0 == id)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.classes
            .iter()
            .find(|c| c.0 == id)
            .map(|c| c.1.as_str())
    }

    pub fn id_of(&self, name: &str) -> Result<u32> {
        self.classes
            .iter()
            .find(|c| c.1 == name)
            .map(|c| c.0)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// Maps a raw scan label (lower 16 bits already extracted) to a class id.
    pub fn map_raw(&self, raw: u32) -> u32 {
        if self.raw_map.is_empty() {
            if self.contains(raw) {
                raw
            } else {
                IGNORE_LABEL
            }
        } else {
            self.raw_map.get(&raw).copied().unwrap_or(IGNORE_LABEL)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_tables_have_expected_sizes() {
        let kitti = ClassTable::builtin("semantickitti").unwrap();
        assert_eq!(kitti.len(), 19);
        assert_eq!(kitti.map_raw(252), kitti.id_of("car").unwrap());
        assert_eq!(kitti.map_raw(52), IGNORE_LABEL);
        assert_eq!(kitti.map_raw(12345), IGNORE_LABEL);
        let poss = ClassTable::builtin("semanticposs").unwrap();
        assert_eq!(poss.len(), 13);
        assert_eq!(poss.map_raw(5), poss.id_of("person").unwrap());
        assert!(ClassTable::builtin("nuscenes").is_err());
    }

    #[test]
    fn every_mapped_id_is_a_class_or_ignore() {
        for name in ["semantickitti", "semanticposs"] {
            let t = ClassTable::builtin(name).unwrap();
            for raw in 0..300 {
                let id = t.map_raw(raw);
                assert!(id == IGNORE_LABEL || t.contains(id));
            }
        }
    }
}
