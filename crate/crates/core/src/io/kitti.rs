//! SemanticKITTI scan/label pairs.
//!
//! A `.bin` scan is a sequence of little-endian `f32` records `x y z
//! remission`; the matching `.label` file holds one little-endian `u32` per
//! point whose lower 16 bits are the semantic label (the upper 16 bits carry
//! the instance id and are dropped here).

use std::fs;
use std::path::Path;

use super::LabelledCloud;
use crate::error::{Error, Result};

const RECORD_BYTES: usize = 16;

pub fn read_kitti_scan(bin_path: &Path, label_path: &Path) -> Result<LabelledCloud> {
    let bin = fs::read(bin_path)?;
    let lab = fs::read(label_path)?;
    let fmt = |path: &Path, detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    if bin.is_empty() {
        return Err(fmt(bin_path, "empty scan".into()));
    }
    if bin.len() % RECORD_BYTES != 0 {
        return Err(fmt(
            bin_path,
            format!(
                "{} bytes is not a whole number of 16-byte records",
                bin.len()
            ),
        ));
    }
    if lab.len() % 4 != 0 {
        return Err(fmt(
            label_path,
            format!("{} bytes is not a whole number of u32 labels", lab.len()),
        ));
    }
    let n = bin.len() / RECORD_BYTES;
    if lab.len() / 4 != n {
        return Err(fmt(
            label_path,
            format!("{} labels for {n} points", lab.len() / 4),
        ));
    }
    let coords = bin
        .chunks_exact(RECORD_BYTES)
        .map(|rec| {
            let f = |i: usize| {
                f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as f64
            };
            [f(0), f(1), f(2)]
        })
        .collect();
    let labels = lab
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) & 0xFFFF)
        .collect();
    let scene_id = bin_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabelledCloud::new(scene_id, coords, labels)
}

/// Writes coordinates as `f32` with zero remission, labels as `u32`.
pub fn write_kitti_scan(cloud: &LabelledCloud, bin_path: &Path, label_path: &Path) -> Result<()> {
    let mut bin = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.coords {
        for v in p {
            bin.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        bin.extend_from_slice(&0f32.to_le_bytes());
    }
    let lab: Vec<u8> = cloud.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(bin_path, bin)?;
    fs::write(label_path, lab)?;
    Ok(())
}

/// Reads every `velodyne/*.bin` scan of one sequence directory in file-name
/// order, pairing each with `labels/<stem>.label`.
pub fn read_scan_dir(seq_dir: &Path, seq_name: &str) -> Result<Vec<LabelledCloud>> {
    let mut bins: Vec<_> = fs::read_dir(seq_dir.join("velodyne"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    bins.sort();
    bins.iter()
        .map(|bin| {
            let stem = bin
                .file_stem()
                .expect("has extension")
                .to_string_lossy()
                .into_owned();
            let label = seq_dir.join("labels").join(format!("{stem}.label"));
            let mut cloud = read_kitti_scan(bin, &label)?;
            cloud.scene_id = format!("{seq_name}/{stem}");
            Ok(cloud)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (bin, lab) = (dir.path().join("a.bin"), dir.path().join("a.label"));
        let rec: Vec<u8> = [1.0f32, 2.0, 3.0, 0.5]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(&bin, rec).unwrap();
        fs::write(&lab, 0x0001_0009u32.to_le_bytes()).unwrap();
        let cloud = read_kitti_scan(&bin, &lab).unwrap();
        assert_eq!(cloud.coords, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(cloud.labels, vec![9]);
    }

    #[test]
    fn empty_and_truncated_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (bin, lab) = (dir.path().join("a.bin"), dir.path().join("a.label"));
        fs::write(&bin, []).unwrap();
        fs::write(&lab, []).unwrap();
        assert!(read_kitti_scan(&bin, &lab).is_err());

        fs::write(&bin, [0u8; 20]).unwrap();
        fs::write(&lab, [0u8; 4]).unwrap();
        assert!(read_kitti_scan(&bin, &lab).is_err());

        fs::write(&bin, [0u8; 32]).unwrap();
        fs::write(&lab, [0u8; 4]).unwrap();
        assert!(matches!(
            read_kitti_scan(&bin, &lab),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn writer_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (bin, lab) = (dir.path().join("s.bin"), dir.path().join("s.label"));
        let coords = vec![
            [0.1f32 as f64, -2.5, 1e3],
            [3.25, 0.0, -0.0],
            [7.0, 8.5, -9.75],
        ];
        let cloud = LabelledCloud::new("s", coords, vec![40, 0, 65535]).unwrap();
        write_kitti_scan(&cloud, &bin, &lab).unwrap();
        let first = fs::read(&bin).unwrap();
        let back = read_kitti_scan(&bin, &lab).unwrap();
        assert_eq!(back.labels, cloud.labels);
        for (a, b) in back.coords.iter().zip(&cloud.coords) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        write_kitti_scan(&back, &bin, &lab).unwrap();
        assert_eq!(fs::read(&bin).unwrap(), first);
    }
}
