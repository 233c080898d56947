//! Segmentation metrics: confusion counts, IoU, novel-output matching and
//! the per-class report.

mod confusion;
mod hungarian;

use std::fmt::Write as _;

pub use confusion::{confusion, miou, ConfusionMatrix};
pub use hungarian::hungarian_min;

use crate::autodiff::ParamStore;
use crate::error::{invalid, Error, Result};
use crate::io::{ClassTable, LabelledCloud, SplitSpec, IGNORE_LABEL};
use crate::model::Model;

/// Index into the concatenated `[base | novel head]` output of every point.
pub fn predict_outputs(
    model: &Model,
    params: &ParamStore,
    head: usize,
    coords: &[[f64; 3]],
) -> Result<Vec<usize>> {
    let mut pass = model.pass(coords)?;
    let base = pass.base_logits(params)?;
    let novel = pass.novel_logits(params, head)?;
    Ok((0..base.rows())
        .map(|i| {
            let scores = base.row_slice(i).iter().chain(novel.row_slice(i));
            scores
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                )
                .0
        })
        .collect())
}

/// Maps each novel output to a novel class, maximizing summed IoU.
///
/// `block[i][j]` counts points of novel class `i` predicted as novel output
/// `j`; IoUs are computed within the block. Returns `class_of[j] = i`.
pub fn match_novel(block: &[Vec<u64>]) -> Result<Vec<usize>> {
    let n = block.len();
    if block.iter().any(|r| r.len() != n) {
        return Err(invalid("novel block must be square"));
    }
    let row: Vec<u64> = block.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..n).map(|j| block.iter().map(|r| r[j]).sum()).collect();
    // Rows of the cost matrix are outputs, columns are classes.
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| {
                    let tp = block[i][j];
                    let denom = row[i] + col[j] - tp;
                    if denom == 0 {
                        0.0
                    } else {
                        -(tp as f64) / denom as f64
                    }
                })
                .collect()
        })
        .collect();
    hungarian_min(&cost)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRow {
    pub id: u32,
    pub name: String,
    pub novel: bool,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ClassRow>,
    pub novel_miou: f64,
    pub base_miou: f64,
    pub all_miou: f64,
    /// Class id assigned to each novel output.
    pub novel_mapping: Vec<u32>,
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.6}"),
        _ => "nan".to_string(),
    }
}

impl Report {
    /// Long form: one row per class, then the three aggregate rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "# novel outputs aligned to classes by Hungarian matching on validation IoU\n",
        );
        s.push_str("class\tid\tgroup\tiou\n");
        for r in &self.rows {
            let group = if r.novel { "novel" } else { "base" };
            let _ = writeln!(s, "{}\t{}\t{group}\t{}", r.name, r.id, fmt_metric(r.iou));
        }
        for (name, v) in [
            ("novel_mIoU", self.novel_miou),
            ("base_mIoU", self.base_miou),
            ("all_mIoU", self.all_miou),
        ] {
            let _ = writeln!(s, "{name}\t-\taggregate\t{}", fmt_metric(Some(v)));
        }
        s
    }

    /// Header of the wide layout; novel classes carry a `*`.
    pub fn wide_header(&self) -> String {
        let mut cols = vec!["method".to_string()];
        cols.extend(self.rows.iter().map(|r| {
            if r.novel {
                format!("{}*", r.name)
            } else {
                r.name.clone()
            }
        }));
        cols.extend(["novel_mIoU", "base_mIoU", "all_mIoU"].map(String::from));
        cols.join("\t")
    }

    /// One wide row, IoUs in percent.
    pub fn wide_row(&self, method: &str) -> String {
        let pct = |v: Option<f64>| match v {
            Some(v) if v.is_finite() => format!("{:.2}", 100.0 * v),
            _ => "nan".to_string(),
        };
        let mut cols = vec![method.to_string()];
        cols.extend(self.rows.iter().map(|r| pct(r.iou)));
        cols.extend([self.novel_miou, self.base_miou, self.all_miou].map(|v| pct(Some(v))));
        cols.join("\t")
    }
}

/// Builds the report from raw concatenated outputs (see [`predict_outputs`])
/// and ground truth of the same scenes.
pub fn evaluate_outputs(
    outputs: &[Vec<usize>],
    labels: &[&[u32]],
    split: &SplitSpec,
    classes: &ClassTable,
) -> Result<Report> {
    if outputs.len() != labels.len() {
        return Err(invalid("one output vector per scene required"));
    }
    let base_ids = split.base_ids();
    let novel_ids = split.novel_ids();
    let (nb, nn) = (base_ids.len(), novel_ids.len());
    let mut block = vec![vec![0u64; nn]; nn];
    for (out, lab) in outputs.iter().zip(labels) {
        if out.len() != lab.len() {
            return Err(invalid("outputs and labels differ in length"));
        }
        for (&o, &g) in out.iter().zip(lab.iter()) {
            if o >= nb + nn {
                return Err(invalid(format!("output index {o} out of range")));
            }
            if let (Some(i), true) = (novel_ids.iter().position(|&c| c == g), o >= nb) {
                block[i][o - nb] += 1;
            }
        }
    }
    let class_of = match_novel(&block)?;
    let novel_mapping: Vec<u32> = class_of.iter().map(|&i| novel_ids[i]).collect();
    let to_class = |o: usize| {
        if o < nb {
            base_ids[o]
        } else {
            novel_mapping[o - nb]
        }
    };

    let all = split.all_ids();
    let mut cm = ConfusionMatrix::new(&all);
    for (out, lab) in outputs.iter().zip(labels) {
        for (&o, &g) in out.iter().zip(lab.iter()) {
            if g != IGNORE_LABEL && !split.base.contains(&g) && !split.novel.contains(&g) {
                return Err(Error::LabelOutOfRange(g));
            }
            cm.add(to_class(o), g)?;
        }
    }
    let rows = all
        .iter()
        .map(|&id| ClassRow {
            id,
            name: classes.name(id).unwrap_or("?").to_string(),
            novel: split.is_novel(id),
            iou: cm.iou(id),
        })
        .collect();
    Ok(Report {
        rows,
        novel_miou: miou(&cm, &novel_ids),
        base_miou: miou(&cm, &base_ids),
        all_miou: miou(&cm, &all),
        novel_mapping,
    })
}

/// Predicts every scene with novel head `head` and reports IoUs, matching
/// novel outputs to classes once over all scenes.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    head: usize,
    scenes: &[LabelledCloud],
    split: &SplitSpec,
    classes: &ClassTable,
) -> Result<Report> {
    let outputs = scenes
        .iter()
        .map(|s| predict_outputs(model, params, head, &s.coords))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&[u32]> = scenes.iter().map(|s| s.labels.as_slice()).collect();
    evaluate_outputs(&outputs, &labels, split, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{find_split, SyntheticConfig};
    use proptest::prelude::*;

    fn toy() -> (ClassTable, SplitSpec) {
        let classes = SyntheticConfig::toy(1, 1, 0).class_table();
        let split = find_split(&classes, "SYN-2^0").unwrap();
        (classes, split)
    }

    /// Output index a perfect model would emit for `class`, with novel
    /// outputs permuted by `perm`.
    fn oracle_output(split: &SplitSpec, class: u32, perm: &[usize]) -> usize {
        match split.base_index(class) {
            Some(i) => i,
            None => {
                split.n_base() + perm[split.novel_ids().iter().position(|&c| c == class).unwrap()]
            }
        }
    }

    #[test]
    fn diagonal_and_antidiagonal_blocks() {
        assert_eq!(match_novel(&[vec![9, 1], vec![2, 8]]).unwrap(), vec![0, 1]);
        assert_eq!(match_novel(&[vec![1, 9], vec![8, 2]]).unwrap(), vec![1, 0]);
        assert_eq!(
            match_novel(&[vec![0, 0, 7], vec![5, 0, 0], vec![0, 6, 0]]).unwrap(),
            vec![1, 2, 0]
        );
    }

    #[test]
    fn copying_ground_truth_scores_one_under_any_output_permutation() {
        let (classes, split) = toy();
        let labels: Vec<u32> = vec![1, 2, 3, 4, 5, 5, 4, 0, 1];
        for perm in [[0, 1], [1, 0]] {
            let out: Vec<usize> = labels
                .iter()
                .map(|&c| {
                    if c == 0 {
                        0
                    } else {
                        oracle_output(&split, c, &perm)
                    }
                })
                .collect();
            let r = evaluate_outputs(&[out], &[&labels], &split, &classes).unwrap();
            assert_eq!((r.novel_miou, r.base_miou, r.all_miou), (1.0, 1.0, 1.0));
            assert_eq!(
                r.novel_mapping,
                if perm == [0, 1] {
                    vec![4, 5]
                } else {
                    vec![5, 4]
                }
            );
        }
    }

    #[test]
    fn constant_predictor_matches_closed_form() {
        let (classes, split) = toy();
        let labels: Vec<u32> = vec![1, 1, 1, 2, 2, 3, 4, 4, 5, 0];
        let out = vec![1usize; labels.len()]; // base output 1 = class 2
        let r = evaluate_outputs(&[out], &[&labels], &split, &classes).unwrap();
        let n_eval = 9.0;
        for row in &r.rows {
            let want = if row.id == 2 {
                Some(2.0 / n_eval)
            } else {
                Some(0.0)
            };
            assert_eq!(row.iou, want, "class {}", row.id);
        }
        assert!((r.all_miou - (2.0 / n_eval) / 5.0).abs() < 1e-15);
    }

    #[test]
    fn report_schema() {
        let (classes, split) = toy();
        let labels: Vec<u32> = vec![1, 2, 3, 4, 5];
        let out = vec![0usize, 1, 2, 3, 4];
        let r = evaluate_outputs(&[out], &[&labels], &split, &classes).unwrap();
        let tsv = r.to_tsv();
        let body: Vec<&str> = tsv
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .collect();
        assert_eq!(body.len(), classes.len() + 3);
        assert!(body.iter().all(|l| l.split('\t').count() == 4));
        assert_eq!(
            r.wide_header().split('\t').count(),
            r.wide_row("x").split('\t').count()
        );
        assert!(r.wide_header().contains("drone*"));
    }

    #[test]
    fn out_of_split_labels_are_errors() {
        let (classes, split) = toy();
        let labels: Vec<u32> = vec![9];
        assert!(evaluate_outputs(&[vec![0]], &[&labels], &split, &classes).is_err());
    }

    proptest! {
        #[test]
        fn miou_is_invariant_to_novel_output_relabelling(
            labels in prop::collection::vec(0u32..=5, 1..80),
            noise in prop::collection::vec(0usize..5, 80),
            swap in any::<bool>(),
        ) {
            let (classes, split) = toy();
            let base: Vec<usize> = labels.iter().zip(&noise).map(|(&c, &n)| if c == 0 { n } else if n == 0 { (oracle_output(&split, c, &[0, 1]) + 1) % 5 } else { oracle_output(&split, c, &[0, 1]) }).collect();
            let relabel = |o: usize| if swap && o >= 3 { 3 + (4 - o) } else { o };
            let permuted: Vec<usize> = base.iter().map(|&o| relabel(o)).collect();
            // With tied matchings either choice is optimal and the property
            // only holds up to that choice; require a unique optimum.
            let mut block = vec![vec![0u64; 2]; 2];
            for (&c, &o) in labels.iter().zip(&base) {
                if c >= 4 && o >= 3 {
                    block[c as usize - 4][o - 3] += 1;
                }
            }
            let iou = |i: usize, j: usize| {
                let d = block[i].iter().sum::<u64>() + block[0][j] + block[1][j] - block[i][j];
                if d == 0 { 0.0 } else { block[i][j] as f64 / d as f64 }
            };
            prop_assume!(iou(0, 0) + iou(1, 1) != iou(0, 1) + iou(1, 0));
            let a = evaluate_outputs(&[base], &[&labels], &split, &classes).unwrap();
            let b = evaluate_outputs(&[permuted], &[&labels], &split, &classes).unwrap();
            prop_assert_eq!(a.novel_miou.to_bits(), b.novel_miou.to_bits());
            prop_assert_eq!(a.all_miou.to_bits(), b.all_miou.to_bits());
            let ious: Vec<f64> = a.rows.iter().filter_map(|r| r.iou).collect();
            if !ious.is_empty() {
                prop_assert!((a.all_miou - ious.iter().sum::<f64>() / ious.len() as f64).abs() < 1e-15);
            }
        }
    }
}
