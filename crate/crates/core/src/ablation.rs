//! Component ablations and the percentile sweep.

use std::fmt::Write as _;

use log::info;

use crate::error::{invalid, Result};
use crate::io::{Dataset, SplitSpec};
use crate::train::{train, NopsConfig};

/// Ladder of configurations, each adding one component to the previous rung
/// except `NP`, which drops pretraining.
pub const GRID: [&str; 7] = ["P", "OC", "Q", "NP", "NP+", "NP++", "Full"];

pub const PERCENTILES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Applies the switches of rung `name` to `base`; every other setting is kept.
pub fn ablation_config(name: &str, base: &NopsConfig) -> Result<NopsConfig> {
    let rung = GRID
        .iter()
        .position(|&g| g == name)
        .ok_or_else(|| invalid(format!("unknown ablation `{name}`")))?;
    let mut cfg = base.clone();
    let c = &mut cfg.components;
    c.pretrain = rung < 3;
    cfg.model.overcluster = rung >= 1;
    c.queue = rung >= 2;
    c.queue_filter = rung >= 4;
    c.label_filter = rung >= 5;
    cfg.queue.balanced = rung >= 6;
    Ok(cfg)
}

/// Trained from scratch with over-clustering, without queue or filters: the
/// reference the full method is compared against.
pub fn no_queue_no_filter(base: &NopsConfig) -> NopsConfig {
    let mut cfg = ablation_config("Full", base).expect("known rung");
    cfg.components.queue = false;
    cfg.components.queue_filter = false;
    cfg.components.label_filter = false;
    cfg
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// Novel mIoU of each seed.
    pub novel: Vec<f64>,
    pub base: Vec<f64>,
    pub all: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl AblationRow {
    pub fn novel_mean(&self) -> f64 {
        mean(&self.novel)
    }
}

/// Trains `cfg` once per seed and evaluates on the validation scenes.
pub fn run_config(
    name: &str,
    ds: &Dataset,
    split: &SplitSpec,
    cfg: &NopsConfig,
    seeds: &[u64],
) -> Result<AblationRow> {
    if seeds.is_empty() {
        return Err(invalid("at least one seed required"));
    }
    let mut row = AblationRow {
        name: name.to_string(),
        novel: Vec::new(),
        base: Vec::new(),
        all: Vec::new(),
    };
    for &seed in seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let trained = train(ds, split, &c)?;
        let r = trained.evaluate(&ds.val, split, &ds.classes)?;
        info!(
            "{name} seed {seed}: novel {:.4} base {:.4} all {:.4}",
            r.novel_miou, r.base_miou, r.all_miou
        );
        row.novel.push(r.novel_miou);
        row.base.push(r.base_miou);
        row.all.push(r.all_miou);
    }
    Ok(row)
}

pub fn run_grid(
    ds: &Dataset,
    split: &SplitSpec,
    base: &NopsConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    GRID.iter()
        .map(|&name| run_config(name, ds, split, &ablation_config(name, base)?, seeds))
        .collect()
}

/// The full configuration at each percentile of [`PERCENTILES`].
pub fn run_percentile_sweep(
    ds: &Dataset,
    split: &SplitSpec,
    base: &NopsConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    PERCENTILES
        .iter()
        .map(|&p| {
            let mut cfg = ablation_config("Full", base)?;
            cfg.percentile = p;
            run_config(&format!("p={p}"), ds, split, &cfg, seeds)
        })
        .collect()
}

/// Tab-separated comparison: means in percent, then per-seed novel values.
pub fn comparison_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("config\tnovel_mIoU\tbase_mIoU\tall_mIoU\tnovel_per_seed\n");
    for r in rows {
        let seeds: Vec<String> = r
            .novel
            .iter()
            .map(|v| format!("{:.2}", 100.0 * v))
            .collect();
        let _ = writeln!(
            s,
            "{}\t{:.2}\t{:.2}\t{:.2}\t{}",
            r.name,
            100.0 * mean(&r.novel),
            100.0 * mean(&r.base),
            100.0 * mean(&r.all),
            seeds.join(",")
        );
    }
    s
}
