//! Plain-text `key=value` configuration.

use std::fmt::Display;
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::baseline::EumsConfig;
use crate::error::{Error, Result};
use crate::train::NopsConfig;

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; keys must be unique.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(key, _)| key == k) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                n + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn write_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Scene counts and seed of a generated synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub points: usize,
    pub val_scenes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            points: 512,
            val_scenes: 20,
            seed: 0,
        }
    }
}

/// Every tunable of a run. `write_kv(&settings.pairs())` is the resolved
/// configuration; applying it to the defaults reproduces `settings` exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub nops: NopsConfig,
    pub eums: EumsConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl Settings {
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply(&parse_kv(text)?)?;
        Ok(s)
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = &mut self.nops;
        let a: &mut AugmentConfig = &mut n.augment;
        let e = &mut self.eums;
        let d = &mut self.data;
        match key {
            "aug.rotate" => a.rotate = parse(key, v)?,
            "aug.scale_lo" => a.scale_lo = parse(key, v)?,
            "aug.scale_hi" => a.scale_hi = parse(key, v)?,
            "aug.jitter" => a.jitter_sigma = parse(key, v)?,
            "model.d" => n.model.d = parse(key, v)?,
            "model.k" => n.model.k = parse(key, v)?,
            "model.hidden" => n.model.hidden = parse(key, v)?,
            "model.heads" => n.model.heads = parse(key, v)?,
            "model.overcluster_factor" => n.model.overcluster_factor = parse(key, v)?,
            "model.temperature" => n.model.temperature = parse(key, v)?,
            "sk.iters" => n.sinkhorn_iters = parse(key, v)?,
            "sk.eps_start" => n.eps_start = parse(key, v)?,
            "sk.eps_end" => n.eps_end = parse(key, v)?,
            "queue.capacity" => n.queue.capacity = parse(key, v)?,
            "queue.insert_fraction" => n.queue.insert_fraction = parse(key, v)?,
            "queue.sample_per_class" => n.queue.sample_per_class = parse(key, v)?,
            "queue.balanced" => n.queue.balanced = parse(key, v)?,
            "unc.p" => n.percentile = parse(key, v)?,
            "nops.pretrain" => n.components.pretrain = parse(key, v)?,
            "nops.pretrain_epochs" => n.components.pretrain_epochs = parse(key, v)?,
            "nops.overcluster" => n.model.overcluster = parse(key, v)?,
            "nops.queue" => n.components.queue = parse(key, v)?,
            "nops.queue_filter" => n.components.queue_filter = parse(key, v)?,
            "nops.label_filter" => n.components.label_filter = parse(key, v)?,
            "train.epochs" => n.train.epochs = parse(key, v)?,
            "train.batch_size" => n.train.batch_size = parse(key, v)?,
            "train.momentum" => n.train.momentum = parse(key, v)?,
            "train.weight_decay" => n.train.weight_decay = parse(key, v)?,
            "train.lr_max" => n.train.lr.lr_max = parse(key, v)?,
            "train.lr_min" => n.train.lr.lr_min = parse(key, v)?,
            "train.warmup_fraction" => n.train.lr.warmup_fraction = parse(key, v)?,
            "train.seed" => n.train.seed = parse(key, v)?,
            "train.inference_head" => {
                n.train.inference_head = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "eums.pretrain_epochs" => e.pretrain_epochs = parse(key, v)?,
            "eums.finetune_epochs" => e.finetune_epochs = parse(key, v)?,
            "eums.ratio" => e.subsample.ratio = parse(key, v)?,
            "eums.cap" => e.subsample.cap = parse(key, v)?,
            "eums.entropy_stage" => e.entropy_stage = parse(key, v)?,
            "eums.overcluster_factor" => e.overcluster_factor = parse(key, v)?,
            "eums.kmeans_max_iter" => e.kmeans_max_iter = parse(key, v)?,
            "eums.kmeans_restarts" => e.kmeans_restarts = parse(key, v)?,
            "data.scenes" => d.scenes = parse(key, v)?,
            "data.points" => d.points = parse(key, v)?,
            "data.val_scenes" => d.val_scenes = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// All keys with their effective values, in a fixed order. Floats use
    /// the shortest representation that parses back to the same bits.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let n = &self.nops;
        let (a, e, d) = (&n.augment, &self.eums, &self.data);
        let head = n
            .train
            .inference_head
            .map_or("auto".to_string(), |h| h.to_string());
        let kv: Vec<(&str, String)> = vec![
            ("aug.rotate", a.rotate.to_string()),
            ("aug.scale_lo", a.scale_lo.to_string()),
            ("aug.scale_hi", a.scale_hi.to_string()),
            ("aug.jitter", a.jitter_sigma.to_string()),
            ("model.d", n.model.d.to_string()),
            ("model.k", n.model.k.to_string()),
            ("model.hidden", n.model.hidden.to_string()),
            ("model.heads", n.model.heads.to_string()),
            (
                "model.overcluster_factor",
                n.model.overcluster_factor.to_string(),
            ),
            ("model.temperature", n.model.temperature.to_string()),
            ("sk.iters", n.sinkhorn_iters.to_string()),
            ("sk.eps_start", n.eps_start.to_string()),
            ("sk.eps_end", n.eps_end.to_string()),
            ("queue.capacity", n.queue.capacity.to_string()),
            ("queue.insert_fraction", n.queue.insert_fraction.to_string()),
            (
                "queue.sample_per_class",
                n.queue.sample_per_class.to_string(),
            ),
            ("queue.balanced", n.queue.balanced.to_string()),
            ("unc.p", n.percentile.to_string()),
            ("nops.pretrain", n.components.pretrain.to_string()),
            (
                "nops.pretrain_epochs",
                n.components.pretrain_epochs.to_string(),
            ),
            ("nops.overcluster", n.model.overcluster.to_string()),
            ("nops.queue", n.components.queue.to_string()),
            ("nops.queue_filter", n.components.queue_filter.to_string()),
            ("nops.label_filter", n.components.label_filter.to_string()),
            ("train.epochs", n.train.epochs.to_string()),
            ("train.batch_size", n.train.batch_size.to_string()),
            ("train.momentum", n.train.momentum.to_string()),
            ("train.weight_decay", n.train.weight_decay.to_string()),
            ("train.lr_max", n.train.lr.lr_max.to_string()),
            ("train.lr_min", n.train.lr.lr_min.to_string()),
            (
                "train.warmup_fraction",
                n.train.lr.warmup_fraction.to_string(),
            ),
            ("train.seed", n.train.seed.to_string()),
            ("train.inference_head", head),
            ("eums.pretrain_epochs", e.pretrain_epochs.to_string()),
            ("eums.finetune_epochs", e.finetune_epochs.to_string()),
            ("eums.ratio", e.subsample.ratio.to_string()),
            ("eums.cap", e.subsample.cap.to_string()),
            ("eums.entropy_stage", e.entropy_stage.to_string()),
            ("eums.overcluster_factor", e.overcluster_factor.to_string()),
            ("eums.kmeans_max_iter", e.kmeans_max_iter.to_string()),
            ("eums.kmeans_restarts", e.kmeans_restarts.to_string()),
            ("data.scenes", d.scenes.to_string()),
            ("data.points", d.points.to_string()),
            ("data.val_scenes", d.val_scenes.to_string()),
            ("data.seed", d.seed.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn resolved(&self) -> String {
        write_kv(&self.pairs())
    }

    pub fn validate(&self) -> Result<()> {
        self.nops.validate()?;
        self.eums.validate()?;
        if self.data.scenes == 0 || self.data.points == 0 {
            return Err(Error::Config(
                "data.scenes and data.points must be positive".into(),
            ));
        }
        Ok(())
    }
}
