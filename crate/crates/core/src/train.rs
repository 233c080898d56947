//! The discovery training loop.
//!
//! Ground truth enters training only through [`MaskedScene`], which keeps the
//! base class index of base points and reduces every novel point to
//! [`Target::Novel`]. Nothing downstream of masking can see novel class ids.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_coord_views, AugmentConfig};
use crate::autodiff::{softmax_in_place, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, Report};
use crate::io::{ClassTable, Dataset, LabelledCloud, SplitSpec, IGNORE_LABEL};
use crate::loss::LossWeights;
use crate::model::{
    normalize_prototypes, novel_weight, over_weight, target_novel, target_over, Model, ModelConfig,
    Pass,
};
use crate::optim::{lr_at, LrSchedule, Sgd};
use crate::queue::{queue_insert, queue_sample, FeatureQueue, QueueConfig};
use crate::sinkhorn::{epsilon_at, pseudo_labels_from, sinkhorn_assign, EpsilonSchedule};
use crate::uncertainty::select_phi;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Ignore,
    /// Index into the split's sorted base classes.
    Base(usize),
    Novel,
}

/// A training scene with novel ground truth erased.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedScene {
    pub scene_id: String,
    pub coords: Vec<[f64; 3]>,
    pub targets: Vec<Target>,
}

impl MaskedScene {
    pub fn new(cloud: &LabelledCloud, split: &SplitSpec) -> Result<Self> {
        let targets = cloud
            .labels
            .iter()
            .map(|&l| {
                if l == IGNORE_LABEL {
                    Ok(Target::Ignore)
                } else if let Some(i) = split.base_index(l) {
                    Ok(Target::Base(i))
                } else if split.is_novel(l) {
                    Ok(Target::Novel)
                } else {
                    Err(Error::LabelOutOfRange(l))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            scene_id: cloud.scene_id.clone(),
            coords: cloud.coords.clone(),
            targets,
        })
    }

    pub fn novel_indices(&self) -> Vec<usize> {
        (0..self.targets.len())
            .filter(|&i| self.targets[i] == Target::Novel)
            .collect()
    }
}

pub fn mask_scenes(scenes: &[LabelledCloud], split: &SplitSpec) -> Result<Vec<MaskedScene>> {
    scenes.iter().map(|s| MaskedScene::new(s, split)).collect()
}

/// Points per base class over masked scenes.
pub fn base_counts(scenes: &[MaskedScene], n_base: usize) -> Vec<usize> {
    let mut counts = vec![0; n_base];
    for t in scenes.iter().flat_map(|s| &s.targets) {
        if let Target::Base(b) = t {
            counts[*b] += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Fixed inference head; `None` picks the lowest final-epoch loss.
    pub inference_head: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr: LrSchedule::default(),
            seed: 0,
            inference_head: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(invalid(
                "momentum must be in [0, 1) and weight decay non-negative",
            ));
        }
        self.lr.validate()
    }
}

/// Component switches of the discovery objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    /// Start from a base-only supervised model.
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    /// Append queued features before transport.
    pub queue: bool,
    /// Only φ-selected points enter the queue.
    pub queue_filter: bool,
    /// Only φ-selected points are pseudo-labelled and trained on.
    pub label_filter: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            pretrain: false,
            pretrain_epochs: 10,
            queue: true,
            queue_filter: true,
            label_filter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NopsConfig {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub sinkhorn_iters: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub queue: QueueConfig,
    /// Percentile `p` of the selection function.
    pub percentile: f64,
    pub components: Components,
    pub train: TrainConfig,
}

impl Default for NopsConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            sinkhorn_iters: 3,
            eps_start: 0.3,
            eps_end: 0.05,
            queue: QueueConfig::default(),
            percentile: 0.5,
            components: Components::default(),
            train: TrainConfig::default(),
        }
    }
}

impl NopsConfig {
    pub fn eps_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            total_epochs: self.train.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.eps_schedule().validate()?;
        self.queue.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.percentile) {
            return Err(invalid(format!(
                "percentile {} outside [0, 1)",
                self.percentile
            )));
        }
        if self.sinkhorn_iters == 0 {
            return Err(invalid("sinkhorn needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub eps: f64,
    pub novel_miou: f64,
    pub base_miou: f64,
    pub all_miou: f64,
}

pub const METRICS_HEADER: &str = "# epoch\tloss\tlr\teps\tnovel_mIoU\tbase_mIoU\tall_mIoU";

impl EpochMetrics {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.9}\t{:.9e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch,
            self.loss,
            self.lr,
            self.eps,
            self.novel_miou,
            self.base_miou,
            self.all_miou
        )
    }
}

pub fn metrics_log(log: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in log {
        s.push_str(&m.tsv());
        s.push('\n');
    }
    s
}

/// A trained network and the novel head used at inference.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub params: ParamStore,
    pub inference_head: usize,
    pub log: Vec<EpochMetrics>,
    /// Mean swapped loss of each novel head over the final epoch.
    pub head_losses: Vec<f64>,
}

impl Trained {
    pub fn evaluate(
        &self,
        scenes: &[LabelledCloud],
        split: &SplitSpec,
        classes: &ClassTable,
    ) -> Result<Report> {
        evaluate(
            &self.model,
            &self.params,
            self.inference_head,
            scenes,
            split,
            classes,
        )
    }
}

pub(crate) fn validation_metrics(
    model: &Model,
    params: &ParamStore,
    head: usize,
    val: &[LabelledCloud],
    split: &SplitSpec,
    classes: &ClassTable,
) -> Result<(f64, f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let r = evaluate(model, params, head, val, split, classes)?;
    Ok((r.novel_miou, r.base_miou, r.all_miou))
}

pub fn train(dataset: &Dataset, split: &SplitSpec, cfg: &NopsConfig) -> Result<Trained> {
    let scenes = mask_scenes(&dataset.train, split)?;
    train_masked(&scenes, &dataset.val, split, &dataset.classes, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HeadKind {
    Novel,
    Over,
}

struct HeadRef {
    kind: HeadKind,
    index: usize,
    width: usize,
    weight: String,
    target: String,
    /// `1 / H` for the averaging over heads of one kind.
    scale: f64,
}

/// Trains on masked scenes; `val` (with ground truth) is only evaluated for
/// the per-epoch log.
pub fn train_masked(
    scenes: &[MaskedScene],
    val: &[LabelledCloud],
    split: &SplitSpec,
    classes: &ClassTable,
    cfg: &NopsConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(invalid("no training scenes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = Model::new(cfg.model.clone(), split.n_base(), split.n_novel())?;
    let mut params = model.init_params(rng.random());
    if cfg.components.pretrain {
        let pre = TrainConfig {
            epochs: cfg.components.pretrain_epochs.max(1),
            ..cfg.train.clone()
        };
        crate::baseline::pretrain_base(&model, &mut params, scenes, &cfg.augment, &pre, &mut rng)?;
    }
    let weights = LossWeights::from_base_counts(&base_counts(scenes, split.n_base()));
    let heads = head_refs(&model);
    let mut queues: Vec<FeatureQueue> = heads
        .iter()
        .map(|h| FeatureQueue::new(cfg.model.d, h.width, cfg.queue.capacity, cfg.queue.balanced))
        .collect();
    let mut sgd = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
    let schedule = cfg.eps_schedule();
    let batches_per_epoch = scenes.len().div_ceil(cfg.train.batch_size);
    let total_steps = cfg.train.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0;
    let mut log = Vec::new();
    let mut head_losses = vec![0.0; cfg.model.heads];
    for epoch in 0..cfg.train.epochs {
        let eps = epsilon_at(&schedule, epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_batches, mut lr) = (0.0, 0usize, 0.0);
        let mut head_sum = vec![0.0; cfg.model.heads];
        for chunk in order.chunks(cfg.train.batch_size) {
            lr = lr_at(&cfg.train.lr, step, total_steps.saturating_sub(1));
            step += 1;
            let batch: Vec<&MaskedScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let ctx = StepContext {
                model: &model,
                heads: &heads,
                cfg,
                weights: &weights,
                eps,
            };
            let Some(out) = nops_step(&ctx, &mut params, &mut queues, &batch, &mut rng)? else {
                warn!("epoch {epoch}: batch without base or novel points skipped");
                continue;
            };
            sgd.step(&mut params, lr);
            normalize_prototypes(&mut params);
            params.zero_grad();
            loss_sum += out.total;
            n_batches += 1;
            head_sum
                .iter_mut()
                .zip(&out.novel_heads)
                .for_each(|(a, b)| *a += b);
        }
        let denom = n_batches.max(1) as f64;
        head_losses = head_sum.iter().map(|s| s / denom).collect();
        let head = cfg
            .train
            .inference_head
            .unwrap_or_else(|| argmin(&head_losses));
        let (novel_miou, base_miou, all_miou) =
            validation_metrics(&model, &params, head, val, split, classes)?;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / denom,
            lr,
            eps,
            novel_miou,
            base_miou,
            all_miou,
        };
        info!("{}", m.tsv());
        log.push(m);
    }
    let inference_head = cfg
        .train
        .inference_head
        .unwrap_or_else(|| argmin(&head_losses));
    if inference_head >= cfg.model.heads {
        return Err(invalid(format!(
            "inference head {inference_head} out of range"
        )));
    }
    Ok(Trained {
        model,
        params,
        inference_head,
        log,
        head_losses,
    })
}

pub(crate) fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc },
        )
        .0
}

fn head_refs(model: &Model) -> Vec<HeadRef> {
    let cfg = model.config();
    let mut heads: Vec<HeadRef> = (0..cfg.heads)
        .map(|i| HeadRef {
            kind: HeadKind::Novel,
            index: i,
            width: model.n_novel(),
            weight: novel_weight(i),
            target: target_novel(i),
            scale: 1.0 / cfg.heads as f64,
        })
        .collect();
    heads.extend((0..cfg.over_heads()).map(|i| HeadRef {
        kind: HeadKind::Over,
        index: i,
        width: model.n_over(),
        weight: over_weight(i),
        target: target_over(i),
        scale: 1.0 / cfg.heads as f64,
    }));
    heads
}

struct StepContext<'a> {
    model: &'a Model,
    heads: &'a [HeadRef],
    cfg: &'a NopsConfig,
    weights: &'a LossWeights,
    eps: f64,
}

pub(crate) struct StepOutput {
    /// Objective of the batch (mean over heads of the swapped loss).
    pub total: f64,
    /// Swapped loss of each novel head.
    pub novel_heads: Vec<f64>,
}

/// Soft pseudo-labels of one view for one head: `(scene, point, distribution)`.
type PseudoLabels = Vec<(usize, usize, Vec<f64>)>;

/// One optimization step's forward/backward work; gradients are left in
/// `params`. Returns `None` when the batch has nothing to learn from.
fn nops_step(
    ctx: &StepContext<'_>,
    params: &mut ParamStore,
    queues: &mut [FeatureQueue],
    batch: &[&MaskedScene],
    rng: &mut ChaCha8Rng,
) -> Result<Option<StepOutput>> {
    let cfg = ctx.cfg;
    let comp = &cfg.components;
    let model = ctx.model;
    let n_base_pts: usize = batch
        .iter()
        .map(|s| {
            s.targets
                .iter()
                .filter(|t| matches!(t, Target::Base(_)))
                .count()
        })
        .sum();
    let novel_idx: Vec<Vec<usize>> = batch.iter().map(|s| s.novel_indices()).collect();
    let n_novel_pts: usize = novel_idx.iter().map(Vec::len).sum();
    if n_base_pts == 0 && n_novel_pts == 0 {
        return Ok(None);
    }

    let mut views: [Vec<Vec<[f64; 3]>>; 2] = [Vec::new(), Vec::new()];
    for s in batch {
        let (a, b) = make_coord_views(&s.coords, &cfg.augment, rng.random())?;
        views[0].push(a);
        views[1].push(b);
    }
    let mut passes: [Vec<Pass<'_>>; 2] = [Vec::new(), Vec::new()];
    let mut feats: [Vec<Tensor>; 2] = [Vec::new(), Vec::new()];
    for v in 0..2 {
        for coords in &views[v] {
            let mut pass = model.pass(coords)?;
            feats[v].push(pass.features(params)?);
            passes[v].push(pass);
        }
    }

    let inv_t = 1.0 / cfg.model.temperature;
    // pseudo[h][v]: labels derived from view v for head h.
    let mut pseudo: Vec<[PseudoLabels; 2]> = Vec::with_capacity(ctx.heads.len());
    for (h, head) in ctx.heads.iter().enumerate() {
        let mut per_view: [PseudoLabels; 2] = [Vec::new(), Vec::new()];
        let mut cand_feats: Vec<Vec<f64>> = Vec::new();
        let mut cand_classes: Vec<usize> = Vec::new();
        for v in 0..2 {
            let mut owners = Vec::with_capacity(n_novel_pts);
            let mut scores = Vec::with_capacity(n_novel_pts * head.width);
            for (s, idx) in novel_idx.iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                let logits = match head.kind {
                    HeadKind::Novel => passes[v][s].novel_logits(params, head.index)?,
                    HeadKind::Over => passes[v][s].over_logits(params, head.index)?,
                };
                for &i in idx {
                    owners.push((s, i));
                    scores.extend_from_slice(logits.row_slice(i));
                }
            }
            if owners.is_empty() {
                continue;
            }
            let mut probs = scores.iter().map(|x| x * inv_t).collect::<Vec<_>>();
            probs.chunks_mut(head.width).for_each(softmax_in_place);
            let sel = select_phi(
                &Tensor::matrix(owners.len(), head.width, probs)?,
                cfg.percentile,
            )?;
            let train_keep: Vec<usize> = if comp.label_filter {
                sel.kept.clone()
            } else {
                (0..owners.len()).collect()
            };
            let queue_keep: Vec<usize> = if comp.queue_filter {
                sel.kept.clone()
            } else {
                (0..owners.len()).collect()
            };

            let queued = if comp.queue {
                queue_sample(&queues[h], cfg.queue.sample_per_class, rng)
            } else {
                Vec::new()
            };
            if !train_keep.is_empty() {
                let cols = train_keep.len() + queued.len();
                let mut st = vec![0.0; head.width * cols];
                for (j, &k) in train_keep.iter().enumerate() {
                    for c in 0..head.width {
                        st[c * cols + j] = scores[k * head.width + c];
                    }
                }
                let p = params.value(&head.weight)?;
                for (jq, zq) in queued.iter().enumerate() {
                    let j = train_keep.len() + jq;
                    for c in 0..head.width {
                        st[c * cols + j] = (0..cfg.model.d).map(|d| zq[d] * p.get(d, c)).sum();
                    }
                }
                let q = sinkhorn_assign(
                    &Tensor::matrix(head.width, cols, st)?,
                    ctx.eps,
                    cfg.sinkhorn_iters,
                )?;
                let labels = pseudo_labels_from(&q, train_keep.len())?;
                for (j, &k) in train_keep.iter().enumerate() {
                    let (s, i) = owners[k];
                    per_view[v].push((s, i, labels.row_slice(j).to_vec()));
                }
            }
            if comp.queue {
                for &k in &queue_keep {
                    let (s, i) = owners[k];
                    cand_feats.push(feats[v][s].row_slice(i).to_vec());
                    cand_classes.push(sel.predicted[k]);
                }
            }
        }
        if comp.queue && !cand_feats.is_empty() {
            let refs: Vec<&[f64]> = cand_feats.iter().map(Vec::as_slice).collect();
            queue_insert(
                &mut queues[h],
                &refs,
                &cand_classes,
                cfg.queue.insert_fraction,
                rng,
            )?;
        }
        pseudo.push(per_view);
    }

    // Predictions of view v are scored against targets built from view 1 − v.
    let n_b = model.n_base();
    let mut any_target = false;
    #[allow(clippy::needless_range_loop)]
    for v in 0..2 {
        let u = 1 - v;
        for (h, head) in ctx.heads.iter().enumerate() {
            let n_targets = n_base_pts + pseudo[h][u].len();
            let norm = if n_targets == 0 {
                0.0
            } else {
                head.scale / n_targets as f64
            };
            any_target |= n_targets > 0;
            let width = n_b + head.width;
            let mut t: Vec<Vec<f64>> = batch
                .iter()
                .map(|s| vec![0.0; s.targets.len() * width])
                .collect();
            for (s, scene) in batch.iter().enumerate() {
                for (i, target) in scene.targets.iter().enumerate() {
                    if let Target::Base(b) = target {
                        t[s][i * width + b] = -ctx.weights.base[*b] * norm;
                    }
                }
            }
            for (s, i, dist) in &pseudo[h][u] {
                for (c, p) in dist.iter().enumerate() {
                    t[*s][i * width + n_b + c] = -ctx.weights.novel * p * norm;
                }
            }
            for (s, data) in t.into_iter().enumerate() {
                let rows = batch[s].targets.len();
                passes[v][s].feed_target(&head.target, Tensor::matrix(rows, width, data)?)?;
            }
        }
    }
    if !any_target {
        return Ok(None);
    }

    let mut total = 0.0;
    let mut novel_heads = vec![0.0; cfg.model.heads];
    for pass in passes.iter_mut().flatten() {
        total += pass.loss(params)?;
        let (novel, _) = pass.head_losses(params)?;
        for (acc, l) in novel_heads.iter_mut().zip(novel) {
            *acc += l * cfg.model.heads as f64;
        }
        pass.backward(params)?;
    }
    Ok(Some(StepOutput { total, novel_heads }))
}
