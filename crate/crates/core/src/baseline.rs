//! Offline clustering baseline: supervised pretraining on base classes,
//! k-means pseudo-labels for a subsample of novel points, nearest-neighbour
//! propagation, then supervised finetuning.

use std::fs;
use std::path::Path;

use log::info;
use rand::distr::weighted::WeightedIndex;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::augment::{make_coord_views, AugmentConfig};
use crate::autodiff::{softmax_in_place, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};
use crate::io::{ClassTable, LabelledCloud, SplitSpec};
use crate::loss::LossWeights;
use crate::model::{normalize_prototypes, target_novel, Model, ModelConfig, TARGET_BASE};
use crate::optim::{lr_at, Sgd};
use crate::train::{
    base_counts, validation_metrics, EpochMetrics, MaskedScene, Target, TrainConfig, Trained,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsampleSpec {
    pub ratio: f64,
    pub cap: usize,
}

impl Default for SubsampleSpec {
    fn default() -> Self {
        Self {
            ratio: 0.3,
            cap: 1000,
        }
    }
}

impl SubsampleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) || self.cap == 0 {
            return Err(invalid(
                "subsample ratio must be in (0, 1] and cap positive",
            ));
        }
        Ok(())
    }

    /// `min(ceil(ratio·n), cap)`.
    pub fn count(&self, n: usize) -> usize {
        (((self.ratio * n as f64) - 1e-9).ceil().max(0.0) as usize)
            .min(self.cap)
            .min(n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EumsConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub subsample: SubsampleSpec,
    /// Over-cluster then merge by assignment entropy before labelling.
    pub entropy_stage: bool,
    pub overcluster_factor: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_restarts: usize,
}

impl Default for EumsConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 20,
            finetune_epochs: 10,
            subsample: SubsampleSpec::default(),
            entropy_stage: false,
            overcluster_factor: 3,
            kmeans_max_iter: 300,
            kmeans_restarts: 10,
        }
    }
}

impl EumsConfig {
    pub fn validate(&self) -> Result<()> {
        self.subsample.validate()?;
        if self.pretrain_epochs + self.finetune_epochs == 0 || self.finetune_epochs == 0 {
            return Err(invalid("finetuning needs at least one epoch"));
        }
        if self.overcluster_factor == 0 || self.kmeans_max_iter == 0 || self.kmeans_restarts == 0 {
            return Err(invalid("k-means settings must be positive"));
        }
        Ok(())
    }
}

/// Hard supervision of one scene: label column in the concatenated
/// `[base | novel]` space, or `None` for unsupervised points.
struct HardScene<'a> {
    coords: &'a [[f64; 3]],
    labels: Vec<Option<usize>>,
}

/// Supervised epochs on hard labels. With `base_only` the base head alone is
/// trained and every label must be a base column. Returns mean loss per epoch.
#[allow(clippy::too_many_arguments)]
fn supervised_epochs(
    model: &Model,
    params: &mut ParamStore,
    scenes: &[HardScene<'_>],
    weights: &[f64],
    base_only: bool,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(usize, f64, f64, &ParamStore) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let width = if base_only {
        model.n_base()
    } else {
        model.n_base() + model.n_novel()
    };
    let target = if base_only {
        TARGET_BASE.to_string()
    } else {
        target_novel(0)
    };
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let total_steps = cfg.epochs * scenes.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut sum, mut n, mut lr) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            lr = lr_at(&cfg.lr, step, total_steps.saturating_sub(1));
            step += 1;
            let labelled: usize = chunk
                .iter()
                .map(|&i| scenes[i].labels.iter().flatten().count())
                .sum();
            if labelled == 0 {
                log::warn!("epoch {epoch}: batch without labelled points skipped");
                continue;
            }
            let norm = 1.0 / labelled as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let scene = &scenes[i];
                let (view, _) = make_coord_views(scene.coords, aug, rng.random())?;
                let mut pass = model.pass(&view)?;
                let mut t = vec![0.0; scene.labels.len() * width];
                for (p, l) in scene.labels.iter().enumerate() {
                    if let Some(c) = *l {
                        if c >= width {
                            return Err(invalid(format!(
                                "label column {c} outside {width} outputs"
                            )));
                        }
                        t[p * width + c] = -weights[c] * norm;
                    }
                }
                pass.feed_target(&target, Tensor::matrix(scene.labels.len(), width, t)?)?;
                if base_only {
                    batch_loss += pass.base_only_loss(params)?;
                    pass.backward_base_only(params)?;
                } else {
                    batch_loss += pass.loss(params)?;
                    pass.backward(params)?;
                }
            }
            sgd.step(params, lr);
            normalize_prototypes(params);
            params.zero_grad();
            sum += batch_loss;
            n += 1;
        }
        let loss = sum / n.max(1) as f64;
        on_epoch(epoch, loss, lr, params)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Trains the base head and backbone on base-labelled points; novel points
/// contribute nothing. Returns mean loss per epoch.
pub fn pretrain_base(
    model: &Model,
    params: &mut ParamStore,
    scenes: &[MaskedScene],
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let hard: Vec<HardScene<'_>> = scenes
        .iter()
        .map(|s| HardScene {
            coords: &s.coords,
            labels: s
                .targets
                .iter()
                .map(|t| {
                    if let Target::Base(b) = t {
                        Some(*b)
                    } else {
                        None
                    }
                })
                .collect(),
        })
        .collect();
    let weights = LossWeights::from_base_counts(&base_counts(scenes, model.n_base())).base;
    supervised_epochs(
        model,
        params,
        &hard,
        &weights,
        true,
        aug,
        cfg,
        rng,
        |e, l, _, _| {
            info!("pretrain epoch {e}: loss {l:.6}");
            Ok(())
        },
    )
}

/// Per scene, `spec.count(n)` positions of `0..n` drawn without replacement,
/// ascending.
pub fn subsample_psi(
    sizes: &[usize],
    spec: &SubsampleSpec,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    Ok(sizes
        .iter()
        .map(|&n| {
            let mut picked = index::sample(rng, n, spec.count(n)).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration of the
    /// returned restart.
    pub sse_history: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sse(&self) -> f64 {
        *self.sse_history.last().expect("at least one iteration")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Closest centroid, lower index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (j, c)| {
            let d = sq_dist(p, c);
            if d < acc.1 {
                (j, d)
            } else {
                acc
            }
        })
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeans {
    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut sse_history = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        let mut sse = 0.0;
        for (p, a) in points.iter().zip(assignment.iter_mut()) {
            let (j, d) = nearest(p, &centroids);
            changed |= *a != j;
            *a = j;
            sse += d;
        }
        sse_history.push(sse);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        // An emptied cluster keeps its previous centroid.
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    KMeans {
        centroids,
        assignment,
        sse_history,
    }
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let pick = WeightedIndex::new(&d2)
            .expect("k distinct points leave positive mass")
            .sample(rng);
        centroids.push(points[pick].clone());
        let c = centroids.last().expect("just pushed");
        d2.iter_mut()
            .zip(points)
            .for_each(|(d, p)| *d = d.min(sq_dist(p, c)));
    }
    centroids
}

/// k-means++ seeding and Lloyd iterations until the assignment is a fixpoint
/// or `max_iter`; the lowest-SSE of `restarts` runs is returned.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    max_iter: usize,
    restarts: usize,
    rng: &mut impl Rng,
) -> Result<KMeans> {
    if k == 0 || max_iter == 0 || restarts == 0 {
        return Err(invalid("k, iteration count and restarts must be positive"));
    }
    let dim = points.first().map_or(0, Vec::len);
    if points
        .iter()
        .any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite()))
    {
        return Err(invalid("k-means points must be finite and of equal length"));
    }
    let mut distinct: Vec<&Vec<f64>> = points.iter().collect();
    distinct.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    distinct.dedup();
    if distinct.len() < k {
        return Err(invalid(format!(
            "k-means with k = {k} needs {k} distinct points, got {}",
            distinct.len()
        )));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts {
        let run = lloyd(points, kmeans_pp(points, k, rng), max_iter);
        if best.as_ref().is_none_or(|b| run.sse() < b.sse()) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Over-clusters into `factor·k` groups, keeps the `k` groups of lowest mean
/// assignment entropy as seeds and merges every other group into the seed
/// with the nearest centroid. Soft assignments are `softmax(−‖x − c‖² / t)`.
pub fn entropy_merge(
    points: &[Vec<f64>],
    k: usize,
    factor: usize,
    t: f64,
    max_iter: usize,
    restarts: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let over = kmeans(points, k * factor, max_iter, restarts, rng)?;
    let kk = over.k();
    let mut entropy = vec![0.0; kk];
    let mut members = vec![0usize; kk];
    for (p, &a) in points.iter().zip(&over.assignment) {
        let mut s: Vec<f64> = over.centroids.iter().map(|c| -sq_dist(p, c) / t).collect();
        softmax_in_place(&mut s);
        entropy[a] -= s
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|q| q * q.ln())
            .sum::<f64>();
        members[a] += 1;
    }
    // Empty groups rank last so that seeds are populated whenever possible.
    let mean: Vec<f64> = (0..kk)
        .map(|j| {
            if members[j] == 0 {
                f64::INFINITY
            } else {
                entropy[j] / members[j] as f64
            }
        })
        .collect();
    let mut ranked: Vec<usize> = (0..kk).collect();
    ranked.sort_by(|&a, &b| mean[a].total_cmp(&mean[b]).then(a.cmp(&b)));
    let seeds = &ranked[..k];
    let seed_centroids: Vec<Vec<f64>> = seeds.iter().map(|&j| over.centroids[j].clone()).collect();
    let label_of: Vec<usize> = (0..kk)
        .map(|j| {
            seeds
                .iter()
                .position(|&s| s == j)
                .unwrap_or_else(|| nearest(&over.centroids[j], &seed_centroids).0)
        })
        .collect();
    Ok(over.assignment.iter().map(|&a| label_of[a]).collect())
}

/// Copies each labelled point's label to its nearest unlabelled candidate
/// (ties to the lower index). A candidate claimed by an earlier labelled
/// point keeps that label. Returns all `(point, label)` pairs sorted by point.
pub fn propagate_nn(
    coords: &[[f64; 3]],
    labelled: &[(usize, u32)],
    candidates: &[usize],
) -> Vec<(usize, u32)> {
    let is_labelled = |i: usize| labelled.iter().any(|&(p, _)| p == i);
    let free: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&c| !is_labelled(c))
        .collect();
    let mut claimed: Vec<Option<u32>> = vec![None; free.len()];
    for &(p, label) in labelled {
        let best = free
            .iter()
            .enumerate()
            .fold(None::<(usize, f64, usize)>, |acc, (slot, &c)| {
                let d: f64 = (0..3).map(|k| (coords[p][k] - coords[c][k]).powi(2)).sum();
                match acc {
                    Some((_, bd, bi)) if bd < d || (bd == d && bi < c) => acc,
                    _ => Some((slot, d, c)),
                }
            });
        if let Some((slot, _, _)) = best {
            claimed[slot].get_or_insert(label);
        }
    }
    let mut out: Vec<(usize, u32)> = labelled.to_vec();
    out.extend(
        free.iter()
            .zip(&claimed)
            .filter_map(|(&c, l)| l.map(|l| (c, l))),
    );
    out.sort_unstable();
    out
}

/// Pseudo-labels as little-endian `u32` pairs `(point index, class)`.
pub fn write_pseudo_labels(path: &Path, pairs: &[(usize, u32)]) -> Result<()> {
    let mut bytes = Vec::with_capacity(pairs.len() * 8);
    for &(p, c) in pairs {
        let p = u32::try_from(p).map_err(|_| invalid(format!("point index {p} exceeds u32")))?;
        bytes.extend_from_slice(&p.to_le_bytes());
        bytes.extend_from_slice(&c.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<(usize, u32)>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("{} bytes is not a whole number of pairs", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let p = u32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            (
                p as usize,
                u32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
            )
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct EumsOutput {
    pub trained: Trained,
    /// Per training scene, `(point, novel cluster)` pairs used for finetuning.
    pub pseudo_labels: Vec<Vec<(usize, u32)>>,
}

/// The full baseline. Novel clusters are numbered `0..C_n` in the novel
/// output block; evaluation matches them to classes.
#[allow(clippy::too_many_arguments)]
pub fn run_eums(
    scenes: &[MaskedScene],
    val: &[LabelledCloud],
    split: &SplitSpec,
    classes: &ClassTable,
    model_cfg: &ModelConfig,
    aug: &AugmentConfig,
    train_cfg: &TrainConfig,
    cfg: &EumsConfig,
) -> Result<EumsOutput> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(invalid("no training scenes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let model_cfg = ModelConfig {
        heads: 1,
        overcluster: false,
        ..model_cfg.clone()
    };
    let model = Model::new(model_cfg, split.n_base(), split.n_novel())?;
    let mut params = model.init_params(rng.random());
    let mut log = Vec::new();

    let base_weights = LossWeights::from_base_counts(&base_counts(scenes, split.n_base()));
    if cfg.pretrain_epochs > 0 {
        let pre = TrainConfig {
            epochs: cfg.pretrain_epochs,
            ..train_cfg.clone()
        };
        let hard: Vec<HardScene<'_>> = scenes
            .iter()
            .map(|s| HardScene {
                coords: &s.coords,
                labels: s
                    .targets
                    .iter()
                    .map(|t| {
                        if let Target::Base(b) = t {
                            Some(*b)
                        } else {
                            None
                        }
                    })
                    .collect(),
            })
            .collect();
        supervised_epochs(
            &model,
            &mut params,
            &hard,
            &base_weights.base,
            true,
            aug,
            &pre,
            &mut rng,
            |epoch, loss, lr, p| {
                log.push(epoch_metrics(
                    &model, p, epoch, loss, lr, val, split, classes,
                )?);
                Ok(())
            },
        )?;
    }

    // Novel features of the pretrained backbone on the unaugmented scenes.
    let novel: Vec<Vec<usize>> = scenes.iter().map(MaskedScene::novel_indices).collect();
    let sizes: Vec<usize> = novel.iter().map(Vec::len).collect();
    let picks = subsample_psi(&sizes, &cfg.subsample, &mut rng)?;
    let mut points = Vec::new();
    let mut owners = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        if picks[s].is_empty() {
            continue;
        }
        let z = model.extract_features(&params, &scene.coords)?;
        for &k in &picks[s] {
            points.push(z.row_slice(novel[s][k]).to_vec());
            owners.push((s, novel[s][k]));
        }
    }
    let n_novel = split.n_novel();
    let clusters = if cfg.entropy_stage {
        entropy_merge(
            &points,
            n_novel,
            cfg.overcluster_factor,
            model.config().temperature,
            cfg.kmeans_max_iter,
            cfg.kmeans_restarts,
            &mut rng,
        )?
    } else {
        kmeans(
            &points,
            n_novel,
            cfg.kmeans_max_iter,
            cfg.kmeans_restarts,
            &mut rng,
        )?
        .assignment
    };
    let mut seeds: Vec<Vec<(usize, u32)>> = vec![Vec::new(); scenes.len()];
    for (&(s, p), &c) in owners.iter().zip(&clusters) {
        seeds[s].push((p, c as u32));
    }
    let pseudo_labels: Vec<Vec<(usize, u32)>> = scenes
        .iter()
        .enumerate()
        .map(|(s, scene)| propagate_nn(&scene.coords, &seeds[s], &novel[s]))
        .collect();

    let hard: Vec<HardScene<'_>> = scenes
        .iter()
        .zip(&pseudo_labels)
        .map(|(s, pl)| {
            let mut labels: Vec<Option<usize>> = s
                .targets
                .iter()
                .map(|t| {
                    if let Target::Base(b) = t {
                        Some(*b)
                    } else {
                        None
                    }
                })
                .collect();
            for &(p, c) in pl {
                labels[p] = Some(split.n_base() + c as usize);
            }
            HardScene {
                coords: &s.coords,
                labels,
            }
        })
        .collect();
    let fine = TrainConfig {
        epochs: cfg.finetune_epochs,
        ..train_cfg.clone()
    };
    let offset = cfg.pretrain_epochs;
    let weights = base_weights.expand(n_novel);
    let losses = supervised_epochs(
        &model,
        &mut params,
        &hard,
        &weights,
        false,
        aug,
        &fine,
        &mut rng,
        |epoch, loss, lr, p| {
            log.push(epoch_metrics(
                &model,
                p,
                offset + epoch,
                loss,
                lr,
                val,
                split,
                classes,
            )?);
            Ok(())
        },
    )?;
    let last = *losses.last().expect("finetune_epochs >= 1");
    Ok(EumsOutput {
        trained: Trained {
            model,
            params,
            inference_head: 0,
            log,
            head_losses: vec![last],
        },
        pseudo_labels,
    })
}

#[allow(clippy::too_many_arguments)]
fn epoch_metrics(
    model: &Model,
    params: &ParamStore,
    epoch: usize,
    loss: f64,
    lr: f64,
    val: &[LabelledCloud],
    split: &SplitSpec,
    classes: &ClassTable,
) -> Result<EpochMetrics> {
    let (novel_miou, base_miou, all_miou) =
        validation_metrics(model, params, 0, val, split, classes)?;
    let m = EpochMetrics {
        epoch,
        loss,
        lr,
        eps: f64::NAN,
        novel_miou,
        base_miou,
        all_miou,
    };
    info!("{}", m.tsv());
    Ok(m)
}
