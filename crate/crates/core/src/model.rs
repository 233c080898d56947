//! Per-point feature extractor and segmentation heads.
//!
//! Tensors are row-major with one row per point: features are `m × D`,
//! logits `m × classes`. Novel heads are bias-free, so their weight matrix
//! `D × ρ` is the prototype matrix read by Sinkhorn.
//!
//! Architecture: `xyz → 64 → 64` (ReLU) per point, mean over the `k` nearest
//! neighbours (the point included) concatenated with the point's own
//! encoding, then a linear map to `D` and row L2 normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{matmul, Graph, GraphBuilder, NodeId, ParamStore, Session, Tensor};
use crate::error::{invalid, Error, Result};

pub const INPUT_COORDS: &str = "coords";
pub const INPUT_NEIGHBOURS: &str = "neighbours";
pub const TARGET_BASE: &str = "target.base";

pub fn target_novel(head: usize) -> String {
    format!("target.novel{head}")
}

pub fn target_over(head: usize) -> String {
    format!("target.over{head}")
}

pub fn novel_weight(head: usize) -> String {
    format!("novel{head}.w")
}

pub fn over_weight(head: usize) -> String {
    format!("over{head}.w")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    pub heads: usize,
    pub overcluster_factor: usize,
    pub overcluster: bool,
    /// Logits are divided by this before every softmax in the losses.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            k: 16,
            hidden: 64,
            heads: 5,
            overcluster_factor: 3,
            overcluster: true,
            temperature: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0
            || self.k == 0
            || self.hidden == 0
            || self.heads == 0
            || self.overcluster_factor == 0
        {
            return Err(invalid("model sizes, k and head count must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn over_heads(&self) -> usize {
        if self.overcluster {
            self.heads
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
struct Nodes {
    features: NodeId,
    base_logits: NodeId,
    novel_logits: Vec<NodeId>,
    over_logits: Vec<NodeId>,
    loss_novel: Vec<NodeId>,
    loss_over: Vec<NodeId>,
    loss: NodeId,
    loss_base_only: NodeId,
}

/// Architecture and graph; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    n_base: usize,
    n_novel: usize,
    graph: Graph,
    nodes: Nodes,
}

impl Model {
    pub fn new(cfg: ModelConfig, n_base: usize, n_novel: usize) -> Result<Self> {
        cfg.validate()?;
        if n_base == 0 || n_novel == 0 {
            return Err(invalid("model needs at least one base and one novel class"));
        }
        let (graph, nodes) = build_graph(&cfg, n_base, n_novel);
        Ok(Self {
            cfg,
            n_base,
            n_novel,
            graph,
            nodes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn n_novel(&self) -> usize {
        self.n_novel
    }

    pub fn n_over(&self) -> usize {
        self.n_novel * self.cfg.overcluster_factor
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Shapes of every parameter, by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, d) = (self.cfg.hidden, self.cfg.d);
        let mut out = vec![
            ("enc1.w".to_string(), vec![3, h]),
            ("enc1.b".to_string(), vec![h]),
            ("enc2.w".to_string(), vec![h, h]),
            ("enc2.b".to_string(), vec![h]),
            ("proj.w".to_string(), vec![2 * h, d]),
            ("proj.b".to_string(), vec![d]),
            ("base.w".to_string(), vec![d, self.n_base]),
            ("base.b".to_string(), vec![self.n_base]),
        ];
        for i in 0..self.cfg.heads {
            out.push((novel_weight(i), vec![d, self.n_novel]));
        }
        for i in 0..self.cfg.over_heads() {
            out.push((over_weight(i), vec![d, self.n_over()]));
        }
        out
    }

    /// Uniform `±1/√fan_in` init for linear layers; prototypes are Gaussian
    /// columns scaled to unit norm.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if is_prototype(&name) {
                (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
            } else {
                let fan_in = if name.ends_with(".b") {
                    self.fan_in_of_bias(&name)
                } else {
                    shape[0]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            store.insert(name, Tensor::new(shape, data).expect("positive shape"));
        }
        normalize_prototypes(&mut store);
        store
    }

    fn fan_in_of_bias(&self, name: &str) -> usize {
        match name {
            "enc1.b" => 3,
            "enc2.b" => self.cfg.hidden,
            "proj.b" => 2 * self.cfg.hidden,
            _ => self.cfg.d,
        }
    }

    /// Checks that `params` holds exactly this model's parameters.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let shapes = self.param_shapes();
        for (name, shape) in &shapes {
            let v = params.value(name)?;
            if v.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    node: name.clone(),
                    detail: format!("expected {shape:?}, checkpoint has {:?}", v.shape()),
                });
            }
        }
        if params.len() != shapes.len() {
            return Err(invalid(format!(
                "expected {} parameters, found {}",
                shapes.len(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Starts a pass over one cloud.
    pub fn pass(&self, coords: &[[f64; 3]]) -> Result<Pass<'_>> {
        if coords.is_empty() {
            return Err(invalid("cannot extract features of an empty cloud"));
        }
        let mut session = Session::new(&self.graph);
        session.feed(INPUT_COORDS, coords_tensor(coords))?;
        session.feed(INPUT_NEIGHBOURS, knn_mean_matrix(coords, self.cfg.k))?;
        Ok(Pass {
            model: self,
            session,
        })
    }

    /// Unit-norm features, `m × D`.
    pub fn extract_features(&self, params: &ParamStore, coords: &[[f64; 3]]) -> Result<Tensor> {
        self.pass(coords)?.features(params)
    }

    /// Base and novel logits of head `head` for features `z` (`m × D`).
    pub fn head_logits(
        &self,
        params: &ParamStore,
        z: &Tensor,
        head: usize,
    ) -> Result<(Tensor, Tensor)> {
        if head >= self.cfg.heads {
            return Err(invalid(format!(
                "head {head} out of range (H = {})",
                self.cfg.heads
            )));
        }
        let (m, d) = z
            .dims2()
            .filter(|&(_, d)| d == self.cfg.d)
            .ok_or_else(|| invalid("features must be m × D"))?;
        let wb = params.value("base.w")?;
        let bb = params.value("base.b")?;
        let mut base = matmul(z.data(), wb.data(), m, d, self.n_base);
        for row in base.chunks_mut(self.n_base) {
            row.iter_mut().zip(bb.data()).for_each(|(x, b)| *x += b);
        }
        let p = params.value(&novel_weight(head))?;
        let novel = matmul(z.data(), p.data(), m, d, self.n_novel);
        Ok((
            Tensor::matrix(m, self.n_base, base)?,
            Tensor::matrix(m, self.n_novel, novel)?,
        ))
    }
}

fn is_prototype(name: &str) -> bool {
    (name.starts_with("novel") || name.starts_with("over")) && name.ends_with(".w")
}

/// Rescales every prototype column to unit L2 norm.
pub fn normalize_prototypes(params: &mut ParamStore) {
    for (name, p) in params.iter_mut() {
        if !is_prototype(name) {
            continue;
        }
        let (rows, cols) = p.value.dims2().expect("prototypes are matrices");
        let data = p.value.data_mut();
        for c in 0..cols {
            let norm = (0..rows)
                .map(|r| data[r * cols + c].powi(2))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            (0..rows).for_each(|r| data[r * cols + c] /= norm);
        }
    }
}

fn build_graph(cfg: &ModelConfig, n_base: usize, n_novel: usize) -> (Graph, Nodes) {
    let mut g = GraphBuilder::new();
    let x = g.input(INPUT_COORDS, &[None, Some(3)]);
    let nb = g.input(INPUT_NEIGHBOURS, &[None, None]);
    let h1 = g.linear(x, "enc1.w", Some("enc1.b"));
    let h1 = g.relu(h1);
    let h2 = g.linear(h1, "enc2.w", Some("enc2.b"));
    let h2 = g.relu(h2);
    let agg = g.matmul(nb, h2);
    let cat = g.concat_cols(&[h2, agg]);
    let proj = g.linear(cat, "proj.w", Some("proj.b"));
    let features = g.l2_normalize_rows(proj);
    g.output("features", features);
    let base_logits = g.linear(features, "base.w", Some("base.b"));
    g.output("logits.base", base_logits);

    let inv_t = g.constant(Tensor::scalar(1.0 / cfg.temperature));
    let soft_ce = |g: &mut GraphBuilder, logits: NodeId, target: &str, width: usize| {
        let scaled = g.mul(logits, inv_t);
        let logq = g.softmax_rows(scaled);
        let logq = g.log(logq);
        let t = g.input(target, &[None, Some(width)]);
        let prod = g.mul(t, logq);
        g.sum(prod)
    };

    let mut novel_logits = Vec::new();
    let mut loss_novel = Vec::new();
    for i in 0..cfg.heads {
        let l = g.linear(features, &novel_weight(i), None);
        g.output(&format!("logits.novel{i}"), l);
        let both = g.concat_cols(&[base_logits, l]);
        let loss = soft_ce(&mut g, both, &target_novel(i), n_base + n_novel);
        g.output(&format!("loss.novel{i}"), loss);
        novel_logits.push(l);
        loss_novel.push(loss);
    }
    let mut over_logits = Vec::new();
    let mut loss_over = Vec::new();
    for i in 0..cfg.over_heads() {
        let l = g.linear(features, &over_weight(i), None);
        g.output(&format!("logits.over{i}"), l);
        let both = g.concat_cols(&[base_logits, l]);
        let loss = soft_ce(
            &mut g,
            both,
            &target_over(i),
            n_base + n_novel * cfg.overcluster_factor,
        );
        g.output(&format!("loss.over{i}"), loss);
        over_logits.push(l);
        loss_over.push(loss);
    }
    let mut loss = loss_novel[0];
    for &l in loss_novel[1..].iter().chain(&loss_over) {
        loss = g.add(loss, l);
    }
    g.output("loss", loss);
    let loss_base_only = soft_ce(&mut g, base_logits, TARGET_BASE, n_base);
    g.output("loss.base_only", loss_base_only);

    let nodes = Nodes {
        features,
        base_logits,
        novel_logits,
        over_logits,
        loss_novel,
        loss_over,
        loss,
        loss_base_only,
    };
    (g.build(), nodes)
}

/// One forward/backward pass over a single cloud.
pub struct Pass<'m> {
    model: &'m Model,
    session: Session<'m>,
}

impl Pass<'_> {
    pub fn features(&mut self, params: &ParamStore) -> Result<Tensor> {
        self.session
            .compute(params, self.model.nodes.features)
            .cloned()
    }

    pub fn base_logits(&mut self, params: &ParamStore) -> Result<Tensor> {
        self.session
            .compute(params, self.model.nodes.base_logits)
            .cloned()
    }

    pub fn novel_logits(&mut self, params: &ParamStore, head: usize) -> Result<Tensor> {
        let id = *self
            .model
            .nodes
            .novel_logits
            .get(head)
            .ok_or_else(|| invalid(format!("no novel head {head}")))?;
        self.session.compute(params, id).cloned()
    }

    pub fn over_logits(&mut self, params: &ParamStore, head: usize) -> Result<Tensor> {
        let id = *self
            .model
            .nodes
            .over_logits
            .get(head)
            .ok_or_else(|| invalid(format!("no over-clustering head {head}")))?;
        self.session.compute(params, id).cloned()
    }

    pub fn feed_target(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.session.feed(name, t)
    }

    /// Per-head swapped-loss terms: `(novel heads, over-clustering heads)`.
    pub fn head_losses(&mut self, params: &ParamStore) -> Result<(Vec<f64>, Vec<f64>)> {
        let nodes = &self.model.nodes;
        let mut novel = Vec::new();
        for &id in &nodes.loss_novel {
            novel.push(self.session.compute(params, id)?.item());
        }
        let mut over = Vec::new();
        for &id in &nodes.loss_over {
            over.push(self.session.compute(params, id)?.item());
        }
        Ok((novel, over))
    }

    /// Total objective; needs every `target.novel*` and `target.over*` fed.
    pub fn loss(&mut self, params: &ParamStore) -> Result<f64> {
        Ok(self.session.compute(params, self.model.nodes.loss)?.item())
    }

    pub fn base_only_loss(&mut self, params: &ParamStore) -> Result<f64> {
        Ok(self
            .session
            .compute(params, self.model.nodes.loss_base_only)?
            .item())
    }

    /// Adds the gradient of the total objective to `params`.
    pub fn backward(&mut self, params: &mut ParamStore) -> Result<()> {
        self.session.compute(params, self.model.nodes.loss)?;
        self.session.backward(params, self.model.nodes.loss)
    }

    pub fn backward_base_only(&mut self, params: &mut ParamStore) -> Result<()> {
        self.session
            .compute(params, self.model.nodes.loss_base_only)?;
        self.session
            .backward(params, self.model.nodes.loss_base_only)
    }

    /// Adds the gradient of one novel head's loss only.
    pub fn backward_novel_head(&mut self, params: &mut ParamStore, head: usize) -> Result<()> {
        let id = self.model.nodes.loss_novel[head];
        self.session.compute(params, id)?;
        self.session.backward(params, id)
    }
}

pub fn coords_tensor(coords: &[[f64; 3]]) -> Tensor {
    Tensor::matrix(coords.len(), 3, coords.iter().flatten().copied().collect()).expect("m >= 1")
}

/// Indices of the `k` nearest points of each point (itself included),
/// ordered by distance then index.
pub fn knn_indices(coords: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let m = coords.len();
    let k = k.min(m);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(m);
    coords
        .iter()
        .map(|p| {
            order.clear();
            order.extend(coords.iter().enumerate().map(|(j, q)| {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                (d, j)
            }));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < m {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            let mut nn = order[..k].to_vec();
            nn.sort_by(cmp);
            nn.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Row-stochastic `m × m` operator averaging each point's `k` neighbours.
pub fn knn_mean_matrix(coords: &[[f64; 3]], k: usize) -> Tensor {
    let m = coords.len();
    let mut data = vec![0.0; m * m];
    for (i, nn) in knn_indices(coords, k).into_iter().enumerate() {
        let w = 1.0 / nn.len() as f64;
        for j in nn {
            data[i * m + j] = w;
        }
    }
    Tensor::matrix(m, m, data).expect("m >= 1")
}
