//! Graph neural network base learners: GCN, GIN and GAT stacks with mean
//! readout, dropout and a linear two-class head.

pub mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{GraphData, Label};
use crate::diffmath::ops::{self, ReluRule};
use crate::diffmath::{
    derive_seed, glorot_uniform, glorot_with_fans, rng_stream, AdamConfig, AdamState, Checkpoint,
    Matrix, ParamStore, Rng,
};
use crate::error::{Error, Result};
use layers::{Adjacency, GatCache, GatParams, GcnCache, GinCache, GinParams};

pub const HIDDEN: usize = 64;
pub const NUM_LAYERS: usize = 3;
pub const NUM_CLASSES: usize = 2;
pub const CHECKPOINT_KIND: &str = "gnn";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GnnKind {
    Gcn,
    Gin,
    Gat,
}

impl GnnKind {
    /// Fixed base-learner order used wherever outputs are concatenated.
    pub const ALL: [GnnKind; 3] = [GnnKind::Gcn, GnnKind::Gin, GnnKind::Gat];

    pub fn name(self) -> &'static str {
        match self {
            GnnKind::Gcn => "GCN",
            GnnKind::Gin => "GIN",
            GnnKind::Gat => "GAT",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for GnnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GnnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GCN" => Ok(GnnKind::Gcn),
            "GIN" => Ok(GnnKind::Gin),
            "GAT" => Ok(GnnKind::Gat),
            _ => Err(Error::Config(format!("unknown model kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Graphs per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    /// Add reverse messages for every edge.
    pub symmetrize: bool,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            epochs: 50,
            lr: 1e-4,
            weight_decay: 5e-4,
            dropout: 0.2,
            batch_size: 1,
            symmetrize: false,
            seed: 0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GnnHistory {
    /// Mean training cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Ids of the graphs the model was fitted on, in input order.
    pub train_ids: Vec<String>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

impl Prediction {
    fn from_logits(logits: [f64; 2]) -> Self {
        let p = ops::softmax(&logits);
        Prediction {
            logits,
            probs: [p[0], p[1]],
        }
    }

    pub fn label(&self) -> Label {
        Label::from_probs(&self.probs)
    }
}

enum LayerCache {
    Gcn(GcnCache),
    /// GIN output is passed through a ReLU between layers; keep its input.
    Gin(GinCache, Matrix),
    Gat(GatCache),
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    adj: Adjacency,
    ew: Vec<f64>,
    layers: Vec<LayerCache>,
    pooled: Matrix,
    mask: Option<Matrix>,
    dropped: Matrix,
    pub prediction: Prediction,
}

impl Tape {
    /// GAT attention coefficients `(source, edge index, alpha)` of node `v` in layer `l`.
    pub fn attention(&self, l: usize, v: usize) -> Option<Vec<(usize, Option<usize>, f64)>> {
        match self.layers.get(l)? {
            LayerCache::Gat(c) => Some(c.attention(v).collect()),
            _ => None,
        }
    }
}

/// Gradients of a scalar built from the logits.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dx: Matrix,
    pub dew: Vec<f64>,
    pub dparams: BTreeMap<String, Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GnnMeta {
    kind: GnnKind,
    in_dim: usize,
    config: GnnConfig,
    history: GnnHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    pub kind: GnnKind,
    pub in_dim: usize,
    pub config: GnnConfig,
    pub history: GnnHistory,
    params: ParamStore,
}

fn pname(l: usize, p: &str) -> String {
    format!("layer{l}.{p}")
}

impl GnnModel {
    /// Glorot-initialized model for `in_dim`-wide node features.
    pub fn init(kind: GnnKind, in_dim: usize, config: GnnConfig) -> Self {
        let mut rng = rng_stream(derive_seed(config.seed, &[kind.index() as u64]), 0);
        let mut params = ParamStore::new();
        for l in 0..NUM_LAYERS {
            let d_in = if l == 0 { in_dim } else { HIDDEN };
            match kind {
                GnnKind::Gcn => {
                    params.insert(pname(l, "w"), glorot_uniform(d_in, HIDDEN, &mut rng))
                }
                GnnKind::Gin => {
                    params.insert(pname(l, "w1"), glorot_uniform(d_in, HIDDEN, &mut rng));
                    params.insert(pname(l, "b1"), Matrix::zeros(1, HIDDEN));
                    params.insert(pname(l, "w2"), glorot_uniform(HIDDEN, HIDDEN, &mut rng));
                    params.insert(pname(l, "b2"), Matrix::zeros(1, HIDDEN));
                }
                GnnKind::Gat => {
                    params.insert(pname(l, "w"), glorot_uniform(d_in, HIDDEN, &mut rng));
                    params.insert(
                        pname(l, "a_dst"),
                        glorot_with_fans(1, HIDDEN, 1, HIDDEN, &mut rng),
                    );
                    params.insert(
                        pname(l, "a_src"),
                        glorot_with_fans(1, HIDDEN, 1, HIDDEN, &mut rng),
                    );
                }
            }
        }
        params.insert("head.w", glorot_uniform(HIDDEN, NUM_CLASSES, &mut rng));
        params.insert("head.b", Matrix::zeros(1, NUM_CLASSES));
        GnnModel {
            kind,
            in_dim,
            config,
            history: GnnHistory::default(),
            params,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn layer_param_names(&self, l: usize) -> Vec<String> {
        let parts: &[&str] = match self.kind {
            GnnKind::Gcn => &["w"],
            GnnKind::Gin => &["w1", "b1", "w2", "b2"],
            GnnKind::Gat => &["w", "a_dst", "a_src"],
        };
        parts.iter().map(|p| pname(l, p)).collect()
    }

    fn gin_params(&self, l: usize) -> GinParams<'_> {
        GinParams {
            w1: self.params.get(&pname(l, "w1")),
            b1: self.params.get(&pname(l, "b1")),
            w2: self.params.get(&pname(l, "w2")),
            b2: self.params.get(&pname(l, "b2")),
        }
    }

    fn gat_params(&self, l: usize) -> GatParams<'_> {
        GatParams {
            w: self.params.get(&pname(l, "w")),
            a_dst: self.params.get(&pname(l, "a_dst")),
            a_src: self.params.get(&pname(l, "a_src")),
        }
    }

    /// Full forward pass. `ew = None` means every edge has weight 1; passing a
    /// dropout rng selects train mode.
    pub fn forward_tape(
        &self,
        g: &GraphData,
        ew: Option<&[f64]>,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Tape> {
        if g.x.cols() != self.in_dim {
            return Err(Error::shape(format!(
                "graph `{}` has {}-wide features, model expects {}",
                g.id,
                g.x.cols(),
                self.in_dim
            )));
        }
        let ew = match ew {
            Some(w) => w.to_vec(),
            None => vec![1.0; g.num_edges()],
        };
        let adj = Adjacency::new(g.num_nodes(), &g.edges, self.config.symmetrize)?;
        let mut h = g.x.clone();
        let mut caches = Vec::with_capacity(NUM_LAYERS);
        for l in 0..NUM_LAYERS {
            let (out, cache) = match self.kind {
                GnnKind::Gcn => {
                    let (o, c) =
                        layers::gcn_forward(&h, &adj, &ew, self.params.get(&pname(l, "w")))?;
                    (o, LayerCache::Gcn(c))
                }
                GnnKind::Gin => {
                    let (o, c) = layers::gin_forward(&h, &adj, &ew, &self.gin_params(l))?;
                    (ops::relu(&o), LayerCache::Gin(c, o))
                }
                GnnKind::Gat => {
                    let (o, c) = layers::gat_forward(&h, &adj, &ew, &self.gat_params(l), true)?;
                    (o, LayerCache::Gat(c))
                }
            };
            caches.push(cache);
            h = out;
        }
        let pooled = layers::readout_mean(&h)?;
        let (dropped, mask) = ops::dropout(&pooled, self.config.dropout, dropout_rng)?;
        let z = ops::linear(
            &dropped,
            self.params.get("head.w"),
            self.params.get("head.b"),
        )?;
        let logits = [z[(0, 0)], z[(0, 1)]];
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("logits of graph `{}`", g.id)));
        }
        Ok(Tape {
            adj,
            ew,
            layers: caches,
            pooled,
            mask,
            dropped,
            prediction: Prediction::from_logits(logits),
        })
    }

    /// Eval-mode prediction.
    pub fn predict(&self, g: &GraphData, ew: Option<&[f64]>) -> Result<Prediction> {
        Ok(self.forward_tape(g, ew, None)?.prediction)
    }

    /// Backpropagates `dlogits` through a recorded forward pass.
    pub fn backward(&self, tape: &Tape, dlogits: [f64; 2], rule: ReluRule) -> Result<Gradients> {
        let mut dparams = BTreeMap::new();
        let dz = Matrix::row_vector(&dlogits);
        let head = ops::linear_backward(&tape.dropped, self.params.get("head.w"), &dz)?;
        dparams.insert("head.w".to_string(), head.dw);
        dparams.insert("head.b".to_string(), head.db);
        let dpooled = ops::dropout_backward(&head.dx, tape.mask.as_ref())?;
        let mut dh = layers::readout_mean_backward(tape.adj.num_nodes(), &dpooled);
        let mut dew = vec![0.0; tape.ew.len()];
        debug_assert_eq!(tape.pooled.cols(), HIDDEN);
        for l in (0..NUM_LAYERS).rev() {
            let grads = match &tape.layers[l] {
                LayerCache::Gcn(c) => layers::gcn_backward(
                    c,
                    &tape.adj,
                    &tape.ew,
                    self.params.get(&pname(l, "w")),
                    &dh,
                    rule,
                )?,
                LayerCache::Gin(c, pre) => {
                    let d = ops::relu_backward(pre, &dh, rule)?;
                    layers::gin_backward(c, &tape.adj, &tape.ew, &self.gin_params(l), &d, rule)?
                }
                LayerCache::Gat(c) => {
                    layers::gat_backward(c, &tape.ew, &self.gat_params(l), &dh, rule)?
                }
            };
            for (name, g) in self.layer_param_names(l).into_iter().zip(grads.dparams) {
                dparams.insert(name, g);
            }
            for (acc, d) in dew.iter_mut().zip(&grads.dew) {
                *acc += d;
            }
            dh = grads.dh;
        }
        Ok(Gradients {
            dx: dh,
            dew,
            dparams,
        })
    }

    /// Gradient of one class logit with respect to edge weights and features.
    pub fn logit_gradients(
        &self,
        g: &GraphData,
        ew: Option<&[f64]>,
        class: usize,
        rule: ReluRule,
    ) -> Result<(Prediction, Gradients)> {
        let tape = self.forward_tape(g, ew, None)?;
        let mut d = [0.0; 2];
        d[class] = 1.0;
        let grads = self.backward(&tape, d, rule)?;
        Ok((tape.prediction, grads))
    }

    /// Cross-entropy of one graph; parameter gradients are added into the store scaled by `scale`.
    fn accumulate_loss(&mut self, g: &GraphData, rng: &mut Rng, scale: f64) -> Result<f64> {
        let tape = self.forward_tape(g, None, Some(rng))?;
        let (loss, dl) = ops::cross_entropy(&tape.prediction.logits, g.label.index())?;
        let grads = self.backward(&tape, [dl[0] * scale, dl[1] * scale], ReluRule::Plain)?;
        for (name, d) in &grads.dparams {
            self.params.accumulate(name, d)?;
        }
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<serde_json::Value> {
        let meta = GnnMeta {
            kind: self.kind,
            in_dim: self.in_dim,
            config: self.config,
            history: self.history.clone(),
        };
        Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(meta).expect("plain data serializes"),
            &self.params,
        )
    }

    /// Restores a model, optionally insisting on its kind.
    pub fn from_checkpoint(
        ckpt: &Checkpoint<serde_json::Value>,
        expect: Option<GnnKind>,
    ) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a gnn checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let meta: GnnMeta = serde_json::from_value(ckpt.meta.clone())?;
        if let Some(k) = expect {
            if k != meta.kind {
                return Err(Error::Checkpoint(format!(
                    "expected a {k} model, found {}",
                    meta.kind
                )));
            }
        }
        let params = ckpt.param_store();
        GnnModel::init(meta.kind, meta.in_dim, meta.config)
            .params
            .check_layout(&params)?;
        Ok(GnnModel {
            kind: meta.kind,
            in_dim: meta.in_dim,
            config: meta.config,
            history: meta.history,
            params,
        })
    }
}

/// Trains one base learner with Adam on cross-entropy.
pub fn train_gnn(kind: GnnKind, graphs: &[&GraphData], config: &GnnConfig) -> Result<GnnModel> {
    config.validate()?;
    let first = graphs
        .first()
        .ok_or_else(|| Error::Data("no training graphs".into()))?;
    let mut seen = [false; 2];
    for g in graphs {
        seen[g.label.index()] = true;
    }
    if !(seen[0] && seen[1]) {
        return Err(Error::Data("training graphs contain a single class".into()));
    }
    let mut model = GnnModel::init(kind, first.x.cols(), *config);
    model.history.train_ids = graphs.iter().map(|g| g.id.clone()).collect();
    let mut adam = AdamState::new(
        AdamConfig::new(config.lr, config.weight_decay),
        &model.params,
    );
    let mut rng = rng_stream(derive_seed(config.seed, &[kind.index() as u64]), 1);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                total += model.accumulate_loss(graphs[i], &mut rng, scale)?;
            }
            adam.step(&mut model.params)?;
        }
        let mean = total / graphs.len() as f64;
        log::debug!("{kind} epoch {epoch}: loss {mean:.6}");
        model.history.epoch_loss.push(mean);
    }
    model.params.zero_grads();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check, Coords};
    use rand::Rng as _;

    fn random_graph(seed: u64, n: usize, d: usize, label: Label) -> GraphData {
        let mut rng = rng_stream(seed, 9);
        let mut edges = Vec::new();
        for s in 0..n {
            for t in 0..n {
                if s != t && rng.gen_bool(0.3) {
                    edges.push((s, t));
                }
            }
        }
        let x =
            Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        GraphData::new(format!("r{seed}"), label, edges, x).unwrap()
    }

    #[test]
    fn shapes_and_probabilities() {
        let g = random_graph(1, 6, 8, Label::Benign);
        for kind in GnnKind::ALL {
            let model = GnnModel::init(kind, 8, GnnConfig::default());
            let tape = model.forward_tape(&g, None, None).unwrap();
            assert_eq!(tape.pooled.shape(), (1, HIDDEN));
            let p = tape.prediction.probs;
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert_eq!(model.predict(&g, None).unwrap(), tape.prediction);
        }
    }

    #[test]
    fn unit_edge_weights_are_a_no_op() {
        let g = random_graph(2, 7, 5, Label::Benign);
        let ones = vec![1.0; g.num_edges()];
        for kind in GnnKind::ALL {
            let model = GnnModel::init(kind, 5, GnnConfig::default());
            let a = model.predict(&g, None).unwrap();
            let b = model.predict(&g, Some(&ones)).unwrap();
            assert_eq!(a.logits[0].to_bits(), b.logits[0].to_bits());
            assert_eq!(a.logits[1].to_bits(), b.logits[1].to_bits());
        }
    }

    /// Dense reference GCN: `relu(Â H W)` with `Â_ij = 1/sqrt(d_i d_j)` for each incoming edge and the self-loop.
    #[test]
    fn gcn_matches_dense_reference() {
        let g = random_graph(3, 6, 4, Label::Benign);
        let model = GnnModel::init(GnnKind::Gcn, 4, GnnConfig::default());
        let n = g.num_nodes();
        let mut deg = vec![1.0; n];
        for &(_, d) in &g.edges {
            deg[d] += 1.0;
        }
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = 1.0 / deg[i];
        }
        for &(s, d) in &g.edges {
            a[(d, s)] += 1.0 / (deg[d] * deg[s]).sqrt();
        }
        let mut h = g.x.clone();
        for l in 0..NUM_LAYERS {
            h = ops::relu(
                &a.matmul(&h.matmul(model.params.get(&pname(l, "w"))).unwrap())
                    .unwrap(),
            );
        }
        let pooled = h.col_means().unwrap();
        let z = ops::linear(
            &pooled,
            model.params.get("head.w"),
            model.params.get("head.b"),
        )
        .unwrap();
        let p = model.predict(&g, None).unwrap();
        assert!((p.logits[0] - z[(0, 0)]).abs() < 1e-12);
        assert!((p.logits[1] - z[(0, 1)]).abs() < 1e-12);
    }

    #[test]
    fn relabeling_nodes_preserves_prediction() {
        let g = random_graph(4, 6, 5, Label::Malicious);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut x = Matrix::zeros(6, 5);
        for (old, &new) in perm.iter().enumerate() {
            x.row_mut(new).copy_from_slice(g.x.row(old));
        }
        let edges = g.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        let h = GraphData::new("p", g.label, edges, x).unwrap();
        for kind in GnnKind::ALL {
            let model = GnnModel::init(kind, 5, GnnConfig::default());
            let a = model.predict(&g, None).unwrap();
            let b = model.predict(&h, None).unwrap();
            assert!((a.logits[0] - b.logits[0]).abs() < 1e-12);
            assert!((a.logits[1] - b.logits[1]).abs() < 1e-12);
        }
    }

    /// Loss of one graph as a function of parameters plus `x` and `ew`.
    fn model_grad_error(kind: GnnKind, seed: u64) -> f64 {
        let g = random_graph(seed, 5, 6, Label::from_index((seed % 2) as usize).unwrap());
        let model = GnnModel::init(
            kind,
            6,
            GnnConfig {
                seed,
                ..GnnConfig::default()
            },
        );
        let mut rng = rng_stream(seed, 3);
        let ew: Vec<f64> = (0..g.num_edges())
            .map(|_| rng.gen_range(0.2..1.0))
            .collect();
        let tape = model.forward_tape(&g, Some(&ew), None).unwrap();
        let (_, dl) = ops::cross_entropy(&tape.prediction.logits, g.label.index()).unwrap();
        let grads = model
            .backward(&tape, [dl[0], dl[1]], ReluRule::Plain)
            .unwrap();
        let mut point = model.params.clone();
        for (name, d) in &grads.dparams {
            point.accumulate(name, d).unwrap();
        }
        point.insert("input.x", g.x.clone());
        point.insert("input.ew", Matrix::row_vector(&ew));
        point.accumulate("input.x", &grads.dx).unwrap();
        point
            .accumulate("input.ew", &Matrix::row_vector(&grads.dew))
            .unwrap();
        let f = |ps: &ParamStore| -> Result<f64> {
            let mut m = model.clone();
            for (name, p) in ps.iter() {
                if m.params.contains(name) {
                    *m.params.value_mut(name) = p.value.clone();
                }
            }
            let mut gg = g.clone();
            gg.x = ps.get("input.x").clone();
            let p = m.predict(&gg, Some(ps.get("input.ew").as_slice()))?;
            Ok(ops::cross_entropy(&p.logits, g.label.index())?.0)
        };
        grad_check(
            f,
            &point,
            1e-5,
            Coords::Sample {
                per_param: 12,
                seed,
            },
        )
        .unwrap()
        .max_rel_error
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        for kind in GnnKind::ALL {
            for seed in 0..3 {
                let err = model_grad_error(kind, seed);
                assert!(err < 1e-4, "{kind} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn training_rejects_single_class_and_is_deterministic() {
        let a = random_graph(10, 5, 4, Label::Benign);
        let b = random_graph(11, 6, 4, Label::Benign);
        let c = random_graph(12, 4, 4, Label::Malicious);
        assert!(train_gnn(GnnKind::Gcn, &[&a, &b], &GnnConfig::default()).is_err());
        let cfg = GnnConfig {
            epochs: 3,
            seed: 7,
            ..GnnConfig::default()
        };
        for kind in GnnKind::ALL {
            let m1 = train_gnn(kind, &[&a, &b, &c], &cfg).unwrap();
            let m2 = train_gnn(kind, &[&a, &b, &c], &cfg).unwrap();
            assert_eq!(m1.history.epoch_loss.len(), 3);
            assert_eq!(
                m1.to_checkpoint().to_string().unwrap(),
                m2.to_checkpoint().to_string().unwrap()
            );
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let a = random_graph(10, 5, 4, Label::Benign);
        let c = random_graph(12, 4, 4, Label::Malicious);
        let cfg = GnnConfig {
            epochs: 0,
            seed: 2,
            ..GnnConfig::default()
        };
        let m = train_gnn(GnnKind::Gat, &[&a, &c], &cfg).unwrap();
        assert_eq!(m.params, GnnModel::init(GnnKind::Gat, 4, cfg).params);
    }

    #[test]
    fn checkpoint_round_trip_and_kind_check() {
        let model = GnnModel::init(GnnKind::Gin, 3, GnnConfig::default());
        let text = model.to_checkpoint().to_string().unwrap();
        let ckpt = Checkpoint::parse(&text, CHECKPOINT_KIND).unwrap();
        assert_eq!(
            GnnModel::from_checkpoint(&ckpt, Some(GnnKind::Gin)).unwrap(),
            model
        );
        assert!(GnnModel::from_checkpoint(&ckpt, Some(GnnKind::Gat)).is_err());
    }
}
