//! Attention meta-learner: per-learner scores `s_i = w_i·y_i + b_i`, softmax
//! attention over learners, then an MLP on the attention-weighted outputs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::diffmath::ops::{self, ReluRule};
use crate::diffmath::{
    derive_seed, glorot_uniform, glorot_with_fans, rng_stream, AdamConfig, AdamState, Checkpoint,
    Matrix, ParamStore, Rng,
};
use crate::error::{Error, Result};
use crate::gnn::GnnKind;

pub const MLP_WIDTHS: [usize; 2] = [128, 64];
pub const CHECKPOINT_KIND: &str = "meta";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            dropout: 0.2,
            seed: 0,
        }
    }
}

/// Result of one meta-learner pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutput {
    pub scores: Vec<f64>,
    pub alphas: Vec<f64>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

impl MetaOutput {
    pub fn label(&self) -> Label {
        Label::from_probs(&self.probs)
    }
}

struct MetaTape {
    y: Vec<f64>,
    out: MetaOutput,
    psi: Matrix,
    /// Input, pre-activation and dropout mask of each MLP layer.
    layers: Vec<(Matrix, Matrix, Option<Matrix>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetaMeta {
    kinds: Vec<GnnKind>,
    config: MetaConfig,
    epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearner {
    /// Learner order of the input pairs.
    pub kinds: Vec<GnnKind>,
    pub config: MetaConfig,
    pub epoch_loss: Vec<f64>,
    params: ParamStore,
}

fn mlp_name(l: usize, p: &str) -> String {
    format!("mlp.{l}.{p}")
}

impl MetaLearner {
    pub fn init(kinds: &[GnnKind], config: MetaConfig) -> Self {
        let n = kinds.len();
        let mut rng = rng_stream(derive_seed(config.seed, &[0x3e7a]), 0);
        let mut params = ParamStore::new();
        // each w_i maps a 2-vector to one score
        params.insert("att.w", glorot_with_fans(n, 2, 2, 1, &mut rng));
        params.insert("att.b", Matrix::zeros(1, n));
        let dims = [2 * n, MLP_WIDTHS[0], MLP_WIDTHS[1], 2];
        for l in 0..3 {
            params.insert(
                mlp_name(l, "w"),
                glorot_uniform(dims[l], dims[l + 1], &mut rng),
            );
            params.insert(mlp_name(l, "b"), Matrix::zeros(1, dims[l + 1]));
        }
        MetaLearner {
            kinds: kinds.to_vec(),
            config,
            epoch_loss: Vec::new(),
            params,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_learners(&self) -> usize {
        self.kinds.len()
    }

    fn tape(&self, y: &[f64], mut rng: Option<&mut Rng>) -> Result<MetaTape> {
        let n = self.num_learners();
        if y.len() != 2 * n {
            return Err(Error::shape(format!(
                "meta input has {} values, expected {} for {n} learners",
                y.len(),
                2 * n
            )));
        }
        let w = self.params.get("att.w");
        let b = self.params.get("att.b");
        let scores: Vec<f64> = (0..n)
            .map(|i| w[(i, 0)] * y[2 * i] + w[(i, 1)] * y[2 * i + 1] + b[(0, i)])
            .collect();
        let alphas = ops::softmax(&scores);
        let psi_vals: Vec<f64> = (0..2 * n).map(|j| alphas[j / 2] * y[j]).collect();
        let psi = Matrix::row_vector(&psi_vals);
        let mut h = psi.clone();
        let mut layers = Vec::with_capacity(3);
        for l in 0..3 {
            let pre = ops::linear(
                &h,
                self.params.get(&mlp_name(l, "w")),
                self.params.get(&mlp_name(l, "b")),
            )?;
            if l < 2 {
                let act = ops::relu(&pre);
                let (dropped, mask) = ops::dropout(&act, self.config.dropout, rng.as_deref_mut())?;
                layers.push((h, pre, mask));
                h = dropped;
            } else {
                layers.push((h, pre.clone(), None));
                h = pre;
            }
        }
        let logits = [h[(0, 0)], h[(0, 1)]];
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("meta-learner logits".into()));
        }
        let p = ops::softmax(&logits);
        Ok(MetaTape {
            y: y.to_vec(),
            out: MetaOutput {
                scores,
                alphas,
                logits,
                probs: [p[0], p[1]],
            },
            psi,
            layers,
        })
    }

    /// Eval-mode pass over the concatenated base-learner probabilities.
    pub fn attention_forward(&self, y: &[f64]) -> Result<MetaOutput> {
        Ok(self.tape(y, None)?.out)
    }

    /// Parameter gradients (accumulated into the store, scaled) and the input gradient.
    fn backward(&mut self, tape: &MetaTape, dlogits: [f64; 2], scale: f64) -> Result<Vec<f64>> {
        let n = self.num_learners();
        let mut d = Matrix::row_vector(&[dlogits[0] * scale, dlogits[1] * scale]);
        for l in (0..3).rev() {
            let (input, pre, mask) = &tape.layers[l];
            if l < 2 {
                d = ops::dropout_backward(&d, mask.as_ref())?;
                d = ops::relu_backward(pre, &d, ReluRule::Plain)?;
            }
            let g = ops::linear_backward(input, self.params.get(&mlp_name(l, "w")), &d)?;
            self.params.accumulate(&mlp_name(l, "w"), &g.dw)?;
            self.params.accumulate(&mlp_name(l, "b"), &g.db)?;
            d = g.dx;
        }
        debug_assert_eq!(d.cols(), tape.psi.cols());
        let dpsi = d.as_slice();
        let (y, alphas) = (&tape.y, &tape.out.alphas);
        let mut dy: Vec<f64> = (0..2 * n).map(|j| alphas[j / 2] * dpsi[j]).collect();
        let dalpha: Vec<f64> = (0..n)
            .map(|i| dpsi[2 * i] * y[2 * i] + dpsi[2 * i + 1] * y[2 * i + 1])
            .collect();
        let ds = ops::softmax_backward(alphas, &dalpha);
        let w = self.params.get("att.w").clone();
        let mut dw = Matrix::zeros(n, 2);
        for i in 0..n {
            for c in 0..2 {
                dw[(i, c)] = ds[i] * y[2 * i + c];
                dy[2 * i + c] += ds[i] * w[(i, c)];
            }
        }
        self.params.accumulate("att.w", &dw)?;
        self.params.accumulate("att.b", &Matrix::row_vector(&ds))?;
        Ok(dy)
    }

    /// Cross-entropy of one row; gradients are added into the store. Returns the loss
    /// and the gradient with respect to the input row.
    pub fn loss_and_grad(
        &mut self,
        y: &[f64],
        label: Label,
        rng: Option<&mut Rng>,
    ) -> Result<(f64, Vec<f64>)> {
        let tape = self.tape(y, rng)?;
        let (loss, dl) = ops::cross_entropy(&tape.out.logits, label.index())?;
        let dy = self.backward(&tape, [dl[0], dl[1]], 1.0)?;
        Ok((loss, dy))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<serde_json::Value> {
        let meta = MetaMeta {
            kinds: self.kinds.clone(),
            config: self.config,
            epoch_loss: self.epoch_loss.clone(),
        };
        Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(meta).expect("plain data serializes"),
            &self.params,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<serde_json::Value>) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a meta checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let meta: MetaMeta = serde_json::from_value(ckpt.meta.clone())?;
        let params = ckpt.param_store();
        MetaLearner::init(&meta.kinds, meta.config)
            .params
            .check_layout(&params)?;
        Ok(MetaLearner {
            kinds: meta.kinds,
            config: meta.config,
            epoch_loss: meta.epoch_loss,
            params,
        })
    }
}

/// Trains attention and MLP jointly with Adam on cross-entropy over the rows of `y`.
pub fn train_meta(
    kinds: &[GnnKind],
    y: &Matrix,
    labels: &[Label],
    config: &MetaConfig,
) -> Result<MetaLearner> {
    if y.rows() != labels.len() || y.cols() != 2 * kinds.len() {
        return Err(Error::shape(format!(
            "meta dataset is {:?} with {} labels for {} learners",
            y.shape(),
            labels.len(),
            kinds.len()
        )));
    }
    if !(labels.contains(&Label::Benign) && labels.contains(&Label::Malicious)) {
        return Err(Error::Data(
            "meta dataset labels contain a single class".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut model = MetaLearner::init(kinds, *config);
    let mut adam = AdamState::new(
        AdamConfig::new(config.lr, config.weight_decay),
        &model.params,
    );
    let mut rng = rng_stream(derive_seed(config.seed, &[0x3e7a]), 1);
    let mut order: Vec<usize> = (0..y.rows()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &r in batch {
                let tape = model.tape(y.row(r), Some(&mut rng))?;
                let (loss, dl) = ops::cross_entropy(&tape.out.logits, labels[r].index())?;
                total += loss;
                model.backward(&tape, [dl[0], dl[1]], scale)?;
            }
            adam.step(&mut model.params)?;
        }
        model.epoch_loss.push(total / y.rows() as f64);
    }
    model.params.zero_grads();
    Ok(model)
}
