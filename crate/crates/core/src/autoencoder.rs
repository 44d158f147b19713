//! Symmetric MLP autoencoder (439 → 256 → 128 → 64 → 128 → 256 → 439) that
//! compresses block vectors into 64-wide node embeddings.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffmath::ops::{self, ReluRule};
use crate::diffmath::{
    derive_seed, glorot_uniform, rng_stream, AdamConfig, AdamState, Checkpoint, Matrix, ParamStore,
};
use crate::error::{Error, Result};
use crate::isa::{BlockVector, INSTR_DIM};

pub const LATENT_DIM: usize = 64;
pub const ENCODER_DIMS: [usize; 4] = [INSTR_DIM, 256, 128, LATENT_DIM];
pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    /// Seeded subsample size applied before the split; `None` trains on everything.
    pub max_vectors: Option<usize>,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            epochs: 5000,
            lr: 1e-4,
            batch_size: 64,
            val_fraction: 0.1,
            max_vectors: Some(256),
            seed: 0,
        }
    }
}

impl AeConfig {
    /// Shorter schedule used by tests and the default CLI profile.
    pub fn desk() -> Self {
        AeConfig {
            epochs: 500,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeHistory {
    pub epochs_run: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Validation MSE before training and after each epoch.
    pub val_mse: Vec<f64>,
}

impl AeHistory {
    pub fn initial_val_mse(&self) -> Option<f64> {
        self.val_mse.first().copied()
    }

    pub fn final_val_mse(&self) -> Option<f64> {
        self.val_mse.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AeMeta {
    config: AeConfig,
    history: AeHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    params: ParamStore,
    pub config: AeConfig,
    pub history: AeHistory,
}

struct LayerCache {
    input: Matrix,
    pre: Matrix,
    relu: bool,
}

fn layer_names(part: &str, i: usize) -> (String, String) {
    (format!("{part}.{i}.w"), format!("{part}.{i}.b"))
}

impl Autoencoder {
    /// Glorot-initialized, untrained model.
    pub fn init(seed: u64) -> Self {
        let mut rng = rng_stream(seed, 0);
        let mut params = ParamStore::new();
        for i in 0..3 {
            let (w, b) = layer_names("enc", i);
            params.insert(
                w,
                glorot_uniform(ENCODER_DIMS[i], ENCODER_DIMS[i + 1], &mut rng),
            );
            params.insert(b, Matrix::zeros(1, ENCODER_DIMS[i + 1]));
        }
        for i in 0..3 {
            let (w, b) = layer_names("dec", i);
            let (fan_in, fan_out) = (ENCODER_DIMS[3 - i], ENCODER_DIMS[2 - i]);
            params.insert(w, glorot_uniform(fan_in, fan_out, &mut rng));
            params.insert(b, Matrix::zeros(1, fan_out));
        }
        Autoencoder {
            params,
            config: AeConfig {
                seed,
                ..AeConfig::default()
            },
            history: AeHistory {
                epochs_run: 0,
                train_size: 0,
                val_size: 0,
                val_mse: Vec::new(),
            },
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn run(
        &self,
        part: &str,
        x: &Matrix,
        relu_last: bool,
        caches: Option<&mut Vec<LayerCache>>,
    ) -> Result<Matrix> {
        let mut h = x.clone();
        let mut caches = caches;
        for i in 0..3 {
            let (w, b) = layer_names(part, i);
            let pre = ops::linear(&h, self.params.get(&w), self.params.get(&b))?;
            let relu = i < 2 || relu_last;
            let out = if relu { ops::relu(&pre) } else { pre.clone() };
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache {
                    input: h,
                    pre,
                    relu,
                });
            }
            h = out;
        }
        Ok(h)
    }

    fn check_width(x: &Matrix) -> Result<()> {
        if x.cols() != INSTR_DIM {
            return Err(Error::shape(format!(
                "autoencoder input has width {}, expected {INSTR_DIM}",
                x.cols()
            )));
        }
        Ok(())
    }

    /// Encoder applied to each row of `x` (N × 439 → N × 64).
    pub fn encode_rows(&self, x: &Matrix) -> Result<Matrix> {
        Self::check_width(x)?;
        self.run("enc", x, true, None)
    }

    pub fn decode_rows(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != LATENT_DIM {
            return Err(Error::shape(format!(
                "latent width {} != {LATENT_DIM}",
                z.cols()
            )));
        }
        self.run("dec", z, false, None)
    }

    pub fn reconstruct_rows(&self, x: &Matrix) -> Result<Matrix> {
        self.decode_rows(&self.encode_rows(x)?)
    }

    pub fn encode(&self, v: &BlockVector) -> Result<Vec<f64>> {
        Ok(self.encode_rows(&Matrix::row_vector(&v.0))?.into_vec())
    }

    pub fn reconstruct(&self, v: &BlockVector) -> Result<Vec<f64>> {
        Ok(self.reconstruct_rows(&Matrix::row_vector(&v.0))?.into_vec())
    }

    /// Reconstruction MSE of a batch; gradients are accumulated into the parameter store.
    pub fn loss_and_grad(&mut self, x: &Matrix) -> Result<f64> {
        Self::check_width(x)?;
        let mut caches = Vec::with_capacity(6);
        let z = self.run("enc", x, true, Some(&mut caches))?;
        let x_hat = self.run("dec", &z, false, Some(&mut caches))?;
        let loss = ops::mse(x, &x_hat)?;
        let mut grad = ops::mse_grad(x, &x_hat)?;
        for (idx, cache) in caches.iter().enumerate().rev() {
            let (part, i) = if idx < 3 {
                ("enc", idx)
            } else {
                ("dec", idx - 3)
            };
            let (w, b) = layer_names(part, i);
            if cache.relu {
                grad = ops::relu_backward(&cache.pre, &grad, ReluRule::Plain)?;
            }
            let g = ops::linear_backward(&cache.input, self.params.get(&w), &grad)?;
            self.params.accumulate(&w, &g.dw)?;
            self.params.accumulate(&b, &g.db)?;
            grad = g.dx;
        }
        Ok(loss)
    }

    pub fn mse(&self, x: &Matrix) -> Result<f64> {
        ops::mse(x, &self.reconstruct_rows(x)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<serde_json::Value> {
        let meta = AeMeta {
            config: self.config,
            history: self.history.clone(),
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
                "expected autoencoder, found `{}`",
                ckpt.kind
            )));
        }
        let meta: AeMeta = serde_json::from_value(ckpt.meta.clone())?;
        let params = ckpt.param_store();
        Autoencoder::init(0).params.check_layout(&params)?;
        Ok(Autoencoder {
            params,
            config: meta.config,
            history: meta.history,
        })
    }
}

/// Trains on the given vectors with a seeded train/validation split, shuffled
/// mini-batches and Adam. Runs exactly `config.epochs` epochs.
pub fn train_autoencoder(vectors: &[BlockVector], config: &AeConfig) -> Result<Autoencoder> {
    if vectors.len() < 2 {
        return Err(Error::Data(format!(
            "autoencoder needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    if !(config.val_fraction > 0.0 && config.val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction {} not in (0,1)",
            config.val_fraction
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(bad) = vectors.iter().find(|v| v.0.len() != INSTR_DIM) {
        return Err(Error::shape(format!(
            "block vector of length {}",
            bad.0.len()
        )));
    }

    let mut order: Vec<usize> = (0..vectors.len()).collect();
    let mut split_rng = rng_stream(derive_seed(config.seed, &[1]), 0);
    order.shuffle(&mut split_rng);
    if let Some(cap) = config.max_vectors {
        order.truncate(cap.max(2));
    }
    let n_val =
        ((order.len() as f64 * config.val_fraction).round() as usize).clamp(1, order.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let gather = |idx: &[usize]| {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| vectors[i].0.as_slice()).collect();
        Matrix::from_rows(&rows)
    };
    let val = gather(val_idx)?;

    let mut model = Autoencoder::init(derive_seed(config.seed, &[0]));
    model.config = *config;
    let mut adam = AdamState::new(AdamConfig::new(config.lr, 0.0), &model.params);
    let mut shuffle_rng = rng_stream(derive_seed(config.seed, &[2]), 0);
    let mut train_order = train_idx.to_vec();
    let mut val_mse = Vec::with_capacity(config.epochs + 1);
    val_mse.push(model.mse(&val)?);

    for epoch in 0..config.epochs {
        train_order.shuffle(&mut shuffle_rng);
        for batch in train_order.chunks(config.batch_size) {
            let x = gather(batch)?;
            model.params.zero_grads();
            let loss = model.loss_and_grad(&x)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "autoencoder loss at epoch {epoch}"
                )));
            }
            adam.step(&mut model.params)?;
        }
        val_mse.push(model.mse(&val)?);
    }
    model.params.zero_grads();
    model.history = AeHistory {
        epochs_run: config.epochs,
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        val_mse,
    };
    log::debug!(
        "autoencoder: {} epochs, val mse {:?} -> {:?}",
        config.epochs,
        model.history.initial_val_mse(),
        model.history.final_val_mse()
    );
    Ok(model)
}
