//! Stacked generalization over the GNN base learners: out-of-fold meta
//! features, the attention meta-learner, full-set retraining and prediction.

pub mod meta;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{stratified_kfold, GraphData, Label};
use crate::diffmath::{derive_seed, Matrix};
use crate::error::{Error, Result};
use crate::gnn::{train_gnn, GnnConfig, GnnKind, GnnModel, Prediction};
use crate::par::map_jobs;
pub use meta::{train_meta, MetaConfig, MetaLearner, MetaOutput};

const FOLD_TAG: u64 = 0xf01d;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short checksum of a learner order, stored wherever outputs are concatenated.
pub fn kind_order_checksum(kinds: &[GnnKind]) -> String {
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    sha256_hex(names.join(",").as_bytes())[..16].to_string()
}

/// Seed for the base models of fold `f`; `None` is the full-set retraining.
pub fn base_seed(seed: u64, fold: Option<usize>) -> u64 {
    derive_seed(seed, &[fold.map_or(0, |f| f as u64 + 1)])
}

/// One out-of-fold base model, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldModelInfo {
    pub kind: GnnKind,
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub holdout_ids: Vec<String>,
    pub holdout_accuracy: f64,
    /// SHA-256 of the model checkpoint text.
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    pub kinds: Vec<GnnKind>,
    /// Row `r` holds `[p_benign, p_malicious]` of each learner, in `kinds` order.
    pub y: Matrix,
    pub labels: Vec<Label>,
    pub ids: Vec<String>,
    /// Fold of each row.
    pub folds: Vec<usize>,
    pub fold_models: Vec<FoldModelInfo>,
}

impl MetaDataset {
    /// Structural and provenance checks: shape, probability pairs, one row per
    /// graph, and no row predicted by a model that saw that graph.
    pub fn audit(&self) -> Result<()> {
        let n = self.kinds.len();
        let rows = self.ids.len();
        if self.y.shape() != (rows, 2 * n) || self.labels.len() != rows || self.folds.len() != rows
        {
            return Err(Error::Data(format!(
                "meta dataset is {:?} with {rows} ids, {} labels, {} folds",
                self.y.shape(),
                self.labels.len(),
                self.folds.len()
            )));
        }
        let unique: BTreeSet<&str> = self.ids.iter().map(String::as_str).collect();
        if unique.len() != rows {
            return Err(Error::Data("meta dataset repeats a graph".into()));
        }
        for r in 0..rows {
            for i in 0..n {
                let s = self.y[(r, 2 * i)] + self.y[(r, 2 * i + 1)];
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::Data(format!(
                        "row {r} learner {i} probabilities sum to {s}"
                    )));
                }
            }
        }
        let by_key: BTreeMap<(GnnKind, usize), &FoldModelInfo> = self
            .fold_models
            .iter()
            .map(|m| ((m.kind, m.fold), m))
            .collect();
        for (r, id) in self.ids.iter().enumerate() {
            for &kind in &self.kinds {
                let info = by_key.get(&(kind, self.folds[r])).ok_or_else(|| {
                    Error::Data(format!(
                        "no {kind} model recorded for fold {}",
                        self.folds[r]
                    ))
                })?;
                if info.train_ids.iter().any(|t| t == id) {
                    return Err(Error::Data(format!(
                        "{kind} fold {} trained on `{id}`",
                        info.fold
                    )));
                }
                if !info.holdout_ids.iter().any(|t| t == id) {
                    return Err(Error::Data(format!(
                        "`{id}` missing from {kind} fold {} holdout",
                        info.fold
                    )));
                }
            }
        }
        Ok(())
    }

    /// [`audit`](Self::audit) plus a check that the rows are exactly `train_ids`.
    pub fn audit_against(&self, train_ids: &[String]) -> Result<()> {
        self.audit()?;
        let have: BTreeSet<&String> = self.ids.iter().collect();
        let want: BTreeSet<&String> = train_ids.iter().collect();
        if have != want || train_ids.len() != self.ids.len() {
            return Err(Error::Data(
                "meta dataset rows differ from the training split".into(),
            ));
        }
        Ok(())
    }

    /// `(kind, fold, holdout accuracy)` of every fold model.
    pub fn fold_accuracy(&self) -> Vec<(GnnKind, usize, f64)> {
        self.fold_models
            .iter()
            .map(|m| (m.kind, m.fold, m.holdout_accuracy))
            .collect()
    }
}

/// Out-of-fold predictions of every learner kind: for each fold `f` a model
/// trained on the other folds predicts fold `f`.
pub fn build_meta_dataset(
    graphs: &[GraphData],
    kinds: &[GnnKind],
    k: usize,
    config: &GnnConfig,
    seed: u64,
    jobs: usize,
) -> Result<MetaDataset> {
    if kinds.is_empty() {
        return Err(Error::Config("no base learners requested".into()));
    }
    let partition = stratified_kfold(graphs, k, derive_seed(seed, &[FOLD_TAG]))?;
    let folds = partition.folds();
    let tasks: Vec<(usize, GnnKind)> = (0..k)
        .flat_map(|f| kinds.iter().map(move |&kind| (f, kind)))
        .collect();
    let results = map_jobs(jobs, tasks.len(), |t| {
        let (f, kind) = tasks[t];
        let train: Vec<&GraphData> = graphs
            .iter()
            .zip(&partition.assignment)
            .filter(|(_, &a)| a != f)
            .map(|(g, _)| g)
            .collect();
        let cfg = GnnConfig {
            seed: base_seed(seed, Some(f)),
            ..*config
        };
        let model = train_gnn(kind, &train, &cfg)?;
        let preds: Vec<Prediction> = folds[f]
            .iter()
            .map(|&i| model.predict(&graphs[i], None))
            .collect::<Result<_>>()?;
        let correct = folds[f]
            .iter()
            .zip(&preds)
            .filter(|(&i, p)| p.label() == graphs[i].label)
            .count();
        log::info!(
            "fold {f} {kind}: holdout accuracy {}/{}",
            correct,
            preds.len()
        );
        let info = FoldModelInfo {
            kind,
            fold: f,
            train_ids: model.history.train_ids.clone(),
            holdout_ids: folds[f].iter().map(|&i| graphs[i].id.clone()).collect(),
            holdout_accuracy: correct as f64 / preds.len() as f64,
            checkpoint_sha256: sha256_hex(model.to_checkpoint().to_string()?.as_bytes()),
        };
        Ok((preds, info))
    })?;
    let mut y = Matrix::zeros(graphs.len(), 2 * kinds.len());
    let mut fold_models = Vec::with_capacity(tasks.len());
    for (&(f, kind), (preds, info)) in tasks.iter().zip(results) {
        let col = 2 * kinds
            .iter()
            .position(|&k| k == kind)
            .expect("task kinds come from `kinds`");
        for (&i, p) in folds[f].iter().zip(&preds) {
            y[(i, col)] = p.probs[0];
            y[(i, col + 1)] = p.probs[1];
        }
        fold_models.push(info);
    }
    Ok(MetaDataset {
        kinds: kinds.to_vec(),
        y,
        labels: graphs.iter().map(|g| g.label).collect(),
        ids: graphs.iter().map(|g| g.id.clone()).collect(),
        folds: partition.assignment,
        fold_models,
    })
}

/// Trains every kind on the whole training split.
pub fn retrain_base_full(
    graphs: &[GraphData],
    kinds: &[GnnKind],
    config: &GnnConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<GnnModel>> {
    let refs: Vec<&GraphData> = graphs.iter().collect();
    let cfg = GnnConfig {
        seed: base_seed(seed, None),
        ..*config
    };
    map_jobs(jobs, kinds.len(), |i| train_gnn(kinds[i], &refs, &cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub probs: [f64; 2],
    pub label: Label,
    pub alphas: Vec<f64>,
    pub base: Vec<Prediction>,
}

/// Base learners plus the meta-learner that combines them.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub models: Vec<GnnModel>,
    pub meta: MetaLearner,
}

impl Ensemble {
    pub fn new(models: Vec<GnnModel>, meta: MetaLearner) -> Result<Self> {
        let kinds: Vec<GnnKind> = models.iter().map(|m| m.kind).collect();
        if kinds != meta.kinds {
            return Err(Error::Checkpoint(format!(
                "base learner order {} does not match meta-learner order {} (checksums {} vs {})",
                names(&kinds),
                names(&meta.kinds),
                kind_order_checksum(&kinds),
                kind_order_checksum(&meta.kinds)
            )));
        }
        Ok(Ensemble { models, meta })
    }

    pub fn kinds(&self) -> &[GnnKind] {
        &self.meta.kinds
    }

    /// Combines already computed base predictions.
    pub fn combine(&self, base: Vec<Prediction>) -> Result<EnsemblePrediction> {
        let y: Vec<f64> = base.iter().flat_map(|p| p.probs).collect();
        let out = self.meta.attention_forward(&y)?;
        Ok(EnsemblePrediction {
            probs: out.probs,
            label: out.label(),
            alphas: out.alphas,
            base,
        })
    }

    pub fn predict(&self, g: &GraphData) -> Result<EnsemblePrediction> {
        let base = self
            .models
            .iter()
            .map(|m| m.predict(g, None))
            .collect::<Result<Vec<_>>>()?;
        self.combine(base)
    }
}

fn names(kinds: &[GnnKind]) -> String {
    kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
}
