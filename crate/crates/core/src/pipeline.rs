//! End-to-end wiring: featurization, stacked training, bundle I/O and
//! test-set evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{self, train_autoencoder, AeConfig, Autoencoder};
use crate::corpus::{
    block_vectors, build_feature_matrix, CfgGraph, Corpus, GraphData, Label, NodePayload,
};
use crate::diffmath::{derive_seed, Checkpoint};
use crate::ensemble::{
    base_seed, build_meta_dataset, kind_order_checksum, retrain_base_full, sha256_hex, train_meta,
    Ensemble, MetaConfig, MetaDataset, MetaLearner,
};
use crate::error::{Error, Result};
use crate::explain::FidelityReport;
use crate::gnn::{self, GnnConfig, GnnKind, GnnModel};
use crate::isa::{encode_instruction, AggMode, BlockVector};
use crate::metrics::{evaluate, EvalReport};
use crate::par::map_jobs;

pub const BUNDLE_FORMAT: &str = "cfgstack-bundle";
pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.json";

const AE_TAG: u64 = 0xae;
const META_TAG: u64 = 0x3e7a;

/// What the autoencoder is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeInput {
    /// Aggregated block vectors, the same rows the encoder later embeds.
    #[default]
    Blocks,
    /// Individual instruction vectors.
    Instructions,
}

/// Every knob that influences training output. `jobs` is deliberately absent:
/// results do not depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub agg: AggMode,
    #[serde(default)]
    pub ae_input: AeInput,
    pub folds: usize,
    pub kinds: Vec<GnnKind>,
    pub ae: AeConfig,
    pub gnn: GnnConfig,
    pub meta: MetaConfig,
}

impl TrainConfig {
    /// Default hyperparameters with all component seeds derived from `seed`.
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            seed,
            agg: AggMode::Mean,
            ae_input: AeInput::Blocks,
            folds: 5,
            kinds: GnnKind::ALL.to_vec(),
            ae: AeConfig::desk(),
            gnn: GnnConfig::default(),
            meta: MetaConfig::default(),
        }
        .reseeded(seed)
    }

    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.ae.seed = derive_seed(seed, &[AE_TAG]);
        self.gnn.seed = seed;
        self.meta.seed = derive_seed(seed, &[META_TAG]);
        self
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("plain data serializes")
                .as_bytes(),
        )
    }
}

/// Autoencoder training rows from the graphs of the training split that carry
/// instructions.
pub fn training_vectors(corpus: &Corpus, agg: AggMode, input: AeInput) -> Result<Vec<BlockVector>> {
    let mut out = Vec::new();
    for g in corpus.train() {
        let NodePayload::Blocks(blocks) = &g.nodes else {
            continue;
        };
        match input {
            AeInput::Blocks => out.extend(block_vectors(g, agg)?),
            AeInput::Instructions => {
                for instr in blocks.iter().flatten() {
                    out.push(BlockVector(encode_instruction(instr).0));
                }
            }
        }
    }
    Ok(out)
}

/// Trains the autoencoder when the training split contains instruction blocks.
pub fn train_ae_for(corpus: &Corpus, config: &TrainConfig) -> Result<Option<Autoencoder>> {
    let vectors = training_vectors(corpus, config.agg, config.ae_input)?;
    if vectors.is_empty() {
        return Ok(None);
    }
    train_autoencoder(&vectors, &config.ae).map(Some)
}

pub fn featurize<'a>(
    graphs: impl IntoIterator<Item = &'a CfgGraph>,
    ae: Option<&Autoencoder>,
    agg: AggMode,
) -> Result<Vec<GraphData>> {
    graphs
        .into_iter()
        .map(|g| build_feature_matrix(g, ae, agg))
        .collect()
}

pub struct TrainOutcome {
    pub config: TrainConfig,
    pub ae: Option<Autoencoder>,
    pub meta_dataset: MetaDataset,
    pub ensemble: Ensemble,
}

/// Stacked training on the corpus train split. A supplied autoencoder is used
/// as is; otherwise one is trained when the corpus has instruction blocks.
pub fn train_pipeline(
    corpus: &Corpus,
    config: &TrainConfig,
    ae: Option<Autoencoder>,
    jobs: usize,
) -> Result<TrainOutcome> {
    corpus.validate_for_training()?;
    let ae = match ae {
        Some(ae) => Some(ae),
        None => train_ae_for(corpus, config)?,
    };
    if let Some(a) = &ae {
        log::info!(
            "autoencoder: {} epochs, validation MSE {:.3e}",
            a.history.epochs_run,
            a.history.final_val_mse().unwrap_or(f64::NAN)
        );
    }
    let train = featurize(corpus.train(), ae.as_ref(), config.agg)?;
    let meta_dataset = build_meta_dataset(
        &train,
        &config.kinds,
        config.folds,
        &config.gnn,
        config.seed,
        jobs,
    )?;
    let ids: Vec<String> = train.iter().map(|g| g.id.clone()).collect();
    meta_dataset.audit_against(&ids)?;
    let meta = train_meta(
        &config.kinds,
        &meta_dataset.y,
        &meta_dataset.labels,
        &config.meta,
    )?;
    let models = retrain_base_full(&train, &config.kinds, &config.gnn, config.seed, jobs)?;
    let ensemble = Ensemble::new(models, meta)?;
    Ok(TrainOutcome {
        config: config.clone(),
        ae,
        meta_dataset,
        ensemble,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeReference {
    /// File name, resolved next to the bundle directory.
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub kind: GnnKind,
    pub fold: usize,
    pub holdout_accuracy: f64,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kinds: Vec<GnnKind>,
    pub kind_order_checksum: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Bundle file name to SHA-256.
    pub files: BTreeMap<String, String>,
    pub autoencoder: Option<AeReference>,
    pub folds: Vec<FoldSummary>,
    pub meta_rows: usize,
}

pub fn base_file(kind: GnnKind) -> String {
    format!("{}.json", kind.name().to_ascii_lowercase())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes the autoencoder checkpoint and returns its manifest reference.
pub fn save_autoencoder(ae: &Autoencoder, path: &Path) -> Result<AeReference> {
    let text = ae.to_checkpoint().to_string()?;
    write_file(path, &text)?;
    let file = path.file_name().and_then(|n| n.to_str()).ok_or_else(|| {
        Error::Config(format!(
            "autoencoder path {} has no file name",
            path.display()
        ))
    })?;
    Ok(AeReference {
        file: file.to_string(),
        sha256: sha256_hex(text.as_bytes()),
    })
}

pub fn load_autoencoder(path: &Path, expected_sha256: Option<&str>) -> Result<Autoencoder> {
    let text = read_file(path)?;
    if let Some(h) = expected_sha256 {
        let got = sha256_hex(text.as_bytes());
        if got != h {
            return Err(Error::Checkpoint(format!(
                "{} has SHA-256 {got}, manifest expects {h}",
                path.display()
            )));
        }
    }
    Autoencoder::from_checkpoint(&Checkpoint::parse(&text, autoencoder::CHECKPOINT_KIND)?)
}

/// Writes the three base checkpoints, the meta checkpoint and the manifest.
pub fn save_bundle(
    dir: &Path,
    outcome: &TrainOutcome,
    ae: Option<AeReference>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for m in &outcome.ensemble.models {
        let text = m.to_checkpoint().to_string()?;
        let name = base_file(m.kind);
        write_file(&dir.join(&name), &text)?;
        files.insert(name, sha256_hex(text.as_bytes()));
    }
    let text = outcome.ensemble.meta.to_checkpoint().to_string()?;
    write_file(&dir.join(META_FILE), &text)?;
    files.insert(META_FILE.to_string(), sha256_hex(text.as_bytes()));
    let c = &outcome.config;
    let seeds = BTreeMap::from([
        ("run".to_string(), c.seed),
        ("autoencoder".to_string(), c.ae.seed),
        ("base_full".to_string(), base_seed(c.seed, None)),
        ("meta".to_string(), c.meta.seed),
    ]);
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        kinds: c.kinds.clone(),
        kind_order_checksum: kind_order_checksum(&c.kinds),
        config_hash: c.config_hash(),
        config: c.clone(),
        seeds,
        files,
        autoencoder: ae,
        folds: outcome
            .meta_dataset
            .fold_models
            .iter()
            .map(|f| FoldSummary {
                kind: f.kind,
                fold: f.fold,
                holdout_accuracy: f.holdout_accuracy,
                checkpoint_sha256: f.checkpoint_sha256.clone(),
            })
            .collect(),
        meta_rows: outcome.meta_dataset.ids.len(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write_file(&dir.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub ensemble: Ensemble,
}

impl Bundle {
    /// Loads and verifies every file against the manifest hashes and kind order.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&read_file(&dir.join(MANIFEST_FILE))?)?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported bundle {} v{}",
                manifest.format, manifest.version
            )));
        }
        if manifest.kind_order_checksum != kind_order_checksum(&manifest.kinds) {
            return Err(Error::Checkpoint(
                "kind-order checksum does not match the manifest kinds".into(),
            ));
        }
        let verified = |name: &str| -> Result<String> {
            let text = read_file(&dir.join(name))?;
            let want = manifest
                .files
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("manifest does not list {name}")))?;
            if &sha256_hex(text.as_bytes()) != want {
                return Err(Error::Checkpoint(format!(
                    "{name} does not match its manifest hash"
                )));
            }
            Ok(text)
        };
        let models = manifest
            .kinds
            .iter()
            .map(|&k| {
                let text = verified(&base_file(k))?;
                GnnModel::from_checkpoint(&Checkpoint::parse(&text, gnn::CHECKPOINT_KIND)?, Some(k))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = MetaLearner::from_checkpoint(&Checkpoint::parse(
            &verified(META_FILE)?,
            crate::ensemble::meta::CHECKPOINT_KIND,
        )?)?;
        if kind_order_checksum(&meta.kinds) != manifest.kind_order_checksum {
            return Err(Error::Checkpoint(
                "meta-learner kind order differs from the manifest".into(),
            ));
        }
        Ok(Bundle {
            dir: dir.to_path_buf(),
            ensemble: Ensemble::new(models, meta)?,
            manifest,
        })
    }

    /// The autoencoder referenced by the manifest, looked up next to the bundle
    /// directory unless `path` overrides it.
    pub fn autoencoder(&self, path: Option<&Path>) -> Result<Option<Autoencoder>> {
        let Some(r) = &self.manifest.autoencoder else {
            return Ok(None);
        };
        let resolved = match path {
            Some(p) => p.to_path_buf(),
            None => self.dir.parent().unwrap_or(Path::new(".")).join(&r.file),
        };
        load_autoencoder(&resolved, Some(&r.sha256)).map(Some)
    }
}

/// Per-graph ensemble output, one row per graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub label: Label,
    pub predicted: Label,
    pub probs: [f64; 2],
    pub alphas: Vec<f64>,
    /// Malicious probability of each base learner.
    pub base_malicious: Vec<f64>,
}

pub fn predict_graphs(
    ens: &Ensemble,
    graphs: &[GraphData],
    jobs: usize,
) -> Result<Vec<PredictionRow>> {
    map_jobs(jobs, graphs.len(), |i| {
        let g = &graphs[i];
        let p = ens.predict(g)?;
        Ok(PredictionRow {
            id: g.id.clone(),
            label: g.label,
            predicted: p.label,
            probs: p.probs,
            alphas: p.alphas,
            base_malicious: p.base.iter().map(|b| b.probs[1]).collect(),
        })
    })
}

pub fn predictions_csv(kinds: &[GnnKind], rows: &[PredictionRow], config_hash: &str) -> String {
    let mut out = String::from("graph_id,label,predicted,p_benign,p_malicious");
    for k in kinds {
        write!(out, ",alpha_{}", k.name()).expect("writing to a String");
    }
    out.push_str(",config_hash\n");
    for r in rows {
        write!(
            out,
            "{},{},{},{:.16e},{:.16e}",
            r.id,
            r.label.index(),
            r.predicted.index(),
            r.probs[0],
            r.probs[1]
        )
        .expect("writing to a String");
        for a in &r.alphas {
            write!(out, ",{a:.16e}").expect("writing to a String");
        }
        writeln!(out, ",{config_hash}").expect("writing to a String");
    }
    out
}

/// Reports of every base learner followed by the ensemble (`SE`).
pub fn evaluate_rows(kinds: &[GnnKind], rows: &[PredictionRow]) -> Result<Vec<EvalReport>> {
    let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
    let mut reports = Vec::with_capacity(kinds.len() + 1);
    for (i, k) in kinds.iter().enumerate() {
        let scores: Vec<f64> = rows.iter().map(|r| r.base_malicious[i]).collect();
        let preds: Vec<Label> = scores
            .iter()
            .map(|&p| Label::from_probs(&[1.0 - p, p]))
            .collect();
        reports.push(evaluate(k.name(), &preds, &scores, &labels)?);
    }
    let preds: Vec<Label> = rows.iter().map(|r| r.predicted).collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.probs[1]).collect();
    reports.push(evaluate("SE", &preds, &scores, &labels)?);
    Ok(reports)
}

pub const FIDELITY_CSV_HEADER: &str = "sparsity,method,metric,value,n_graphs,config_hash";

/// Long format: one row per sparsity × method × {fidelity_plus, fidelity_minus}.
pub fn fidelity_csv(reports: &[FidelityReport], config_hash: &str) -> String {
    let mut out = format!("{FIDELITY_CSV_HEADER}\n");
    let levels = reports.first().map_or(0, |r| r.points.len());
    for i in 0..levels {
        for r in reports {
            let p = &r.points[i];
            for (metric, v) in [
                ("fidelity_plus", p.fidelity_plus),
                ("fidelity_minus", p.fidelity_minus),
            ] {
                writeln!(
                    out,
                    "{:.2},{},{metric},{v:.6},{},{config_hash}",
                    p.sparsity, r.method, r.n_graphs
                )
                .expect("writing to a String");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_corpus, SynthSpec};

    fn small_config(seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(seed);
        c.folds = 3;
        c.ae.epochs = 3;
        c.ae.max_vectors = Some(40);
        c.gnn.epochs = 2;
        c.meta.epochs = 3;
        c
    }

    #[test]
    fn config_hash_tracks_seed() {
        assert_eq!(
            TrainConfig::new(1).config_hash(),
            TrainConfig::new(1).config_hash()
        );
        assert_ne!(
            TrainConfig::new(1).config_hash(),
            TrainConfig::new(2).config_hash()
        );
    }

    #[test]
    fn bundle_round_trip_and_tamper_detection() {
        let corpus = generate_synthetic_corpus(&SynthSpec::with_size(30), 3).unwrap();
        let config = small_config(4);
        let outcome = train_pipeline(&corpus, &config, None, 2).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let ae_ref =
            save_autoencoder(outcome.ae.as_ref().unwrap(), &tmp.path().join("ae.json")).unwrap();
        let dir = tmp.path().join("bundle");
        let manifest = save_bundle(&dir, &outcome, Some(ae_ref)).unwrap();
        assert_eq!(fs::read_dir(&dir).unwrap().count(), 5);
        assert_eq!(manifest.meta_rows, corpus.train().count());

        let bundle = Bundle::load(&dir).unwrap();
        assert_eq!(bundle.ensemble, outcome.ensemble);
        let ae = bundle.autoencoder(None).unwrap().unwrap();
        let test = featurize(corpus.test(), Some(&ae), config.agg).unwrap();
        let rows = predict_graphs(&bundle.ensemble, &test, 1).unwrap();
        assert_eq!(rows.len(), test.len());
        let reports = evaluate_rows(&manifest.kinds, &rows).unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(reports[3].model, "SE");
        let csv = predictions_csv(&manifest.kinds, &rows, &manifest.config_hash);
        assert_eq!(csv.lines().count(), rows.len() + 1);

        let path = dir.join("gin.json");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text + " ").unwrap();
        assert!(Bundle::load(&dir).is_err());
    }

    #[test]
    fn instruction_rows_outnumber_block_rows() {
        let corpus = generate_synthetic_corpus(&SynthSpec::with_size(10), 2).unwrap();
        let blocks = training_vectors(&corpus, AggMode::Mean, AeInput::Blocks).unwrap();
        let instrs = training_vectors(&corpus, AggMode::Mean, AeInput::Instructions).unwrap();
        let nodes: usize = corpus.train().map(|g| g.node_count()).sum();
        assert_eq!(blocks.len(), nodes);
        assert!(instrs.len() > nodes);
        assert!(instrs
            .iter()
            .all(|v| v.0.iter().all(|&b| b == 0.0 || b == 1.0)));
    }

    #[test]
    fn training_refuses_single_class_corpus() {
        let mut corpus = generate_synthetic_corpus(&SynthSpec::with_size(20), 1).unwrap();
        for g in &mut corpus.graphs {
            g.label = Label::Benign;
        }
        assert!(train_pipeline(&corpus, &small_config(1), None, 1).is_err());
    }
}
