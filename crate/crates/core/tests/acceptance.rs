//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test -p cfgstack-core --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use cfgstack::autoencoder::Autoencoder;
use cfgstack::corpus::{GraphData, Label};
use cfgstack::diffmath::{grad_check, rng_stream, Coords, Matrix, ParamStore, ReluRule, Rng};
use cfgstack::ensemble::{MetaConfig, MetaLearner};
use cfgstack::explain::{
    aggregate_explanations, explain_ensemble, fidelity_sweep, ig_edge_scores, normalize_scores,
    EdgeScoreMap, Explainer, FIDELITY_METHODS,
};
use cfgstack::gnn::layers::{
    gat_backward, gat_forward, gcn_backward, gcn_forward, gin_backward, gin_forward, Adjacency,
    GatParams, GinParams, LayerGrads,
};
use cfgstack::gnn::{GnnConfig, GnnKind, GnnModel};
use cfgstack::isa::INSTR_DIM;
use cfgstack::metrics::{confusion, metrics_csv, prf1, roc_auc, roc_csv};
use cfgstack::pipeline::{
    evaluate_rows, featurize, fidelity_csv, predict_graphs, predictions_csv, save_autoencoder,
    save_bundle, train_pipeline, PredictionRow, TrainConfig, TrainOutcome,
};
use cfgstack::synth::{generate_synthetic_corpus, SynthSpec};
use rand::Rng as _;

const SEED: u64 = 1;
const CORPUS_SIZE: usize = 400;
const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;
const FIDELITY_LEVELS: [f64; 4] = [0.0, 0.7, 0.8, 0.9];

type Verdict = Result<(bool, String), String>;

fn rand_matrix(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_edges(rng: &mut Rng, n: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s != t && rng.gen_bool(0.35) {
                edges.push((s, t));
            }
        }
    }
    if edges.is_empty() {
        edges.push((0, 1));
    }
    edges
}

fn random_graph(rng: &mut Rng, id: String, d: usize) -> GraphData {
    let n = rng.gen_range(3..8);
    let edges = random_edges(rng, n);
    let label = if rng.gen_bool(0.5) {
        Label::Malicious
    } else {
        Label::Benign
    };
    GraphData::new(id, label, edges, rand_matrix(rng, n, d)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy written out from its definition.
fn xent(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

// ---------------------------------------------------------------- gradients

fn layer_error(kind: usize, seed: u64) -> f64 {
    let mut rng = rng_stream(seed, 100 + kind as u64);
    let n = rng.gen_range(3..7);
    let (din, dout) = (rng.gen_range(2..6), rng.gen_range(2..6));
    let edges = random_edges(&mut rng, n);
    let adj = Adjacency::new(n, &edges, seed % 2 == 1).unwrap();
    let r = rand_matrix(&mut rng, n, dout);
    let mut point = ParamStore::new();
    point.insert("x", rand_matrix(&mut rng, n, din));
    let ew: Vec<f64> = (0..edges.len()).map(|_| rng.gen_range(0.1..1.5)).collect();
    point.insert("ew", Matrix::row_vector(&ew));
    let shapes: Vec<(&str, usize, usize)> = match kind {
        0 => vec![("w", din, dout)],
        1 => vec![
            ("w1", din, dout),
            ("b1", 1, dout),
            ("w2", dout, dout),
            ("b2", 1, dout),
        ],
        _ => vec![("w", din, dout), ("a_dst", 1, dout), ("a_src", 1, dout)],
    };
    for &(name, a, b) in &shapes {
        point.insert(name, rand_matrix(&mut rng, a, b));
    }
    let run = |ps: &ParamStore| -> cfgstack::Result<(Matrix, LayerGrads)> {
        let (x, ew) = (ps.get("x"), ps.get("ew").as_slice());
        match kind {
            0 => {
                let (o, c) = gcn_forward(x, &adj, ew, ps.get("w"))?;
                Ok((
                    o,
                    gcn_backward(&c, &adj, ew, ps.get("w"), &r, ReluRule::Plain)?,
                ))
            }
            1 => {
                let p = GinParams {
                    w1: ps.get("w1"),
                    b1: ps.get("b1"),
                    w2: ps.get("w2"),
                    b2: ps.get("b2"),
                };
                let (o, c) = gin_forward(x, &adj, ew, &p)?;
                Ok((o, gin_backward(&c, &adj, ew, &p, &r, ReluRule::Plain)?))
            }
            _ => {
                let p = GatParams {
                    w: ps.get("w"),
                    a_dst: ps.get("a_dst"),
                    a_src: ps.get("a_src"),
                };
                let (o, c) = gat_forward(x, &adj, ew, &p, true)?;
                Ok((o, gat_backward(&c, ew, &p, &r, ReluRule::Plain)?))
            }
        }
    };
    let (_, grads) = run(&point).unwrap();
    point.accumulate("x", &grads.dh).unwrap();
    point
        .accumulate("ew", &Matrix::row_vector(&grads.dew))
        .unwrap();
    for ((name, ..), g) in shapes.iter().zip(&grads.dparams) {
        point.accumulate(name, g).unwrap();
    }
    let f = |ps: &ParamStore| run(ps).map(|(o, _)| dot(o.as_slice(), r.as_slice()));
    grad_check(f, &point, H, Coords::All).unwrap().max_rel_error
}

/// Whole model through the classification head: random projection of the logits.
fn model_error(kind: GnnKind, seed: u64) -> f64 {
    let mut rng = rng_stream(seed, 200 + kind.index() as u64);
    let d = rng.gen_range(3..7);
    let g = random_graph(&mut rng, format!("h{seed}"), d);
    let model = GnnModel::init(
        kind,
        d,
        GnnConfig {
            seed: seed + 1000,
            ..GnnConfig::default()
        },
    );
    let ew: Vec<f64> = (0..g.num_edges())
        .map(|_| rng.gen_range(0.2..1.2))
        .collect();
    let r = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let tape = model.forward_tape(&g, Some(&ew), None).unwrap();
    let grads = model.backward(&tape, r, ReluRule::Plain).unwrap();
    let mut point = model.params().clone();
    for (name, dp) in &grads.dparams {
        point.accumulate(name, dp).unwrap();
    }
    point.insert("input.x", g.x.clone());
    point.accumulate("input.x", &grads.dx).unwrap();
    point.insert("input.ew", Matrix::row_vector(&ew));
    point
        .accumulate("input.ew", &Matrix::row_vector(&grads.dew))
        .unwrap();
    let f = |ps: &ParamStore| -> cfgstack::Result<f64> {
        let mut m = model.clone();
        for (name, p) in ps.iter() {
            if m.params().contains(name) {
                *m.params_mut().value_mut(name) = p.value.clone();
            }
        }
        let mut gg = g.clone();
        gg.x = ps.get("input.x").clone();
        let p = m.predict(&gg, Some(ps.get("input.ew").as_slice()))?;
        Ok(dot(&p.logits, &r))
    };
    grad_check(
        f,
        &point,
        H,
        Coords::Sample {
            per_param: 10,
            seed,
        },
    )
    .unwrap()
    .max_rel_error
}

/// Smallest |pre-activation| over the ReLU layers of a dense stack applied to
/// the rows of `x`, computed with plain loops. Finite differences are only
/// meaningful when this is well above the step size.
fn relu_margin(x: &Matrix, layers: &[(&Matrix, &Matrix, bool)]) -> f64 {
    let mut margin = f64::INFINITY;
    let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    for (w, b, relu) in layers {
        h = h
            .iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| {
                        let z = b.as_slice()[j]
                            + (0..w.rows()).map(|i| row[i] * w[(i, j)]).sum::<f64>();
                        if *relu {
                            margin = margin.min(z.abs());
                            z.max(0.0)
                        } else {
                            z
                        }
                    })
                    .collect()
            })
            .collect();
    }
    margin
}

/// Instances whose ReLU pre-activations all lie this far from zero; closer
/// than that a central difference with step `H` can straddle the kink.
const KINK_MARGIN: f64 = 10.0 * H;

fn meta_error(seed: u64) -> (f64, usize) {
    let mut rng = rng_stream(seed, 300);
    let kinds = GnnKind::ALL;
    let mut rejected = 0;
    let (mut m, y) = loop {
        let mut m = MetaLearner::init(
            &kinds,
            MetaConfig {
                seed: seed + 7 + 100 * rejected as u64,
                ..MetaConfig::default()
            },
        );
        for name in ["att.w", "att.b"] {
            for v in m.params_mut().value_mut(name).as_mut_slice() {
                *v = rng.gen_range(-1.5..1.5);
            }
        }
        let y: Vec<f64> = (0..kinds.len())
            .flat_map(|_| {
                let p = rng.gen_range(0.01..0.99);
                [1.0 - p, p]
            })
            .collect();
        // attention-weighted input, then the two hidden layers
        let p = m.params();
        let (w, b) = (p.get("att.w"), p.get("att.b"));
        let s: Vec<f64> = (0..kinds.len())
            .map(|i| w[(i, 0)] * y[2 * i] + w[(i, 1)] * y[2 * i + 1] + b.as_slice()[i])
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let psi: Vec<f64> = (0..y.len()).map(|j| s[j / 2].exp() / z * y[j]).collect();
        let margin = relu_margin(
            &Matrix::row_vector(&psi),
            &[
                (p.get("mlp.0.w"), p.get("mlp.0.b"), true),
                (p.get("mlp.1.w"), p.get("mlp.1.b"), true),
            ],
        );
        if margin >= KINK_MARGIN {
            break (m, y);
        }
        rejected += 1;
    };
    let label = if rng.gen_bool(0.5) {
        Label::Malicious
    } else {
        Label::Benign
    };
    m.params_mut().zero_grads();
    let (_, dy) = m.loss_and_grad(&y, label, None).unwrap();
    let mut point = m.params().clone();
    point.insert("input.y", Matrix::row_vector(&y));
    point
        .accumulate("input.y", &Matrix::row_vector(&dy))
        .unwrap();
    let f = |ps: &ParamStore| -> cfgstack::Result<f64> {
        let mut mm = m.clone();
        for (name, p) in ps.iter() {
            if mm.params().contains(name) {
                *mm.params_mut().value_mut(name) = p.value.clone();
            }
        }
        Ok(xent(
            &mm.attention_forward(ps.get("input.y").as_slice())?.logits,
            label.index(),
        ))
    };
    (
        grad_check(
            f,
            &point,
            H,
            Coords::Sample {
                per_param: 16,
                seed,
            },
        )
        .unwrap()
        .max_rel_error,
        rejected,
    )
}

fn ae_error(seed: u64) -> (f64, usize) {
    let mut rng = rng_stream(seed, 400);
    let mut ae = Autoencoder::init(seed + 50);
    let mut rejected = 0;
    let x = loop {
        let rows = rng.gen_range(1..5);
        // sparse rows like real block encodings
        let data: Vec<f64> = (0..rows * INSTR_DIM)
            .map(|_| {
                if rng.gen_bool(0.05) {
                    rng.gen_range(0.0..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let x = Matrix::from_vec(rows, INSTR_DIM, data).unwrap();
        let p = ae.params();
        let mut layers = Vec::new();
        for (part, relu_last) in [("enc", true), ("dec", false)] {
            for i in 0..3 {
                layers.push((
                    p.get(&format!("{part}.{i}.w")),
                    p.get(&format!("{part}.{i}.b")),
                    i < 2 || relu_last,
                ));
            }
        }
        if relu_margin(&x, &layers) >= KINK_MARGIN {
            break x;
        }
        rejected += 1;
    };
    ae.params_mut().zero_grads();
    ae.loss_and_grad(&x).unwrap();
    let f = |p: &ParamStore| {
        let mut probe = ae.clone();
        *probe.params_mut() = p.clone();
        probe.mse(&x)
    };
    (
        grad_check(f, ae.params(), H, Coords::Sample { per_param: 8, seed })
            .unwrap()
            .max_rel_error,
        rejected,
    )
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut redrawn = 0;
    let mut record = |group: String, e: f64| {
        let w = worst.entry(group).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..INSTANCES {
        for (k, name) in ["GCN", "GIN", "GAT"].iter().enumerate() {
            record(format!("layer.{name}"), layer_error(k, seed));
        }
        for kind in GnnKind::ALL {
            record(format!("model.{kind}"), model_error(kind, seed));
        }
        let (e, r) = meta_error(seed);
        record("meta".into(), e);
        let (e2, r2) = ae_error(seed);
        record("autoencoder".into(), e2);
        redrawn += r + r2;
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    Ok((
        max < GRAD_TOL && secs < 60.0,
        format!(
            "{INSTANCES} instances per group, max rel err {max:.2e}, {secs:.1}s, {redrawn} near-kink draws replaced [{}]",
            detail.join(" ")
        ),
    ))
}

// ---------------------------------------------------------------- invariants

fn invariants() -> Verdict {
    let mut rng = rng_stream(SEED, 500);
    let (mut e16, mut e17, mut ea, mut shift) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for t in 0..200 {
        let m = rng.gen_range(1..40);
        let maps: Vec<EdgeScoreMap> = (0..3)
            .map(|i| EdgeScoreMap {
                graph_id: "g".into(),
                source: format!("s{i}"),
                scores: (0..m)
                    .map(|_| {
                        if rng.gen_bool(0.1) {
                            0.0
                        } else {
                            rng.gen_range(-1e3..1e3)
                        }
                    })
                    .collect(),
            })
            .collect();
        let normalized: Vec<EdgeScoreMap> = maps.iter().map(normalize_scores).collect();
        for n in &normalized {
            e16 = e16.max((n.scores.iter().sum::<f64>() - 1.0).abs());
        }
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let alphas = cfgstack::diffmath::ops::softmax(&raw);
        let agg = aggregate_explanations(&normalized, &alphas, "agg").map_err(|e| e.to_string())?;
        e17 = e17.max((agg.scores.iter().sum::<f64>() - 1.0).abs());

        let mut meta = MetaLearner::init(
            &GnnKind::ALL,
            MetaConfig {
                seed: t,
                ..MetaConfig::default()
            },
        );
        for name in ["att.w", "att.b"] {
            for v in meta.params_mut().value_mut(name).as_mut_slice() {
                *v = rng.gen_range(-4.0..4.0);
            }
        }
        let y: Vec<f64> = (0..3)
            .flat_map(|_| {
                let p = rng.gen::<f64>();
                [1.0 - p, p]
            })
            .collect();
        let before = meta.attention_forward(&y).map_err(|e| e.to_string())?;
        ea = ea.max((before.alphas.iter().sum::<f64>() - 1.0).abs());
        let c = rng.gen_range(-50.0..50.0);
        for v in meta.params_mut().value_mut("att.b").as_mut_slice() {
            *v += c;
        }
        let after = meta.attention_forward(&y).map_err(|e| e.to_string())?;
        for (a, b) in before.alphas.iter().zip(&after.alphas) {
            shift = shift.max((a - b).abs());
        }
    }
    Ok((
        e16 <= 1e-12 && e17 <= 1e-9 && ea <= 1e-12 && shift <= 1e-12,
        format!(
            "200 trials: |Σβ̃-1| {e16:.1e}, |Σβ_a-1| {e17:.1e}, |Σα-1| {ea:.1e}, max α change under shift {shift:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------- metrics

fn pairwise_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (sp, lp) in scores.iter().zip(labels) {
        if *lp != Label::Malicious {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels) {
            if *ln != Label::Benign {
                continue;
            }
            pairs += 1.0;
            num += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn metric_oracles() -> Verdict {
    let mut rng = rng_stream(SEED, 600);
    let mut max_auc_err = 0.0f64;
    let mut exact = true;
    for t in 0..50 {
        let n = rng.gen_range(2..=200);
        let mut labels: Vec<Label> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    Label::Malicious
                } else {
                    Label::Benign
                }
            })
            .collect();
        labels[0] = Label::Benign;
        labels[1] = Label::Malicious;
        // coarse grid on half the instances to force ties
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if t % 2 == 0 {
                    rng.gen_range(0..8) as f64 / 8.0
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let (auc, _) = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        max_auc_err = max_auc_err.max((auc - pairwise_auc(&scores, &labels)).abs());

        let preds: Vec<Label> = scores
            .iter()
            .map(|&s| {
                if s >= 0.5 {
                    Label::Malicious
                } else {
                    Label::Benign
                }
            })
            .collect();
        let c = confusion(&preds, &labels).map_err(|e| e.to_string())?;
        let count = |p: Label, l: Label| {
            preds
                .iter()
                .zip(&labels)
                .filter(|(a, b)| **a == p && **b == l)
                .count()
        };
        let (tp, tn, fp, fn_) = (
            count(Label::Malicious, Label::Malicious),
            count(Label::Benign, Label::Benign),
            count(Label::Malicious, Label::Benign),
            count(Label::Benign, Label::Malicious),
        );
        exact &= (c.tp, c.tn, c.fp, c.fn_) == (tp, tn, fp, fn_);
        exact &= c.accuracy() == (tp + tn) as f64 / n as f64;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let f1 = |p: f64, r: f64| {
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        };
        for (m, tp, fp, fn_) in [
            (prf1(&c, Label::Malicious), tp, fp, fn_),
            (prf1(&c, Label::Benign), tn, fn_, fp),
        ] {
            let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
            exact &= m.precision == p && m.recall == r && m.f1 == f1(p, r);
        }
    }
    Ok((
        max_auc_err <= 1e-12 && exact,
        format!("50 instances: max |AUC - Mann-Whitney| {max_auc_err:.1e}, confusion/P/R/F1/accuracy exact: {exact}"),
    ))
}

// ---------------------------------------------------------------- pipeline

struct Run {
    outcome: TrainOutcome,
    test: Vec<GraphData>,
    rows: Vec<PredictionRow>,
    files: BTreeMap<String, Vec<u8>>,
    fidelity: Vec<cfgstack::explain::FidelityReport>,
    secs: f64,
}

fn full_run(dir: &Path, jobs: usize) -> Result<Run, String> {
    let e = |e: cfgstack::Error| e.to_string();
    let start = Instant::now();
    let corpus = generate_synthetic_corpus(&SynthSpec::with_size(CORPUS_SIZE), SEED).map_err(e)?;
    let config = TrainConfig::new(SEED);
    let outcome = train_pipeline(&corpus, &config, None, jobs).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let ae = outcome.ae.as_ref().ok_or("no autoencoder trained")?;
    let test = featurize(corpus.test(), Some(ae), config.agg).map_err(e)?;
    let rows = predict_graphs(&outcome.ensemble, &test, jobs).map_err(e)?;
    let reports = evaluate_rows(&config.kinds, &rows).map_err(e)?;
    let fidelity =
        fidelity_sweep(&outcome.ensemble, &test, &FIDELITY_LEVELS, 50, SEED, jobs).map_err(e)?;

    let ae_ref = save_autoencoder(ae, &dir.join("bundle.ae.json")).map_err(e)?;
    save_bundle(&dir.join("bundle"), &outcome, Some(ae_ref)).map_err(e)?;
    let hash = config.config_hash();
    fs::write(
        dir.join("predictions.csv"),
        predictions_csv(&config.kinds, &rows, &hash),
    )
    .unwrap();
    fs::write(dir.join("metrics.csv"), metrics_csv(&reports, &hash)).unwrap();
    fs::write(dir.join("roc.csv"), roc_csv(&reports, &hash)).unwrap();
    fs::write(dir.join("fidelity.csv"), fidelity_csv(&fidelity, &hash)).unwrap();
    let mut files = BTreeMap::new();
    for sub in [dir.to_path_buf(), dir.join("bundle")] {
        for entry in fs::read_dir(&sub).unwrap() {
            let p = entry.unwrap().path();
            if p.is_file() {
                files.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    Ok(Run {
        outcome,
        test,
        rows,
        files,
        fidelity,
        secs,
    })
}

fn stacking_audit(run: &Run) -> Verdict {
    let md = &run.outcome.meta_dataset;
    let corpus = generate_synthetic_corpus(&SynthSpec::with_size(CORPUS_SIZE), SEED)
        .map_err(|e| e.to_string())?;
    let train: BTreeSet<String> = corpus.train().map(|g| g.id.clone()).collect();
    let shape_ok = md.y.rows() == train.len() && md.y.cols() == 6;
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for id in &md.ids {
        *seen.entry(id.as_str()).or_default() += 1;
    }
    let once = seen.len() == train.len()
        && seen.values().all(|&c| c == 1)
        && seen.keys().all(|k| train.contains(*k));
    // provenance re-derived here: every row's producing model must not have trained on it
    let mut leaks = 0;
    let mut covered = 0;
    for (r, id) in md.ids.iter().enumerate() {
        for kind in &md.kinds {
            let producers: Vec<_> = md
                .fold_models
                .iter()
                .filter(|m| m.kind == *kind && m.holdout_ids.contains(id))
                .collect();
            covered += usize::from(producers.len() == 1 && producers[0].fold == md.folds[r]);
            leaks += producers
                .iter()
                .filter(|m| m.train_ids.contains(id))
                .count();
        }
    }
    let fold_disjoint = md.fold_models.iter().all(|m| {
        m.train_ids.iter().all(|t| !m.holdout_ids.contains(t))
            && m.train_ids.len() + m.holdout_ids.len() == train.len()
    });
    let audit = md.audit().is_ok();
    Ok((
        shape_ok && once && leaks == 0 && covered == md.ids.len() * md.kinds.len() && fold_disjoint && audit,
        format!(
            "meta dataset {}x{} for {} training graphs, each once: {once}, leaks {leaks}, rows with a unique holdout producer {covered}/{}",
            md.y.rows(),
            md.y.cols(),
            train.len(),
            md.ids.len() * md.kinds.len()
        ),
    ))
}

fn end_to_end(run: &Run) -> Verdict {
    let n = run.rows.len() as f64;
    let acc = |pred: &dyn Fn(&PredictionRow) -> Label| {
        run.rows.iter().filter(|r| pred(r) == r.label).count() as f64 / n
    };
    let se = acc(&|r| r.predicted);
    let kinds = &run.outcome.config.kinds;
    let mut base = Vec::new();
    for i in 0..kinds.len() {
        base.push(acc(&|r| {
            if r.base_malicious[i] > 0.5 {
                Label::Malicious
            } else {
                Label::Benign
            }
        }));
    }
    let ok = se >= 0.95 && base.iter().all(|&b| se >= b - 0.02) && run.secs < 600.0;
    let detail: Vec<String> = kinds
        .iter()
        .zip(&base)
        .map(|(k, b)| format!("{k} {b:.4}"))
        .collect();
    Ok((
        ok,
        format!(
            "{} test graphs: SE {se:.4}, {}; training {:.0}s single-threaded",
            run.rows.len(),
            detail.join(", "),
            run.secs
        ),
    ))
}

fn fidelity_check(run: &Run) -> Verdict {
    let get = |method: &str| run.fidelity.iter().find(|r| r.method == method).unwrap();
    let random = get("random");
    let mut ok = run.test.len() >= 50;
    let mut parts = Vec::new();
    for method in ["ig_aggregated", "gbp_aggregated"] {
        let r = get(method);
        for (p, q) in r.points.iter().zip(&random.points) {
            if p.sparsity == 0.0 {
                continue;
            }
            ok &= p.fidelity_minus <= q.fidelity_minus;
            parts.push(format!(
                "{method}@{:.1} {:.4}<= {:.4}",
                p.sparsity, p.fidelity_minus, q.fidelity_minus
            ));
        }
    }
    for m in FIDELITY_METHODS {
        ok &= get(m).points[0].sparsity == 0.0 && get(m).points[0].fidelity_minus == 0.0;
    }

    // independent recomputation of Fidelity- for the aggregated explainers
    let ens = &run.outcome.ensemble;
    let mut recomputed_ok = true;
    for (j, explainer) in [Explainer::Ig, Explainer::Gbp].into_iter().enumerate() {
        let reported = get(FIDELITY_METHODS[j]);
        for p in &reported.points {
            let mut changed = 0usize;
            for g in &run.test {
                let e = explain_ensemble(ens, g, explainer, 50).map_err(|e| e.to_string())?;
                let full = ens.predict(g).map_err(|e| e.to_string())?.label;
                let m = g.num_edges();
                let keep_n = (((1.0 - p.sparsity) * m as f64) - 1e-9).ceil().max(0.0) as usize;
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| {
                    e.aggregated.scores[b]
                        .total_cmp(&e.aggregated.scores[a])
                        .then(a.cmp(&b))
                });
                let kept: BTreeSet<usize> = order.into_iter().take(keep_n).collect();
                let edges = g
                    .edges
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| kept.contains(k))
                    .map(|(_, e)| *e)
                    .collect();
                let sub = GraphData::new(g.id.clone(), g.label, edges, g.x.clone()).unwrap();
                changed += usize::from(ens.predict(&sub).map_err(|e| e.to_string())?.label != full);
            }
            recomputed_ok &= changed as f64 / run.test.len() as f64 == p.fidelity_minus;
        }
    }
    ok &= recomputed_ok;
    Ok((
        ok,
        format!(
            "{} test graphs; {}; sparsity 0 gives 0 for all methods; independent recomputation agrees: {recomputed_ok}",
            run.test.len(),
            parts.join(", ")
        ),
    ))
}

fn autoencoder_check(run: &Run) -> Verdict {
    let ae = run.outcome.ae.as_ref().ok_or("no autoencoder")?;
    let h = &ae.history;
    let v = h.final_val_mse().ok_or("no validation history")?;
    Ok((
        v < 1e-4 && h.epochs_run <= run.outcome.config.ae.epochs,
        format!(
            "validation MSE {:.3e} -> {v:.3e} after {} epochs ({} train / {} val vectors)",
            h.initial_val_mse().unwrap_or(f64::NAN),
            h.epochs_run,
            h.train_size,
            h.val_size
        ),
    ))
}

fn ig_completeness(run: &Run) -> Verdict {
    let ens = &run.outcome.ensemble;
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for (i, g) in run
        .test
        .iter()
        .filter(|g| g.num_edges() > 0)
        .take(20)
        .enumerate()
    {
        let model = &ens.models[i % ens.models.len()];
        let target = ens.predict(g).map_err(|e| e.to_string())?.label.index();
        let beta = ig_edge_scores(model, g, target, 200).map_err(|e| e.to_string())?;
        let zeros = vec![0.0; g.num_edges()];
        let f1 = model.predict(g, None).map_err(|e| e.to_string())?.logits[target];
        let f0 = model
            .predict(g, Some(&zeros))
            .map_err(|e| e.to_string())?
            .logits[target];
        let delta = f1 - f0;
        let rel = (beta.scores.iter().sum::<f64>() - delta).abs() / delta.abs().max(1e-12);
        worst = worst.max(rel);
        pairs += 1;
    }
    Ok((
        pairs == 20 && worst < 1e-2,
        format!("{pairs} (model, graph) pairs at 200 steps: max relative error {worst:.2e}"),
    ))
}

fn determinism(a: &Run, b: &Run) -> Verdict {
    let names: BTreeSet<&String> = a.files.keys().chain(b.files.keys()).collect();
    let differing: Vec<&&String> = names
        .iter()
        .filter(|n| a.files.get(**n) != b.files.get(**n))
        .collect();
    let checkpoints = names.iter().filter(|n| n.ends_with(".json")).count();
    let csvs = names.iter().filter(|n| n.ends_with(".csv")).count();
    Ok((
        differing.is_empty() && checkpoints >= 6 && csvs == 4,
        format!(
            "{} files compared ({checkpoints} JSON, {csvs} CSV), second run with 2 jobs; differing: {differing:?}",
            names.len()
        ),
    ))
}

fn report(name: &str, v: Verdict, failed: &mut usize) {
    match v {
        Ok((true, detail)) => println!("PASS {name}: {detail}"),
        Ok((false, detail)) => {
            *failed += 1;
            println!("FAIL {name}: {detail}");
        }
        Err(e) => {
            *failed += 1;
            println!("FAIL {name}: error: {e}");
        }
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    report("gradient_suite", gradient_suite(), &mut failed);
    report(
        "normalization_attention_invariants",
        invariants(),
        &mut failed,
    );
    report("metric_oracles", metric_oracles(), &mut failed);

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    match full_run(dir_a.path(), 1) {
        Ok(run) => {
            report("stacking_audit", stacking_audit(&run), &mut failed);
            report("end_to_end_accuracy", end_to_end(&run), &mut failed);
            report("fidelity_vs_random", fidelity_check(&run), &mut failed);
            report(
                "autoencoder_convergence",
                autoencoder_check(&run),
                &mut failed,
            );
            report("ig_completeness", ig_completeness(&run), &mut failed);
            let second = full_run(dir_b.path(), 2);
            report(
                "determinism",
                second.and_then(|b| determinism(&run, &b)),
                &mut failed,
            );
        }
        Err(e) => {
            for name in [
                "stacking_audit",
                "end_to_end_accuracy",
                "fidelity_vs_random",
                "autoencoder_convergence",
                "ig_completeness",
                "determinism",
            ] {
                report(name, Err(e.clone()), &mut failed);
            }
        }
    }
    println!("{} criteria, {failed} failed", 9);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
