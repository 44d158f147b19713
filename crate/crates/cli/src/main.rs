use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use cfgstack::autoencoder::train_autoencoder;
use cfgstack::corpus::{load_corpus, write_corpus, CfgGraph, Corpus, Split};
use cfgstack::explain::{
    explain_ensemble, fidelity_sweep, render_dot, Explainer, DEFAULT_IG_STEPS,
    DEFAULT_SPARSITY_GRID, SCORE_CSV_HEADER,
};
use cfgstack::isa::AggMode;
use cfgstack::metrics::{metrics_csv, roc_csv};
use cfgstack::par::map_jobs;
use cfgstack::pipeline::{
    evaluate_rows, featurize, fidelity_csv, load_autoencoder, predict_graphs, predictions_csv,
    save_autoencoder, save_bundle, training_vectors, AeInput, Bundle, TrainConfig,
};
use cfgstack::synth::{generate_synthetic_corpus, SynthSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

const SEED_ENV: &str = "CFGSTACK_SEED";

#[derive(Parser)]
#[command(
    name = "cfgstack",
    version,
    about = "Stacked GNN ensemble for CFG malware classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus (JSON lines).
    Gensynth(GensynthArgs),
    /// Train the block autoencoder on the corpus train split.
    TrainAe(TrainAeArgs),
    /// Train base learners and the meta-learner; writes a bundle directory.
    Train(TrainArgs),
    /// Write per-graph ensemble probabilities and attention weights.
    Predict(PredictArgs),
    /// Edge importance scores per learner and aggregated, optionally as DOT.
    Explain(ExplainArgs),
    /// Classification metrics, ROC points and the fidelity sweep.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Run seed.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct JobsArg {
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
}

#[derive(Args)]
struct GensynthArgs {
    /// Number of graphs.
    #[arg(long, default_value_t = 400, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of malicious graphs.
    #[arg(long, default_value_t = 0.5)]
    balance: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 8)]
    min_nodes: usize,
    #[arg(long, default_value_t = 24)]
    max_nodes: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    Mean,
    Max,
}

impl From<Agg> for AggMode {
    fn from(a: Agg) -> Self {
        match a {
            Agg::Mean => AggMode::Mean,
            Agg::Max => AggMode::Max,
        }
    }
}

#[derive(Args)]
struct AeOverrides {
    /// Block aggregation.
    #[arg(long, value_enum, default_value_t = Agg::Mean)]
    agg: Agg,
    #[arg(long)]
    ae_epochs: Option<usize>,
    /// Cap on training vectors (0 = use all).
    #[arg(long)]
    ae_max_vectors: Option<usize>,
    /// Fit the autoencoder on individual instructions instead of block vectors.
    #[arg(long)]
    ae_on_instructions: bool,
}

#[derive(Args)]
struct TrainAeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    ae: AeOverrides,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Bundle directory; the autoencoder is written next to it as `<dir>.ae.json`.
    #[arg(long)]
    out: PathBuf,
    /// Reuse a trained autoencoder instead of training one.
    #[arg(long)]
    ae: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    jobs: JobsArg,
    #[command(flatten)]
    ae_overrides: AeOverrides,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    folds: Option<u64>,
    /// Base learner epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    meta_epochs: Option<usize>,
    /// Add reverse messages for every CFG edge.
    #[arg(long)]
    symmetrize: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitSel {
    Train,
    Test,
    All,
}

impl SplitSel {
    fn select(self, corpus: &Corpus) -> Vec<&CfgGraph> {
        corpus
            .graphs
            .iter()
            .filter(|g| match self {
                SplitSel::Train => g.split == Split::Train,
                SplitSel::Test => g.split == Split::Test,
                SplitSel::All => true,
            })
            .collect()
    }
}

#[derive(Args)]
struct BundleInput {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Autoencoder checkpoint; defaults to the one named in the manifest.
    #[arg(long)]
    ae: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitSel::Test)]
    split: SplitSel,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    input: BundleInput,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    input: BundleInput,
    /// Output directory for scores.csv, explain.json and DOT files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "ig", value_parser = parse_explainer)]
    explainer: Explainer,
    /// Riemann steps for IG.
    #[arg(long, default_value_t = DEFAULT_IG_STEPS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    /// Restrict to these graph ids (repeatable).
    #[arg(long = "graph")]
    graphs: Vec<String>,
    /// Also write `<graph_id>.dot` with the top-k aggregated edges highlighted.
    #[arg(long)]
    dot: bool,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    input: BundleInput,
    /// Output directory for metrics.csv, roc.csv, predictions.csv and fidelity.csv.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sparsity levels in [0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SPARSITY_GRID.to_vec())]
    grid: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_IG_STEPS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    /// Skip the fidelity sweep.
    #[arg(long)]
    no_fidelity: bool,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    jobs: JobsArg,
}

fn parse_explainer(s: &str) -> std::result::Result<Explainer, String> {
    s.parse().map_err(|e: cfgstack::Error| e.to_string())
}

/// Missing or unreadable inputs; exits with status 2.
#[derive(Debug)]
struct InputError(String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(InputError(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

fn open_corpus(path: &Path) -> Result<Corpus> {
    require(path, "corpus")?;
    load_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ae_config(config: &mut TrainConfig, o: &AeOverrides) {
    config.agg = o.agg.into();
    if o.ae_on_instructions {
        config.ae_input = AeInput::Instructions;
    }
    if let Some(e) = o.ae_epochs {
        config.ae.epochs = e;
    }
    if let Some(m) = o.ae_max_vectors {
        config.ae.max_vectors = (m > 0).then_some(m);
    }
}

fn gensynth(a: GensynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_graphs: a.n as usize,
        balance: a.balance,
        test_fraction: a.test_fraction,
        min_nodes: a.min_nodes,
        max_nodes: a.max_nodes,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, a.seed.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_corpus(&corpus, &a.out)?;
    println!("wrote {} graphs to {}", corpus.len(), a.out.display());
    println!(
        "{:<10} {:>7} {:>7} {:>7} {:>10} {:>10}",
        "class", "graphs", "train", "test", "avg_nodes", "avg_edges"
    );
    for label in cfgstack::corpus::Label::ALL {
        let gs: Vec<&CfgGraph> = corpus.graphs.iter().filter(|g| g.label == label).collect();
        let n = gs.len().max(1) as f64;
        let train = gs.iter().filter(|g| g.split == Split::Train).count();
        println!(
            "{:<10} {:>7} {:>7} {:>7} {:>10.2} {:>10.2}",
            label.name(),
            gs.len(),
            train,
            gs.len() - train,
            gs.iter().map(|g| g.node_count()).sum::<usize>() as f64 / n,
            gs.iter().map(|g| g.edges.len()).sum::<usize>() as f64 / n,
        );
    }
    Ok(())
}

fn train_ae(a: TrainAeArgs) -> Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let mut config = TrainConfig::new(a.seed.seed);
    ae_config(&mut config, &a.ae);
    let vectors = training_vectors(&corpus, config.agg, config.ae_input)?;
    anyhow::ensure!(
        !vectors.is_empty(),
        "corpus has no instruction blocks in its train split"
    );
    let start = Instant::now();
    let ae = train_autoencoder(&vectors, &config.ae)?;
    let r = save_autoencoder(&ae, &a.out)?;
    println!(
        "autoencoder: {} vectors, {} epochs, val MSE {:.3e} ({:.1}s)",
        vectors
            .len()
            .min(config.ae.max_vectors.unwrap_or(usize::MAX)),
        ae.history.epochs_run,
        ae.history.final_val_mse().unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    println!("wrote {} sha256 {}", a.out.display(), r.sha256);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let mut config = TrainConfig::new(a.seed.seed);
    ae_config(&mut config, &a.ae_overrides);
    if let Some(f) = a.folds {
        config.folds = f as usize;
    }
    if let Some(e) = a.epochs {
        config.gnn.epochs = e;
    }
    if let Some(lr) = a.lr {
        config.gnn.lr = lr;
    }
    if let Some(e) = a.meta_epochs {
        config.meta.epochs = e;
    }
    config.gnn.symmetrize = a.symmetrize;
    let ae = match &a.ae {
        Some(p) => {
            require(p, "autoencoder")?;
            Some(load_autoencoder(p, None)?)
        }
        None => None,
    };
    let start = Instant::now();
    let outcome = cfgstack::pipeline::train_pipeline(&corpus, &config, ae, a.jobs.jobs as usize)?;
    let ae_ref = match &outcome.ae {
        Some(ae) => {
            let name = a
                .out
                .file_name()
                .context("bundle path has no final component")?;
            let path = a
                .out
                .with_file_name(format!("{}.ae.json", name.to_string_lossy()));
            Some(save_autoencoder(ae, &path)?)
        }
        None => None,
    };
    let manifest = save_bundle(&a.out, &outcome, ae_ref)?;

    println!("fold holdout accuracy ({} folds):", config.folds);
    print!("{:<6}", "kind");
    for f in 0..config.folds {
        print!(" {:>7}", format!("f{f}"));
    }
    println!(" {:>7}", "mean");
    for &k in &config.kinds {
        let accs: Vec<f64> = outcome
            .meta_dataset
            .fold_accuracy()
            .into_iter()
            .filter(|(kind, ..)| *kind == k)
            .map(|(.., acc)| acc)
            .collect();
        print!("{:<6}", k.name());
        for acc in &accs {
            print!(" {acc:>7.4}");
        }
        println!(
            " {:>7.4}",
            accs.iter().sum::<f64>() / accs.len().max(1) as f64
        );
    }
    println!(
        "wrote bundle {} ({} meta rows, {:.1}s)",
        a.out.display(),
        manifest.meta_rows,
        start.elapsed().as_secs_f64()
    );
    println!("config_hash {}", manifest.config_hash);
    Ok(())
}

struct Loaded {
    bundle: Bundle,
    graphs: Vec<cfgstack::corpus::GraphData>,
}

fn load_inputs(input: &BundleInput) -> Result<Loaded> {
    require(&input.bundle, "bundle")?;
    let corpus = open_corpus(&input.corpus)?;
    let bundle = Bundle::load(&input.bundle)
        .with_context(|| format!("loading bundle {}", input.bundle.display()))?;
    if let Some(p) = &input.ae {
        require(p, "autoencoder")?;
    }
    let ae = bundle.autoencoder(input.ae.as_deref())?;
    let selected = input.split.select(&corpus);
    anyhow::ensure!(!selected.is_empty(), "no graphs in the selected split");
    let graphs = featurize(selected, ae.as_ref(), bundle.manifest.config.agg)?;
    Ok(Loaded { bundle, graphs })
}

fn predict(a: PredictArgs) -> Result<()> {
    let Loaded { bundle, graphs } = load_inputs(&a.input)?;
    let rows = predict_graphs(&bundle.ensemble, &graphs, a.jobs.jobs as usize)?;
    let m = &bundle.manifest;
    write(&a.out, &predictions_csv(&m.kinds, &rows, &m.config_hash))?;
    println!("wrote {} predictions to {}", rows.len(), a.out.display());
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let Loaded { bundle, mut graphs } = load_inputs(&a.input)?;
    if !a.graphs.is_empty() {
        for id in &a.graphs {
            anyhow::ensure!(
                graphs.iter().any(|g| &g.id == id),
                "graph `{id}` not in the selected split"
            );
        }
        graphs.retain(|g| a.graphs.contains(&g.id));
    }
    let steps = a.steps as usize;
    let explanations = map_jobs(a.jobs.jobs as usize, graphs.len(), |i| {
        explain_ensemble(&bundle.ensemble, &graphs[i], a.explainer, steps)
    })?;
    let mut csv = format!("{SCORE_CSV_HEADER},config_hash\n");
    let hash = &bundle.manifest.config_hash;
    let mut rows = String::new();
    for (g, e) in graphs.iter().zip(&explanations) {
        for map in e.per_learner.iter().chain([&e.aggregated]) {
            map.write_rows(g, &mut rows)?;
        }
    }
    for line in rows.lines() {
        csv.push_str(line);
        csv.push(',');
        csv.push_str(hash);
        csv.push('\n');
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("scores.csv"), &csv)?;
    if a.dot {
        for (g, e) in graphs.iter().zip(&explanations) {
            write(
                &a.out.join(format!("{}.dot", g.id)),
                &render_dot(g, &e.aggregated, a.top_k)?,
            )?;
        }
    }
    let manifest = json!({
        "explainer": a.explainer,
        "steps": steps,
        "split": match a.input.split { SplitSel::Train => "train", SplitSel::Test => "test", SplitSel::All => "all" },
        "graphs": explanations.iter().zip(&graphs).map(|(e, g)| json!({
            "graph_id": g.id,
            "target": e.target,
            "alphas": e.alphas,
        })).collect::<Vec<_>>(),
        "dot": a.dot,
        "top_k": a.top_k,
        "config_hash": hash,
    });
    write(
        &a.out.join("explain.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    println!(
        "explained {} graphs with {} (steps {steps}) into {}",
        graphs.len(),
        a.explainer,
        a.out.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    for &s in &a.grid {
        anyhow::ensure!((0.0..=1.0).contains(&s), "sparsity {s} outside [0, 1]");
    }
    let Loaded { bundle, graphs } = load_inputs(&a.input)?;
    let jobs = a.jobs.jobs as usize;
    let m = &bundle.manifest;
    let rows = predict_graphs(&bundle.ensemble, &graphs, jobs)?;
    let reports = evaluate_rows(&m.kinds, &rows)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(
        &a.out.join("metrics.csv"),
        &metrics_csv(&reports, &m.config_hash),
    )?;
    write(&a.out.join("roc.csv"), &roc_csv(&reports, &m.config_hash))?;
    write(
        &a.out.join("predictions.csv"),
        &predictions_csv(&m.kinds, &rows, &m.config_hash),
    )?;
    println!(
        "{:<5} {:>9} {:>9} {:>9} {:>9}",
        "model", "accuracy", "mal_rec", "mal_f1", "auc"
    );
    for r in &reports {
        println!(
            "{:<5} {:>9.4} {:>9.4} {:>9.4} {:>9.4}{}",
            r.model,
            r.accuracy,
            r.malicious.recall,
            r.malicious.f1,
            r.auc,
            if r.has_warnings() {
                "  (undefined metric set to 0)"
            } else {
                ""
            }
        );
    }
    if !a.no_fidelity {
        let fid = fidelity_sweep(
            &bundle.ensemble,
            &graphs,
            &a.grid,
            a.steps as usize,
            a.seed.seed,
            jobs,
        )?;
        write(
            &a.out.join("fidelity.csv"),
            &fidelity_csv(&fid, &m.config_hash),
        )?;
        println!("fidelity- by sparsity over {} graphs:", graphs.len());
        for r in &fid {
            let vals: Vec<String> = r
                .points
                .iter()
                .map(|p| format!("{:.2}:{:.3}", p.sparsity, p.fidelity_minus))
                .collect();
            println!("  {:<15} {}", r.method, vals.join(" "));
        }
    }
    println!("wrote reports to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gensynth(a) => gensynth(a),
        Command::TrainAe(a) => train_ae(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Explain(a) => explain(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
