//! Edge-level explanations through continuous edge weights: Integrated
//! Gradients and Guided Backpropagation per base learner, attention-weighted
//! aggregation, top-k subgraph selection and Fidelity±.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{GraphData, Label};
use crate::diffmath::{derive_seed, rng_stream, ReluRule};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::gnn::GnnModel;
use crate::par::map_jobs;

pub const DEFAULT_IG_STEPS: usize = 50;
pub const DEFAULT_SPARSITY_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Explainer {
    Ig,
    Gbp,
}

impl Explainer {
    pub const ALL: [Explainer; 2] = [Explainer::Ig, Explainer::Gbp];

    pub fn name(self) -> &'static str {
        match self {
            Explainer::Ig => "ig",
            Explainer::Gbp => "gbp",
        }
    }
}

impl fmt::Display for Explainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Explainer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ig" => Ok(Explainer::Ig),
            "gbp" => Ok(Explainer::Gbp),
            _ => Err(Error::Config(format!(
                "unknown explainer `{s}` (expected ig or gbp)"
            ))),
        }
    }
}

/// Scores aligned with a graph's edge list. `source` names what produced them,
/// e.g. `ig:GCN`, `gbp:aggregated` or `random`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScoreMap {
    pub graph_id: String,
    pub source: String,
    pub scores: Vec<f64>,
}

impl EdgeScoreMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Edge indices from most to least important; ties go to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    /// CSV rows `graph_id,source,edge,src,dst,score,rank` (rank 1 is the top edge).
    pub fn write_rows(&self, g: &GraphData, out: &mut String) -> Result<()> {
        if g.num_edges() != self.len() {
            return Err(Error::shape(format!(
                "{} scores for {} edges of `{}`",
                self.len(),
                g.num_edges(),
                g.id
            )));
        }
        let mut rank = vec![0; self.len()];
        for (r, &k) in self.ranking().iter().enumerate() {
            rank[k] = r + 1;
        }
        for (k, &(s, d)) in g.edges.iter().enumerate() {
            writeln!(
                out,
                "{},{},{k},{s},{d},{:.16e},{}",
                self.graph_id, self.source, self.scores[k], rank[k]
            )
            .expect("writing to a String");
        }
        Ok(())
    }
}

pub const SCORE_CSV_HEADER: &str = "graph_id,source,edge,src,dst,score,rank";

fn check_finite(scores: &[f64], what: &str) -> Result<()> {
    if scores.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} edge gradient")))
    }
}

/// Integrated gradients of the `target` logit over edge weights, from the
/// all-zero baseline to all ones, midpoint rule with `steps` points.
pub fn ig_edge_scores(
    model: &GnnModel,
    g: &GraphData,
    target: usize,
    steps: usize,
) -> Result<EdgeScoreMap> {
    if steps == 0 {
        return Err(Error::Config(
            "integrated gradients needs at least one step".into(),
        ));
    }
    let m = g.num_edges();
    let mut total = vec![0.0; m];
    for t in 0..steps {
        let w = vec![(t as f64 + 0.5) / steps as f64; m];
        let (_, grads) = model.logit_gradients(g, Some(&w), target, ReluRule::Plain)?;
        for (acc, d) in total.iter_mut().zip(&grads.dew) {
            *acc += d;
        }
    }
    let scores: Vec<f64> = total.into_iter().map(|v| v / steps as f64).collect();
    check_finite(&scores, "integrated")?;
    Ok(EdgeScoreMap {
        graph_id: g.id.clone(),
        source: format!("ig:{}", model.kind),
        scores,
    })
}

/// Guided-backpropagation gradient of the `target` logit at unit edge weights.
pub fn gbp_edge_scores(model: &GnnModel, g: &GraphData, target: usize) -> Result<EdgeScoreMap> {
    let (_, grads) = model.logit_gradients(g, None, target, ReluRule::Guided)?;
    check_finite(&grads.dew, "guided")?;
    Ok(EdgeScoreMap {
        graph_id: g.id.clone(),
        source: format!("gbp:{}", model.kind),
        scores: grads.dew,
    })
}

pub fn edge_scores(
    model: &GnnModel,
    g: &GraphData,
    target: usize,
    explainer: Explainer,
    steps: usize,
) -> Result<EdgeScoreMap> {
    match explainer {
        Explainer::Ig => ig_edge_scores(model, g, target, steps),
        Explainer::Gbp => gbp_edge_scores(model, g, target),
    }
}

/// `|β_k| / Σ_j |β_j|`, or uniform when every score is zero.
pub fn normalize_scores(raw: &EdgeScoreMap) -> EdgeScoreMap {
    let m = raw.len();
    let total: f64 = raw.scores.iter().map(|v| v.abs()).sum();
    let scores = if total > 0.0 {
        raw.scores.iter().map(|v| v.abs() / total).collect()
    } else {
        vec![1.0 / m as f64; m]
    };
    EdgeScoreMap {
        graph_id: raw.graph_id.clone(),
        source: raw.source.clone(),
        scores,
    }
}

/// `β_a = Σ_i α_i β̃_i`.
pub fn aggregate_explanations(
    maps: &[EdgeScoreMap],
    alphas: &[f64],
    source: &str,
) -> Result<EdgeScoreMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::shape("no explanations to aggregate"))?;
    if maps.len() != alphas.len() {
        return Err(Error::shape(format!(
            "{} maps for {} attention weights",
            maps.len(),
            alphas.len()
        )));
    }
    if let Some(bad) = maps
        .iter()
        .find(|m| m.len() != first.len() || m.graph_id != first.graph_id)
    {
        return Err(Error::shape(format!(
            "edge-count mismatch: `{}` has {} scores, `{}` has {}",
            first.graph_id,
            first.len(),
            bad.graph_id,
            bad.len()
        )));
    }
    let mut scores = vec![0.0; first.len()];
    for (map, &a) in maps.iter().zip(alphas) {
        for (acc, s) in scores.iter_mut().zip(&map.scores) {
            *acc += a * s;
        }
    }
    Ok(EdgeScoreMap {
        graph_id: first.graph_id.clone(),
        source: source.to_string(),
        scores,
    })
}

/// Number of edges kept at a sparsity level: `⌈(1 - s)·m⌉`.
pub fn kept_edge_count(m: usize, sparsity: f64) -> usize {
    // the small offset absorbs rounding in (1 - s)·m, e.g. (1 - 0.7)·10
    (((1.0 - sparsity) * m as f64) - 1e-9)
        .ceil()
        .clamp(0.0, m as f64) as usize
}

/// Keep-mask of the top `⌈(1 - s)·m⌉` edges.
pub fn top_edge_mask(scores: &EdgeScoreMap, sparsity: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let mut keep = vec![false; scores.len()];
    for &k in scores
        .ranking()
        .iter()
        .take(kept_edge_count(scores.len(), sparsity))
    {
        keep[k] = true;
    }
    Ok(keep)
}

/// `(G_S, G_complement)`: the top-scored edges and the rest, on the same node set.
pub fn select_subgraph(
    g: &GraphData,
    scores: &EdgeScoreMap,
    sparsity: f64,
) -> Result<(GraphData, GraphData)> {
    if scores.len() != g.num_edges() {
        return Err(Error::shape(format!(
            "{} scores for {} edges",
            scores.len(),
            g.num_edges()
        )));
    }
    let keep = top_edge_mask(scores, sparsity)?;
    let rest: Vec<bool> = keep.iter().map(|k| !k).collect();
    Ok((g.with_edges(&keep), g.with_edges(&rest)))
}

/// Uniform random scores, the baseline explainer.
pub fn random_scores(g: &GraphData, seed: u64) -> EdgeScoreMap {
    let mut rng = rng_stream(seed, 0);
    EdgeScoreMap {
        graph_id: g.id.clone(),
        source: "random".into(),
        scores: (0..g.num_edges()).map(|_| rng.gen::<f64>()).collect(),
    }
}

/// Per-learner normalized maps and their attention-weighted aggregate for
/// the ensemble's predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleExplanation {
    pub target: Label,
    pub alphas: Vec<f64>,
    pub per_learner: Vec<EdgeScoreMap>,
    pub aggregated: EdgeScoreMap,
}

pub fn explain_ensemble(
    ens: &Ensemble,
    g: &GraphData,
    explainer: Explainer,
    steps: usize,
) -> Result<EnsembleExplanation> {
    let pred = ens.predict(g)?;
    let target = pred.label;
    let per_learner = ens
        .models
        .iter()
        .map(|m| {
            edge_scores(m, g, target.index(), explainer, steps).map(|raw| normalize_scores(&raw))
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregated = aggregate_explanations(
        &per_learner,
        &pred.alphas,
        &format!("{explainer}:aggregated"),
    )?;
    Ok(EnsembleExplanation {
        target,
        alphas: pred.alphas,
        per_learner,
        aggregated,
    })
}

/// Fidelity± at one sparsity level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityPoint {
    pub sparsity: f64,
    pub fidelity_plus: f64,
    pub fidelity_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub method: String,
    pub n_graphs: usize,
    pub points: Vec<FidelityPoint>,
}

/// Fidelity+ = 1 - mean 1(ŷ(G_{C∖S}) = ŷ), Fidelity- = 1 - mean 1(ŷ(G_S) = ŷ), with
/// removed edges deleted. `scores[i]` explains `graphs[i]`.
pub fn fidelity<P>(
    predict: P,
    graphs: &[GraphData],
    scores: &[EdgeScoreMap],
    grid: &[f64],
    method: &str,
) -> Result<FidelityReport>
where
    P: Fn(&GraphData) -> Result<Label>,
{
    if graphs.is_empty() {
        return Err(Error::Data("fidelity over an empty graph list".into()));
    }
    if graphs.len() != scores.len() {
        return Err(Error::shape(format!(
            "{} graphs with {} score maps",
            graphs.len(),
            scores.len()
        )));
    }
    let full: Vec<Label> = graphs.iter().map(&predict).collect::<Result<_>>()?;
    let n = graphs.len() as f64;
    let mut points = Vec::with_capacity(grid.len());
    for &s in grid {
        // counting changes rather than 1 - agreement keeps the ratios exact
        let (mut changed_complement, mut changed_subgraph) = (0usize, 0usize);
        for ((g, sc), y) in graphs.iter().zip(scores).zip(&full) {
            let (sub, rest) = select_subgraph(g, sc, s)?;
            changed_subgraph += usize::from(predict(&sub)? != *y);
            changed_complement += usize::from(predict(&rest)? != *y);
        }
        points.push(FidelityPoint {
            sparsity: s,
            fidelity_plus: changed_complement as f64 / n,
            fidelity_minus: changed_subgraph as f64 / n,
        });
    }
    Ok(FidelityReport {
        method: method.to_string(),
        n_graphs: graphs.len(),
        points,
    })
}

pub const FIDELITY_METHODS: [&str; 3] = ["ig_aggregated", "gbp_aggregated", "random"];

/// Ensemble Fidelity± of the aggregated IG and GBP explanations and of random
/// scores over `graphs`, in [`FIDELITY_METHODS`] order.
pub fn fidelity_sweep(
    ens: &Ensemble,
    graphs: &[GraphData],
    grid: &[f64],
    steps: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<FidelityReport>> {
    let explained = map_jobs(jobs, graphs.len(), |i| {
        let g = &graphs[i];
        let ig = explain_ensemble(ens, g, Explainer::Ig, steps)?.aggregated;
        let gbp = explain_ensemble(ens, g, Explainer::Gbp, steps)?.aggregated;
        Ok([ig, gbp, random_scores(g, derive_seed(seed, &[i as u64]))])
    })?;
    let predict = |g: &GraphData| ens.predict(g).map(|p| p.label);
    FIDELITY_METHODS
        .iter()
        .enumerate()
        .map(|(j, method)| {
            let maps: Vec<EdgeScoreMap> = explained.iter().map(|e| e[j].clone()).collect();
            fidelity(predict, graphs, &maps, grid, method)
        })
        .collect()
}

fn dot_id(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// DOT digraph of `g`; the `top_k` highest-scored edges are drawn solid with
/// pen width proportional to their score, the others thin and dashed.
pub fn render_dot(g: &GraphData, scores: &EdgeScoreMap, top_k: usize) -> Result<String> {
    if scores.len() != g.num_edges() {
        return Err(Error::shape(format!(
            "{} scores for {} edges",
            scores.len(),
            g.num_edges()
        )));
    }
    let ranking = scores.ranking();
    let top: Vec<usize> = ranking.iter().copied().take(top_k).collect();
    let max = top.iter().map(|&k| scores.scores[k]).fold(0.0, f64::max);
    let mut out = String::new();
    writeln!(out, "digraph {} {{", dot_id(&g.id)).expect("writing to a String");
    writeln!(out, "  node [shape=box];").expect("writing to a String");
    for v in 0..g.num_nodes() {
        writeln!(out, "  n{v} [label=\"{v}\"];").expect("writing to a String");
    }
    for (k, &(s, d)) in g.edges.iter().enumerate() {
        let score = scores.scores[k];
        let attrs = if top.contains(&k) {
            let width = if max > 0.0 {
                1.0 + 4.0 * score / max
            } else {
                1.0
            };
            format!("penwidth={width:.3}, color=\"#b22222\", label=\"{score:.3}\"")
        } else {
            "penwidth=0.5, style=dashed, color=gray".to_string()
        };
        writeln!(out, "  n{s} -> n{d} [{attrs}];").expect("writing to a String");
    }
    out.push_str("}\n");
    Ok(out)
}
