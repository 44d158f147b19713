//! Labeled control-flow graphs: data model, the line-delimited JSON corpus
//! format, stratified splitting, and node-feature construction.
//!
//! One graph per line:
//!
//! ```text
//! {"id":"g0","label":1,"split":"train","nodes":{"blocks":[[{"opcode":144}],...]},"edges":[[0,1],...]}
//! {"id":"g1","label":0,"split":"test","nodes":{"x":[[0.5,...],...]},"edges":[[1,0]]}
//! ```
//!
//! The position of an edge in `edges` is its edge index.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::diffmath::{rng_stream, to_json_string, Matrix};
use crate::error::{Error, Result};
use crate::isa::{encode_block, AggMode, BlockVector, InstructionRecord, INSTR_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Benign = 0,
    Malicious = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Malicious];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Benign),
            1 => Some(Label::Malicious),
            _ => None,
        }
    }

    /// Argmax over `[p_benign, p_malicious]`; a tie goes to malicious.
    pub fn from_probs(probs: &[f64]) -> Label {
        if probs[1] >= probs[0] {
            Label::Malicious
        } else {
            Label::Benign
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Label::from_index(v as usize).ok_or_else(|| format!("label must be 0 or 1, got {v}"))
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodePayload {
    /// One instruction list per basic block.
    Blocks(Vec<Vec<InstructionRecord>>),
    /// Precomputed feature rows.
    X(Vec<Vec<f64>>),
}

impl NodePayload {
    pub fn node_count(&self) -> usize {
        match self {
            NodePayload::Blocks(b) => b.len(),
            NodePayload::X(x) => x.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfgGraph {
    pub id: String,
    pub label: Label,
    #[serde(default)]
    pub split: Split,
    pub nodes: NodePayload,
    pub edges: Vec<(usize, usize)>,
}

impl CfgGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.node_count()
    }

    /// Structural checks: at least one node, endpoints in range, no duplicate edges,
    /// consistent finite feature rows.
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Graph {
            id: self.id.clone(),
            message,
        };
        let n = self.node_count();
        if n == 0 {
            return Err(err("graph has no nodes".into()));
        }
        let mut seen = HashSet::with_capacity(self.edges.len());
        for &(s, d) in &self.edges {
            if s >= n || d >= n {
                return Err(err(format!(
                    "node index out of range: edge ({s},{d}) in a {n}-node graph"
                )));
            }
            if !seen.insert((s, d)) {
                return Err(err(format!("duplicate edge ({s},{d})")));
            }
        }
        match &self.nodes {
            NodePayload::X(rows) => {
                let width = rows[0].len();
                if width == 0 {
                    return Err(err("feature rows are empty".into()));
                }
                if rows.iter().any(|r| r.len() != width) {
                    return Err(err("feature rows have different widths".into()));
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(err("non-finite feature value".into()));
                }
            }
            NodePayload::Blocks(blocks) => {
                for instr in blocks.iter().flatten() {
                    instr.validate().map_err(|e| err(e.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

/// Anything with a stable id and a binary label.
pub trait Labeled {
    fn id(&self) -> &str;
    fn label(&self) -> Label;
}

impl Labeled for CfgGraph {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Label {
        self.label
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub graphs: Vec<CfgGraph>,
}

impl Corpus {
    pub fn new(graphs: Vec<CfgGraph>) -> Result<Self> {
        let c = Corpus { graphs };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.graphs.len());
        for g in &self.graphs {
            if !ids.insert(g.id.as_str()) {
                return Err(Error::DuplicateId(g.id.clone()));
            }
            g.validate()?;
        }
        Ok(())
    }

    /// Both classes must appear among the training graphs.
    pub fn validate_for_training(&self) -> Result<()> {
        for class in Label::ALL {
            if !self.train().any(|g| g.label == class) {
                return Err(Error::Data(format!("no {class} graphs in the train split")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn train(&self) -> impl Iterator<Item = &CfgGraph> {
        self.graphs.iter().filter(|g| g.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &CfgGraph> {
        self.graphs.iter().filter(|g| g.split == Split::Test)
    }

    pub fn class_counts<'a>(graphs: impl IntoIterator<Item = &'a CfgGraph>) -> [usize; 2] {
        let mut counts = [0; 2];
        for g in graphs {
            counts[g.label.index()] += 1;
        }
        counts
    }

    /// Canonical text: one compact JSON record per line, 17-digit floats.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for g in &self.graphs {
            out.push_str(&to_json_string(g)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut graphs = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::CorpusLine {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let g: CfgGraph = serde_json::from_str(&line).map_err(|e| Error::CorpusLine {
                line: line_no,
                message: e.to_string(),
            })?;
            g.validate().map_err(|e| Error::CorpusLine {
                line: line_no,
                message: e.to_string(),
            })?;
            if !ids.insert(g.id.clone()) {
                return Err(Error::CorpusLine {
                    line: line_no,
                    message: Error::DuplicateId(g.id).to_string(),
                });
            }
            graphs.push(g);
        }
        Ok(Corpus { graphs })
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::parse_jsonl(BufReader::new(file))
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let text = corpus.to_jsonl()?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Assignment of training graphs to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPartition {
    pub k: usize,
    /// Fold index per input position.
    pub assignment: Vec<usize>,
    pub ids: Vec<String>,
}

impl FoldPartition {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.assignment[i])
    }

    /// Input positions belonging to each fold, in input order.
    pub fn folds(&self) -> Vec<Vec<usize>> {
        let mut folds = vec![Vec::new(); self.k];
        for (i, &f) in self.assignment.iter().enumerate() {
            folds[f].push(i);
        }
        folds
    }

    pub fn by_id(&self) -> BTreeMap<&str, usize> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.assignment.iter().copied())
            .collect()
    }
}

/// Seeded stratified partition: each class is shuffled and dealt round-robin,
/// continuing the deal across classes so fold sizes also stay balanced.
pub fn stratified_kfold<G: Labeled>(graphs: &[G], k: usize, seed: u64) -> Result<FoldPartition> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut assignment = vec![usize::MAX; graphs.len()];
    let mut next = 0usize;
    for class in Label::ALL {
        let mut members: Vec<usize> = (0..graphs.len())
            .filter(|&i| graphs[i].label() == class)
            .collect();
        if members.len() < k {
            return Err(Error::Data(format!(
                "{class} class has {} graphs, fewer than k={k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng_stream(seed, class.index() as u64));
        for i in members {
            assignment[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldPartition {
        k,
        assignment,
        ids: graphs.iter().map(|g| g.id().to_string()).collect(),
    })
}

/// Marks a stratified `test_fraction` of the graphs as test, the rest as train.
pub fn assign_split(graphs: &mut [CfgGraph], test_fraction: f64, seed: u64) {
    for class in Label::ALL {
        let mut members: Vec<usize> = (0..graphs.len())
            .filter(|&i| graphs[i].label == class)
            .collect();
        members.shuffle(&mut rng_stream(seed, 100 + class.index() as u64));
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        for (rank, &i) in members.iter().enumerate() {
            graphs[i].split = if rank < n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
}

/// A graph ready for message passing: edges plus an `N × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphData {
    pub id: String,
    pub label: Label,
    pub edges: Vec<(usize, usize)>,
    pub x: Matrix,
}

impl Labeled for GraphData {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Label {
        self.label
    }
}

impl GraphData {
    pub fn new(
        id: impl Into<String>,
        label: Label,
        edges: Vec<(usize, usize)>,
        x: Matrix,
    ) -> Result<Self> {
        let id = id.into();
        let n = x.rows();
        if n == 0 {
            return Err(Error::Graph {
                id,
                message: "graph has no nodes".into(),
            });
        }
        if let Some(&(s, d)) = edges.iter().find(|&&(s, d)| s >= n || d >= n) {
            return Err(Error::Graph {
                id,
                message: format!("node index out of range: edge ({s},{d}) in a {n}-node graph"),
            });
        }
        Ok(GraphData {
            id,
            label,
            edges,
            x,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.x.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Same nodes, keeping only edges whose flag is set.
    pub fn with_edges(&self, keep: &[bool]) -> GraphData {
        GraphData {
            id: self.id.clone(),
            label: self.label,
            edges: self
                .edges
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(e, _)| *e)
                .collect(),
            x: self.x.clone(),
        }
    }
}

/// Block vectors of every node, with empty blocks mapped to the zero vector.
pub fn block_vectors(graph: &CfgGraph, mode: AggMode) -> Result<Vec<BlockVector>> {
    let NodePayload::Blocks(blocks) = &graph.nodes else {
        return Err(Error::Graph {
            id: graph.id.clone(),
            message: "graph carries feature rows, not instruction blocks".into(),
        });
    };
    blocks
        .iter()
        .enumerate()
        .map(|(k, block)| match encode_block(block, mode) {
            Err(Error::EmptyBlock) => {
                log::warn!(
                    "graph {}: node {k} has an empty basic block, using zeros",
                    graph.id
                );
                Ok(BlockVector::zeros())
            }
            other => other,
        })
        .collect()
}

/// Row `k` is the encoder applied to the aggregated block of node `k`. Graphs that
/// already carry feature rows are passed through unchanged.
pub fn build_feature_matrix(
    graph: &CfgGraph,
    encoder: Option<&Autoencoder>,
    mode: AggMode,
) -> Result<GraphData> {
    let x = match &graph.nodes {
        NodePayload::X(rows) => Matrix::from_rows(rows)?,
        NodePayload::Blocks(_) => {
            let encoder = encoder.ok_or_else(|| Error::Graph {
                id: graph.id.clone(),
                message: "instruction blocks need a trained autoencoder".into(),
            })?;
            let vectors = block_vectors(graph, mode)?;
            let mut raw = Matrix::zeros(vectors.len(), INSTR_DIM);
            for (k, v) in vectors.iter().enumerate() {
                raw.row_mut(k).copy_from_slice(&v.0);
            }
            encoder.encode_rows(&raw)?
        }
    };
    GraphData::new(graph.id.clone(), graph.label, graph.edges.clone(), x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(id: &str, label: Label, n: usize, edges: Vec<(usize, usize)>) -> CfgGraph {
        CfgGraph {
            id: id.into(),
            label,
            split: Split::Train,
            nodes: NodePayload::Blocks(vec![vec![InstructionRecord::opcode(0x90)]; n]),
            edges,
        }
    }

    #[test]
    fn loads_valid_lines() {
        let text = "\
{\"id\":\"a\",\"label\":0,\"nodes\":{\"blocks\":[[{\"opcode\":144}],[{\"opcode\":195}]]},\"edges\":[[0,1]]}
{\"id\":\"b\",\"label\":1,\"split\":\"test\",\"nodes\":{\"x\":[[0.5,1.0]]},\"edges\":[]}

{\"id\":\"c\",\"label\":1,\"nodes\":{\"blocks\":[[]]},\"edges\":[[0,0]]}
";
        let c = Corpus::parse_jsonl(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.graphs[1].split, Split::Test);
        assert_eq!(c.train().count(), 2);
    }

    #[test]
    fn rejects_bad_corpora() {
        let dangling =
            "{\"id\":\"a\",\"label\":0,\"nodes\":{\"x\":[[1],[1],[1],[1]]},\"edges\":[[5,0]]}\n";
        let err = Corpus::parse_jsonl(dangling.as_bytes())
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("node index out of range") && err.contains("line 1"),
            "{err}"
        );

        let dup = "{\"id\":\"a\",\"label\":0,\"nodes\":{\"x\":[[1]]},\"edges\":[]}\n{\"id\":\"a\",\"label\":1,\"nodes\":{\"x\":[[1]]},\"edges\":[]}\n";
        let err = Corpus::parse_jsonl(dup.as_bytes()).unwrap_err().to_string();
        assert!(
            err.contains("duplicate graph id") && err.contains("line 2"),
            "{err}"
        );

        let malformed = "{\"id\":\"a\",\"label\":0,\"nodes\":{\"x\":[[1]]},\"edges\":[]}\n{\"id\":\"b\",\"label\":2\n";
        let err = Corpus::parse_jsonl(malformed.as_bytes())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");

        let bad_opcode =
            "{\"id\":\"a\",\"label\":0,\"nodes\":{\"blocks\":[[{\"opcode\":300}]]},\"edges\":[]}\n";
        let err = Corpus::parse_jsonl(bad_opcode.as_bytes())
            .unwrap_err()
            .to_string();
        assert!(err.contains("opcode out of range"), "{err}");

        let dup_edge = tiny("x", Label::Benign, 2, vec![(0, 1), (0, 1)]);
        assert!(dup_edge.validate().is_err());
    }

    #[test]
    fn kfold_stratifies_exactly() {
        let graphs: Vec<CfgGraph> = (0..100)
            .map(|i| {
                tiny(
                    &format!("g{i}"),
                    if i < 60 {
                        Label::Benign
                    } else {
                        Label::Malicious
                    },
                    1,
                    vec![],
                )
            })
            .collect();
        let p = stratified_kfold(&graphs, 5, 42).unwrap();
        for fold in p.folds() {
            let counts = Corpus::class_counts(fold.iter().map(|&i| &graphs[i]));
            assert_eq!(counts, [12, 8]);
        }
        assert_eq!(p, stratified_kfold(&graphs, 5, 42).unwrap());
        assert_ne!(p, stratified_kfold(&graphs, 5, 43).unwrap());

        let few = vec![
            tiny("a", Label::Benign, 1, vec![]),
            tiny("b", Label::Benign, 1, vec![]),
            tiny("c", Label::Malicious, 1, vec![]),
        ];
        assert!(stratified_kfold(&few, 2, 0).is_err());
        assert!(stratified_kfold(&graphs, 1, 0).is_err());
    }

    #[test]
    fn feature_rows_pass_through() {
        let g = CfgGraph {
            id: "f".into(),
            label: Label::Malicious,
            split: Split::Test,
            nodes: NodePayload::X(vec![vec![1.0, 2.0], vec![3.0, 4.0]]),
            edges: vec![(0, 1)],
        };
        let data = build_feature_matrix(&g, None, AggMode::Mean).unwrap();
        assert_eq!(data.x.shape(), (2, 2));
        assert!(
            build_feature_matrix(&tiny("b", Label::Benign, 1, vec![]), None, AggMode::Mean)
                .is_err()
        );
    }

    #[test]
    fn empty_block_maps_to_zeros() {
        let mut g = tiny("e", Label::Benign, 2, vec![]);
        if let NodePayload::Blocks(b) = &mut g.nodes {
            b[1].clear();
        }
        let v = block_vectors(&g, AggMode::Mean).unwrap();
        assert!(v[1].0.iter().all(|x| *x == 0.0));
        assert!(v[0].0.iter().any(|x| *x != 0.0));
    }
}
