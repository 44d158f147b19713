//! Seeded synthetic CFG corpus with class signal in both structure and
//! instruction content.
//!
//! Benign graphs are mostly straight-line code with shallow if/else diamonds and
//! at most an occasional loop. Malicious graphs carry dense back-edge loop motifs,
//! long call chains, and draw a larger share of their blocks from a pool of
//! packer/decryptor-style instruction sequences, preferentially at loop headers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{assign_split, CfgGraph, Corpus, Label, NodePayload, Split};
use crate::diffmath::{derive_seed, rng_stream};
use crate::error::{Error, Result};
use crate::isa::InstructionRecord as I;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_graphs: usize,
    /// Fraction of malicious graphs.
    pub balance: f64,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub test_fraction: f64,
    /// Per-graph share of suspicious blocks (rounded to a count), drawn uniformly from these ranges.
    pub benign_suspicious: (f64, f64),
    pub malicious_suspicious: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_graphs: 400,
            balance: 0.5,
            min_nodes: 8,
            max_nodes: 24,
            test_fraction: 0.2,
            benign_suspicious: (0.0, 0.12),
            malicious_suspicious: (0.3, 0.6),
        }
    }
}

impl SynthSpec {
    pub fn with_size(n_graphs: usize) -> Self {
        SynthSpec {
            n_graphs,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        let range = |(lo, hi): (f64, f64)| frac(lo) && frac(hi) && lo <= hi;
        if self.n_graphs == 0 {
            return Err(Error::Config(
                "synthetic corpus needs at least one graph".into(),
            ));
        }
        if self.min_nodes < 2 || self.max_nodes < self.min_nodes {
            return Err(Error::Config(format!(
                "node range [{}, {}] is invalid (need 2 <= min <= max)",
                self.min_nodes, self.max_nodes
            )));
        }
        if !frac(self.balance) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(
                "balance must be in [0,1] and test_fraction in [0,1)".into(),
            ));
        }
        if !range(self.benign_suspicious) || !range(self.malicious_suspicious) {
            return Err(Error::Config(
                "suspicious-block ranges must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

fn benign_pool() -> Vec<Vec<I>> {
    vec![
        // push rbp; mov rbp, rsp; sub rsp, 0x20
        vec![
            I::opcode(0x55),
            I::opcode(0x89).with_modrm(3, 4, 5),
            I::opcode(0x83).with_modrm(3, 5, 4).with_immediate(0x20),
        ],
        // leave; ret
        vec![I::opcode(0xC9), I::opcode(0xC3)],
        // mov eax, [rbp-8]; add eax, 1; mov [rbp-8], eax
        vec![
            I::opcode(0x8B).with_modrm(1, 0, 5).with_displacement(0xF8),
            I::opcode(0x83).with_modrm(3, 0, 0).with_immediate(1),
            I::opcode(0x89).with_modrm(1, 0, 5).with_displacement(0xF8),
        ],
        // cmp eax, 10; jl
        vec![
            I::opcode(0x3D).with_immediate(10),
            I::opcode(0x7C).with_immediate(0x12),
        ],
        // call; test eax, eax; je
        vec![
            I::opcode(0xE8).with_immediate(0x400),
            I::opcode(0x85).with_modrm(3, 0, 0),
            I::opcode(0x74).with_immediate(0x08),
        ],
        // lea rax, [rip+disp]; mov rdi, rax; call
        vec![
            I::opcode(0x8D)
                .with_prefix(4)
                .with_modrm(0, 0, 5)
                .with_displacement(0x2000),
            I::opcode(0x89).with_prefix(4).with_modrm(3, 0, 7),
            I::opcode(0xE8).with_immediate(0x180),
        ],
        // xor eax, eax; pop rbx; ret
        vec![
            I::opcode(0x31).with_modrm(3, 0, 0),
            I::opcode(0x5B),
            I::opcode(0xC3),
        ],
        // mov ecx, [rax+rbx*4]; add edx, ecx; inc rbx; cmp rbx, rsi; jne
        vec![
            I::opcode(0x8B).with_modrm(0, 1, 4).with_sib(2, 3, 0),
            I::opcode(0x01).with_modrm(3, 1, 2),
            I::opcode(0xFF).with_prefix(4).with_modrm(3, 0, 3),
            I::opcode(0x39).with_prefix(4).with_modrm(3, 6, 3),
            I::opcode(0x75).with_immediate(0xF0),
        ],
        // mov edi, imm; call; mov [rbp-0x10], rax
        vec![
            I::opcode(0xBF).with_immediate(0x40),
            I::opcode(0xE8).with_immediate(0x900),
            I::opcode(0x89)
                .with_prefix(4)
                .with_modrm(1, 0, 5)
                .with_displacement(0xF0),
        ],
        // jmp rel32
        vec![I::opcode(0xE9).with_immediate(0x60)],
        // push rbx; push r12; mov ebx, edi
        vec![
            I::opcode(0x53),
            I::opcode(0x54).with_prefix(5),
            I::opcode(0x89).with_modrm(3, 7, 3),
        ],
        // movzx eax, byte [rdi]; test al, al
        vec![
            I::opcode(0x0F).with_modrm(0, 0, 7),
            I::opcode(0x84).with_modrm(3, 0, 0),
        ],
    ]
}

fn suspicious_pool() -> Vec<Vec<I>> {
    vec![
        // xor-decrypt loop body
        vec![
            I::opcode(0x8A).with_modrm(0, 0, 4).with_sib(0, 1, 6),
            I::opcode(0x34).with_immediate(0x5A),
            I::opcode(0x88).with_modrm(0, 0, 4).with_sib(0, 1, 7),
            I::opcode(0xFF).with_modrm(3, 0, 1),
            I::opcode(0x39).with_modrm(3, 2, 1),
            I::opcode(0x72).with_immediate(0xEE),
        ],
        // rep movsb; rep stosd
        vec![
            I::opcode(0xA4).with_prefix(2),
            I::opcode(0xAB).with_prefix(2),
        ],
        // mov eax, 0x3b; int 0x80
        vec![
            I::opcode(0xB8).with_immediate(0x3B),
            I::opcode(0xCD).with_immediate(0x80),
        ],
        // rdtsc timing check
        vec![
            I::opcode(0x0F),
            I::opcode(0x89).with_modrm(3, 0, 3),
            I::opcode(0x0F),
            I::opcode(0x29).with_modrm(3, 3, 0),
            I::opcode(0x3D).with_immediate(0x1000),
            I::opcode(0x77).with_immediate(0x30),
        ],
        // push imm32; ret
        vec![I::opcode(0x68).with_immediate(0x0040_1000), I::opcode(0xC3)],
        // pushad; call $+5; pop ebp; sub ebp, imm
        vec![
            I::opcode(0x60),
            I::opcode(0xE8).with_immediate(0),
            I::opcode(0x5D),
            I::opcode(0x81).with_modrm(3, 5, 5).with_immediate(0x1005),
        ],
        // ror-13 API hash
        vec![
            I::opcode(0xC1).with_modrm(3, 1, 2).with_immediate(13),
            I::opcode(0x01).with_modrm(3, 0, 2),
            I::opcode(0xAC),
            I::opcode(0x84).with_modrm(3, 0, 0),
            I::opcode(0x75).with_immediate(0xF4),
        ],
        // nop sled into short jmp
        vec![
            I::opcode(0x90),
            I::opcode(0x90),
            I::opcode(0x90),
            I::opcode(0xEB).with_immediate(0x10),
        ],
    ]
}

fn push_edge(edges: &mut Vec<(usize, usize)>, e: (usize, usize)) {
    if e.0 != e.1 && !edges.contains(&e) {
        edges.push(e);
    }
}

/// Edge list and loop-header set for one graph.
fn structure<R: Rng>(label: Label, n: usize, rng: &mut R) -> (Vec<(usize, usize)>, Vec<bool>) {
    let mut edges = Vec::new();
    let mut header = vec![false; n];
    for i in 0..n - 1 {
        push_edge(&mut edges, (i, i + 1));
    }
    match label {
        Label::Benign => {
            // if/else diamonds
            let mut i = 0;
            while i + 3 < n {
                if rng.gen_bool(0.45) {
                    push_edge(&mut edges, (i, i + 2));
                    i += 3;
                } else {
                    i += 1;
                }
            }
            if rng.gen_bool(0.25) {
                let end = rng.gen_range(2..n);
                let start = end - rng.gen_range(1..=end.min(2));
                push_edge(&mut edges, (end, start));
                header[start] = true;
            }
        }
        Label::Malicious => {
            // nested loop motifs: several short back edges
            let loops = (n / 4).max(2);
            for _ in 0..loops {
                let end = rng.gen_range(1..n);
                let start = end - rng.gen_range(1..=end.min(4));
                push_edge(&mut edges, (end, start));
                header[start] = true;
            }
            if rng.gen_bool(0.3) && n > 3 {
                push_edge(&mut edges, (0, rng.gen_range(2..n)));
            }
        }
    }
    (edges, header)
}

fn graph<R: Rng>(
    id: String,
    label: Label,
    spec: &SynthSpec,
    pools: &(Vec<Vec<I>>, Vec<Vec<I>>),
    rng: &mut R,
) -> CfgGraph {
    let n = rng.gen_range(spec.min_nodes..=spec.max_nodes);
    let (edges, header) = structure(label, n, rng);
    let (lo, hi) = match label {
        Label::Benign => spec.benign_suspicious,
        Label::Malicious => spec.malicious_suspicious,
    };
    let share = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let count = ((share * n as f64).round() as usize).min(n);
    // weighted sampling without replacement (keys u^(1/w)); loop headers in
    // malicious code are where the unpacking happens
    let mut keys: Vec<(f64, usize)> = (0..n)
        .map(|k| {
            let w = if label == Label::Malicious && header[k] {
                1.6
            } else {
                1.0
            };
            (rng.gen::<f64>().powf(1.0 / w), k)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut suspicious = vec![false; n];
    for &(_, k) in &keys[..count] {
        suspicious[k] = true;
    }
    let blocks = suspicious
        .iter()
        .map(|&s| {
            let pool = if s { &pools.1 } else { &pools.0 };
            pool[rng.gen_range(0..pool.len())].clone()
        })
        .collect();
    CfgGraph {
        id,
        label,
        split: Split::Train,
        nodes: NodePayload::Blocks(blocks),
        edges,
    }
}

/// Deterministic in `(spec, seed)`; splits are stratified by label.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let n_mal = (spec.n_graphs as f64 * spec.balance).round() as usize;
    let pools = (benign_pool(), suspicious_pool());
    let graphs: Vec<CfgGraph> = (0..spec.n_graphs)
        .map(|i| {
            let label = if i < spec.n_graphs - n_mal {
                Label::Benign
            } else {
                Label::Malicious
            };
            let mut rng = rng_stream(derive_seed(seed, &[i as u64]), 0);
            graph(format!("g{i:05}"), label, spec, &pools, &mut rng)
        })
        .collect();
    let mut graphs = graphs;
    assign_split(
        &mut graphs,
        spec.test_fraction,
        derive_seed(seed, &[u64::MAX]),
    );
    Corpus::new(graphs)
}
