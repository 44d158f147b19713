//! Message-passing layers with explicit backward passes.
//!
//! Every layer takes per-edge weights `ew` aligned with the graph's edge list so
//! that gradients can flow to individual edges. Self contributions are not
//! edges and always carry weight 1.

use crate::diffmath::ops::{self, ReluRule};
use crate::diffmath::Matrix;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Incoming message lists: for each destination, `(source, edge index)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    incoming: Vec<Vec<(usize, usize)>>,
    num_edges: usize,
}

impl Adjacency {
    /// With `symmetrize`, each edge also carries a message in the reverse
    /// direction under the same edge index (and weight).
    pub fn new(n: usize, edges: &[(usize, usize)], symmetrize: bool) -> Result<Self> {
        let mut incoming = vec![Vec::new(); n];
        for (k, &(s, d)) in edges.iter().enumerate() {
            if s >= n || d >= n {
                return Err(Error::shape(format!("edge ({s},{d}) in a {n}-node graph")));
            }
            incoming[d].push((s, k));
            if symmetrize && s != d {
                incoming[s].push((d, k));
            }
        }
        Ok(Adjacency {
            incoming,
            num_edges: edges.len(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.incoming.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn incoming(&self, v: usize) -> &[(usize, usize)] {
        &self.incoming[v]
    }

    /// In-degree plus one for the implicit self-loop.
    pub fn degree(&self, v: usize) -> f64 {
        (self.incoming[v].len() + 1) as f64
    }

    fn check(&self, h: &Matrix, ew: &[f64]) -> Result<()> {
        if h.rows() != self.num_nodes() {
            return Err(Error::shape(format!(
                "{} feature rows for {} nodes",
                h.rows(),
                self.num_nodes()
            )));
        }
        if ew.len() != self.num_edges {
            return Err(Error::shape(format!(
                "{} edge weights for {} edges",
                ew.len(),
                self.num_edges
            )));
        }
        Ok(())
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients leaving a layer: input features, edge weights, and parameters in
/// the same order the layer takes them.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dh: Matrix,
    pub dew: Vec<f64>,
    pub dparams: Vec<Matrix>,
}

// ---- GCN ----

#[derive(Debug, Clone)]
pub struct GcnCache {
    h: Matrix,
    z: Matrix,
    pre: Matrix,
}

/// `relu(Σ_{j ∈ N(i) ∪ {i}} ew_ij / sqrt(d_i d_j) · (H W)_j)`, self weight 1.
pub fn gcn_forward(
    h: &Matrix,
    adj: &Adjacency,
    ew: &[f64],
    w: &Matrix,
) -> Result<(Matrix, GcnCache)> {
    adj.check(h, ew)?;
    let z = h.matmul(w)?;
    let mut pre = Matrix::zeros(z.rows(), z.cols());
    for i in 0..adj.num_nodes() {
        let di = adj.degree(i);
        let row = pre.row_mut(i);
        axpy(row, 1.0 / di, z.row(i));
        for &(j, k) in adj.incoming(i) {
            axpy(row, ew[k] / (di * adj.degree(j)).sqrt(), z.row(j));
        }
    }
    let out = ops::relu(&pre);
    Ok((
        out,
        GcnCache {
            h: h.clone(),
            z,
            pre,
        },
    ))
}

pub fn gcn_backward(
    cache: &GcnCache,
    adj: &Adjacency,
    ew: &[f64],
    w: &Matrix,
    dout: &Matrix,
    rule: ReluRule,
) -> Result<LayerGrads> {
    let dpre = ops::relu_backward(&cache.pre, dout, rule)?;
    let mut dz = Matrix::zeros(cache.z.rows(), cache.z.cols());
    let mut dew = vec![0.0; ew.len()];
    for i in 0..adj.num_nodes() {
        let di = adj.degree(i);
        let g = dpre.row(i);
        axpy(dz.row_mut(i), 1.0 / di, g);
        for &(j, k) in adj.incoming(i) {
            let c = 1.0 / (di * adj.degree(j)).sqrt();
            axpy(dz.row_mut(j), ew[k] * c, g);
            dew[k] += c * dot(g, cache.z.row(j));
        }
    }
    Ok(LayerGrads {
        dh: dz.matmul_t(w)?,
        dew,
        dparams: vec![cache.h.t_matmul(&dz)?],
    })
}

// ---- GIN ----

#[derive(Debug, Clone)]
pub struct GinCache {
    h: Matrix,
    agg: Matrix,
    a1: Matrix,
    r: Matrix,
}

/// Parameters of the two-layer GIN MLP.
pub struct GinParams<'a> {
    pub w1: &'a Matrix,
    pub b1: &'a Matrix,
    pub w2: &'a Matrix,
    pub b2: &'a Matrix,
}

/// `MLP((1 + ε) h_v + Σ_u ew_uv h_u)` with ε = 0 and MLP = linear, ReLU, linear.
pub fn gin_forward(
    h: &Matrix,
    adj: &Adjacency,
    ew: &[f64],
    p: &GinParams,
) -> Result<(Matrix, GinCache)> {
    adj.check(h, ew)?;
    let agg = gin_aggregate(h, adj, ew);
    let a1 = ops::linear(&agg, p.w1, p.b1)?;
    let r = ops::relu(&a1);
    let out = ops::linear(&r, p.w2, p.b2)?;
    Ok((
        out,
        GinCache {
            h: h.clone(),
            agg,
            a1,
            r,
        },
    ))
}

fn gin_aggregate(h: &Matrix, adj: &Adjacency, ew: &[f64]) -> Matrix {
    let mut agg = h.clone();
    for v in 0..adj.num_nodes() {
        for &(u, k) in adj.incoming(v) {
            axpy(agg.row_mut(v), ew[k], h.row(u));
        }
    }
    agg
}

pub fn gin_backward(
    cache: &GinCache,
    adj: &Adjacency,
    ew: &[f64],
    p: &GinParams,
    dout: &Matrix,
    rule: ReluRule,
) -> Result<LayerGrads> {
    let second = ops::linear_backward(&cache.r, p.w2, dout)?;
    let da1 = ops::relu_backward(&cache.a1, &second.dx, rule)?;
    let first = ops::linear_backward(&cache.agg, p.w1, &da1)?;
    let dagg = first.dx;
    let mut dh = dagg.clone();
    let mut dew = vec![0.0; ew.len()];
    for v in 0..adj.num_nodes() {
        let g = dagg.row(v);
        for &(u, k) in adj.incoming(v) {
            axpy(dh.row_mut(u), ew[k], g);
            dew[k] += dot(g, cache.h.row(u));
        }
    }
    Ok(LayerGrads {
        dh,
        dew,
        dparams: vec![first.dw, first.db, second.dw, second.db],
    })
}

// ---- GAT ----

/// Attention parameters: `w` (in × out), and the two halves of `a` as 1 × out rows.
pub struct GatParams<'a> {
    pub w: &'a Matrix,
    pub a_dst: &'a Matrix,
    pub a_src: &'a Matrix,
}

#[derive(Debug, Clone)]
pub struct GatCache {
    h: Matrix,
    z: Matrix,
    /// Per destination: `(source, edge index or None for the self edge, score, alpha)`.
    nbrs: Vec<Vec<(usize, Option<usize>, f64, f64)>>,
    pre: Matrix,
}

impl GatCache {
    /// Attention coefficients of node `v` as `(source, edge index, alpha)`.
    pub fn attention(&self, v: usize) -> impl Iterator<Item = (usize, Option<usize>, f64)> + '_ {
        self.nbrs[v].iter().map(|&(u, k, _, a)| (u, k, a))
    }
}

/// `relu(Σ_{u ∈ N(v)} ew_uv α_vu (H W)_u)` with
/// `α_v· = softmax(LeakyReLU(a_dst·z_v + a_src·z_u))`. The self edge joins
/// `N(v)` when `self_loop` is set.
pub fn gat_forward(
    h: &Matrix,
    adj: &Adjacency,
    ew: &[f64],
    p: &GatParams,
    self_loop: bool,
) -> Result<(Matrix, GatCache)> {
    adj.check(h, ew)?;
    let z = h.matmul(p.w)?;
    let s_dst: Vec<f64> = z.row_iter().map(|r| dot(r, p.a_dst.as_slice())).collect();
    let s_src: Vec<f64> = z.row_iter().map(|r| dot(r, p.a_src.as_slice())).collect();
    let mut pre = Matrix::zeros(z.rows(), z.cols());
    let mut nbrs = Vec::with_capacity(adj.num_nodes());
    for v in 0..adj.num_nodes() {
        let mut list: Vec<(usize, Option<usize>, f64, f64)> =
            Vec::with_capacity(adj.incoming(v).len() + 1);
        if self_loop {
            list.push((v, None, 0.0, 0.0));
        }
        list.extend(adj.incoming(v).iter().map(|&(u, k)| (u, Some(k), 0.0, 0.0)));
        let scores: Vec<f64> = list.iter().map(|&(u, ..)| s_dst[v] + s_src[u]).collect();
        let alpha = if list.is_empty() {
            Vec::new()
        } else {
            ops::softmax(&centered_logits(&list, &scores, &s_src))
        };
        let row = pre.row_mut(v);
        for (entry, (&t, &a)) in list.iter_mut().zip(scores.iter().zip(&alpha)) {
            entry.2 = t;
            entry.3 = a;
            let weight = entry.1.map_or(1.0, |k| ew[k]);
            axpy(row, weight * a, z.row(entry.0));
        }
        nbrs.push(list);
    }
    let out = ops::relu(&pre);
    Ok((
        out,
        GatCache {
            h: h.clone(),
            z,
            nbrs,
            pre,
        },
    ))
}

/// `LeakyReLU(t_u) - LeakyReLU(t_max)`. When both sides share a linear piece
/// the destination term cancels symbolically, which keeps attention exactly
/// invariant to it instead of only up to rounding.
fn centered_logits(
    list: &[(usize, Option<usize>, f64, f64)],
    scores: &[f64],
    s_src: &[f64],
) -> Vec<f64> {
    let top = (0..list.len())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
        .expect("non-empty neighborhood");
    let (t_top, src_top) = (scores[top], s_src[list[top].0]);
    list.iter()
        .zip(scores)
        .map(|(&(u, ..), &t)| match (t > 0.0, t_top > 0.0) {
            (true, true) => s_src[u] - src_top,
            (false, false) => LEAKY_SLOPE * (s_src[u] - src_top),
            _ => ops::leaky_relu(t, LEAKY_SLOPE) - ops::leaky_relu(t_top, LEAKY_SLOPE),
        })
        .collect()
}

pub fn gat_backward(
    cache: &GatCache,
    ew: &[f64],
    p: &GatParams,
    dout: &Matrix,
    rule: ReluRule,
) -> Result<LayerGrads> {
    let z = &cache.z;
    let dpre = ops::relu_backward(&cache.pre, dout, rule)?;
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    let mut dew = vec![0.0; ew.len()];
    let mut ds_dst = vec![0.0; z.rows()];
    let mut ds_src = vec![0.0; z.rows()];
    for (v, list) in cache.nbrs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let g = dpre.row(v);
        let mut alpha = Vec::with_capacity(list.len());
        let mut dalpha = Vec::with_capacity(list.len());
        for &(u, k, _, a) in list {
            let weight = k.map_or(1.0, |k| ew[k]);
            axpy(dz.row_mut(u), weight * a, g);
            let dc = dot(g, z.row(u));
            if let Some(k) = k {
                dew[k] += a * dc;
            }
            alpha.push(a);
            dalpha.push(weight * dc);
        }
        let de = ops::softmax_backward(&alpha, &dalpha);
        for (&(u, _, t, _), d) in list.iter().zip(de) {
            let dt = d * ops::leaky_relu_grad(t, LEAKY_SLOPE);
            ds_dst[v] += dt;
            ds_src[u] += dt;
        }
    }
    let mut da_dst = Matrix::zeros(1, z.cols());
    let mut da_src = Matrix::zeros(1, z.cols());
    for i in 0..z.rows() {
        axpy(da_dst.as_mut_slice(), ds_dst[i], z.row(i));
        axpy(da_src.as_mut_slice(), ds_src[i], z.row(i));
        let row = dz.row_mut(i);
        axpy(row, ds_dst[i], p.a_dst.as_slice());
        axpy(row, ds_src[i], p.a_src.as_slice());
    }
    Ok(LayerGrads {
        dh: dz.matmul_t(p.w)?,
        dew,
        dparams: vec![cache.h.t_matmul(&dz)?, da_dst, da_src],
    })
}

// ---- readout ----

/// Column-wise mean over nodes.
pub fn readout_mean(h: &Matrix) -> Result<Matrix> {
    if h.rows() == 0 {
        return Err(Error::shape("readout over an empty graph"));
    }
    h.col_means()
}

pub fn readout_mean_backward(n: usize, dg: &Matrix) -> Matrix {
    let mut dh = Matrix::zeros(n, dg.cols());
    for i in 0..n {
        axpy(dh.row_mut(i), 1.0 / n as f64, dg.as_slice());
    }
    dh
}
