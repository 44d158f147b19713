use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// A named parameter with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param { value, grad }
    }
}

/// Ordered collection of named parameters. Iteration order is lexicographic by name,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Parameter value. Panics on an unknown name: layer code only asks for names it created.
    pub fn get(&self, name: &str) -> &Matrix {
        match self.params.get(name) {
            Some(p) => &p.value,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Matrix {
        match self.params.get_mut(name) {
            Some(p) => &mut p.value,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn grad(&self, name: &str) -> &Matrix {
        match self.params.get(name) {
            Some(p) => &p.grad,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    /// Adds `g` into the gradient slot of `name`.
    pub fn accumulate(&mut self, name: &str, g: &Matrix) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("gradient for unknown parameter `{name}`")))?;
        p.grad.add_assign(g)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.as_mut_slice().iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Values only, in the shape-tagged form written to checkpoints.
    pub fn to_record(&self) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    pub fn from_record(record: BTreeMap<String, Matrix>) -> Self {
        ParamStore {
            params: record
                .into_iter()
                .map(|(k, v)| (k, Param::new(v)))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, p) in &self.params {
            let q = other.param(name)?;
            if p.value.shape() != q.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    q.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform initialization: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    glorot_with_fans(rows, cols, rows, cols, rng)
}

pub fn glorot_with_fans<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Adam with bias correction and a decoupled weight-decay term `lr · wd · θ`.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|(name, p)| {
                let (r, c) = p.value.shape();
                (name.to_string(), (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            })
            .collect();
        AdamState {
            config,
            t: 0,
            moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::shape(format!("no Adam moments for `{name}`")))?;
            if m.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "Adam moments for `{name}` have wrong shape"
                )));
            }
            let theta = p.value.as_mut_slice();
            let g = p.grad.as_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps) + lr * weight_decay * theta[i];
            }
        }
        Ok(())
    }
}
