//! Forward and backward rules for the primitive operations used by every model.

use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

/// How ReLU units propagate gradients on the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReluRule {
    /// Ordinary derivative: pass where the input was positive.
    #[default]
    Plain,
    /// Guided backpropagation: additionally drop negative upstream gradients.
    Guided,
}

/// `X·W + b`, with `b` broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = x.matmul(w)?;
    out.add_row_broadcast(b)?;
    Ok(out)
}

pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Matrix,
}

pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
    Ok(LinearGrads {
        dx: dy.matmul_t(w)?,
        dw: x.t_matmul(dy)?,
        db: dy.col_sums(),
    })
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Backward through ReLU. `pre` is the ReLU input.
pub fn relu_backward(pre: &Matrix, dy: &Matrix, rule: ReluRule) -> Result<Matrix> {
    pre.zip_map(dy, |x, g| match rule {
        ReluRule::Plain if x > 0.0 => g,
        ReluRule::Guided if x > 0.0 && g > 0.0 => g,
        _ => 0.0,
    })
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Backward through softmax given its output `p` and upstream gradient `dp`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, gi)| pi * (gi - dot)).collect()
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let s = softmax(x.row(i));
        out.row_mut(i).copy_from_slice(&s);
    }
    out
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Inverted dropout. Returns the output and the multiplicative mask applied
/// (0 or 1/(1-rate) per entry) for the backward pass. With `rng = None`
/// (eval mode) or `rate = 0` this is the identity.
pub fn dropout<R: Rng + ?Sized>(
    x: &Matrix,
    rate: f64,
    rng: Option<&mut R>,
) -> Result<(Matrix, Option<Matrix>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let data = (0..x.len())
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect();
            let mask = Matrix::from_vec(x.rows(), x.cols(), data)?;
            let out = x.zip_map(&mask, |a, m| a * m)?;
            Ok((out, Some(mask)))
        }
        _ => Ok((x.clone(), None)),
    }
}

pub fn dropout_backward(dy: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
    match mask {
        Some(m) => dy.zip_map(m, |g, k| g * k),
        None => Ok(dy.clone()),
    }
}

/// `-log softmax(logits)[label]` and its gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::shape(format!(
            "label {label} for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean over rows of the squared Euclidean distance between `x` and `x_hat`.
pub fn mse(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(format!(
            "mse between {:?} and {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::shape("mse over zero samples"));
    }
    let total: f64 = x
        .as_slice()
        .iter()
        .zip(x_hat.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / x.rows() as f64)
}

/// Gradient of [`mse`] with respect to `x_hat`.
pub fn mse_grad(x: &Matrix, x_hat: &Matrix) -> Result<Matrix> {
    let scale = 2.0 / x.rows() as f64;
    x_hat.zip_map(x, |h, t| scale * (h - t))
}
