use rand::seq::index::sample;

use super::{rng_stream, ParamStore};
use crate::error::{Error, Result};

/// Which coordinates of each parameter to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// At most this many coordinates per parameter, chosen with the given seed.
    Sample {
        per_param: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares the analytic gradients stored in `point` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h`. Relative error uses the denominator `max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &ParamStore, h: f64, coords: Coords) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step {h} must be positive"
        )));
    }
    let mut probe = point.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let names: Vec<String> = point.names().map(str::to_string).collect();
    for (pi, name) in names.iter().enumerate() {
        let n = point.get(name).len();
        let indices: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_param, seed } if per_param < n => {
                let mut rng = rng_stream(seed, pi as u64);
                let mut idx = sample(&mut rng, n, per_param).into_vec();
                idx.sort_unstable();
                idx
            }
            Coords::Sample { .. } => (0..n).collect(),
        };
        for i in indices {
            let original = point.get(name).as_slice()[i];
            probe.value_mut(name).as_mut_slice()[i] = original + h;
            let plus = f(&probe)?;
            probe.value_mut(name).as_mut_slice()[i] = original - h;
            let minus = f(&probe)?;
            probe.value_mut(name).as_mut_slice()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("forward value at `{name}`[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = point.grad(name).as_slice()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Matrix;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.insert("theta", Matrix::row_vector(&[3.0]));
        p.accumulate("theta", &Matrix::row_vector(&[6.0])).unwrap();
        let f = |s: &ParamStore| Ok(s.get("theta")[(0, 0)].powi(2));
        let r = grad_check(f, &p, 1e-5, Coords::All).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut p = ParamStore::new();
        p.insert("theta", Matrix::row_vector(&[3.0]));
        p.accumulate("theta", &Matrix::row_vector(&[5.0])).unwrap();
        let f = |s: &ParamStore| Ok(s.get("theta")[(0, 0)].powi(2));
        let r = grad_check(f, &p, 1e-5, Coords::All).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut p = ParamStore::new();
        p.insert("theta", Matrix::row_vector(&[0.0]));
        let f = |_: &ParamStore| Ok(f64::NAN);
        assert!(grad_check(f, &p, 1e-5, Coords::All).is_err());
        assert!(grad_check(|_| Ok(0.0), &p, 0.0, Coords::All).is_err());
    }
}
