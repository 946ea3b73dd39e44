//! Ridge-penalised linear Cox regression fitted by Newton's method.
//!
//! Used as a probe: how much survival signal a fixed feature matrix carries.
//! Risk-set sums are accumulated over samples sorted by descending time, so
//! one iteration costs `O(n·d²)` instead of materialising every risk set.

use crate::error::{Error, Result};
use crate::numnet::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearCoxConfig {
    pub ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LinearCoxConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-2,
            max_iter: 50,
            tol: 1e-9,
        }
    }
}

/// Fitted coefficients on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCox {
    mean: Vec<f64>,
    scale: Vec<f64>,
    coef: Vec<f64>,
}

struct Sweep {
    loss: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

/// Negative log partial likelihood (Breslow), its gradient and Hessian for
/// `θ = X·β`, divided by the number of events.
fn sweep(x: &Matrix, times: &[f64], events: &[bool], beta: &[f64], order: &[usize]) -> Sweep {
    let d = x.cols();
    let theta: Vec<f64> = x.iter_rows().map(|r| dot(r, beta)).collect();
    let shift = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d * d];
    let mut out = Sweep {
        loss: 0.0,
        grad: vec![0.0; d],
        hess: vec![0.0; d * d],
    };
    let mut n_events = 0usize;
    let mut pos = 0;
    while pos < order.len() {
        let t = times[order[pos]];
        let end = order[pos..]
            .iter()
            .position(|&i| times[i] != t)
            .map_or(order.len(), |o| pos + o);
        for &i in &order[pos..end] {
            let w = (theta[i] - shift).exp();
            let xi = x.row(i);
            s0 += w;
            for a in 0..d {
                s1[a] += w * xi[a];
                for b in 0..d {
                    s2[a * d + b] += w * xi[a] * xi[b];
                }
            }
        }
        for &i in &order[pos..end] {
            if !events[i] {
                continue;
            }
            n_events += 1;
            out.loss += s0.ln() + shift - theta[i];
            let xi = x.row(i);
            for a in 0..d {
                let ma = s1[a] / s0;
                out.grad[a] += ma - xi[a];
                for b in 0..d {
                    out.hess[a * d + b] += s2[a * d + b] / s0 - ma * s1[b] / s0;
                }
            }
        }
        pos = end;
    }
    let n = n_events.max(1) as f64;
    out.loss /= n;
    out.grad.iter_mut().for_each(|g| *g /= n);
    out.hess.iter_mut().for_each(|h| *h /= n);
    out
}

/// Solves `a·x = b` for symmetric positive definite `a` (row-major `n×n`).
fn cholesky_solve(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Some(x)
}

impl LinearCox {
    pub fn fit(features: &Matrix, times: &[f64], events: &[bool], cfg: LinearCoxConfig) -> Result<Self> {
        let n = features.rows();
        let d = features.cols();
        if n == 0 || d == 0 {
            return Err(Error::invalid("linear cox features", "empty"));
        }
        if times.len() != n || events.len() != n {
            return Err(Error::shape("linear cox inputs", n, format!("{} / {}", times.len(), events.len())));
        }
        if !events.iter().any(|&e| e) {
            return Err(Error::invalid("linear cox events", "no uncensored samples"));
        }
        let mut mean = vec![0.0; d];
        for r in features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for r in features.iter_rows() {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let mut model = Self {
            mean,
            scale,
            coef: vec![0.0; d],
        };
        let x = model.standardise(features);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

        let objective = |s: &Sweep, beta: &[f64]| s.loss + 0.5 * cfg.ridge * dot(beta, beta);
        let mut current = sweep(&x, times, events, &model.coef, &order);
        let mut value = objective(&current, &model.coef);
        for _ in 0..cfg.max_iter {
            let mut g = current.grad.clone();
            let mut h = current.hess.clone();
            for a in 0..d {
                g[a] += cfg.ridge * model.coef[a];
                h[a * d + a] += cfg.ridge;
            }
            let Some(step) = cholesky_solve(&h, &g) else {
                break;
            };
            // backtracking keeps every accepted step a descent step
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand: Vec<f64> = model.coef.iter().zip(&step).map(|(b, s)| b - t * s).collect();
                let sw = sweep(&x, times, events, &cand, &order);
                let v = objective(&sw, &cand);
                if v.is_finite() && v <= value {
                    let done = value - v < cfg.tol;
                    model.coef = cand;
                    current = sw;
                    value = v;
                    accepted = true;
                    if done {
                        return Ok(model);
                    }
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(model)
    }

    fn standardise(&self, features: &Matrix) -> Matrix {
        let mut x = features.clone();
        for r in 0..x.rows() {
            for ((v, m), s) in x.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        x
    }

    pub fn predict(&self, features: &Matrix) -> Result<Vec<f64>> {
        if features.cols() != self.coef.len() {
            return Err(Error::shape("linear cox predict", self.coef.len(), features.cols()));
        }
        Ok(self
            .standardise(features)
            .iter_rows()
            .map(|r| dot(r, &self.coef))
            .collect())
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::{cox_gradient, cox_loss, CoxBatch};

    #[test]
    fn sweep_matches_risk_set_route() {
        let x = Matrix::from_rows(&[[0.5, -1.0], [1.5, 0.2], [-0.3, 0.8], [0.0, 0.0], [2.0, -0.5]]).unwrap();
        let times: [f64; 5] = [3.0, 1.0, 2.0, 2.0, 5.0];
        let events = [true, true, false, true, true];
        let beta = [0.7, -0.4];
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
        let sw = sweep(&x, &times, &events, &beta, &order);

        let theta: Vec<f64> = x.iter_rows().map(|r| dot(r, &beta)).collect();
        let batch = CoxBatch::from_times(&times, &events).unwrap();
        let n_ev = 4.0;
        assert!((sw.loss - cox_loss(&theta, &batch).unwrap() / n_ev).abs() < 1e-12);
        let gt = cox_gradient(&theta, &batch).unwrap();
        for a in 0..2 {
            let g: f64 = (0..5).map(|i| gt[i] * x.get(i, a)).sum::<f64>() / n_ev;
            assert!((sw.grad[a] - g).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_solves_spd() {
        let a = [4.0, 1.0, 1.0, 3.0];
        let x = cholesky_solve(&a, &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-12);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-12);
        assert!(cholesky_solve(&[0.0], &[1.0]).is_none());
    }

    #[test]
    fn recovers_ranking_direction() {
        // risk increases with feature 0, feature 1 is irrelevant
        let rows: Vec<[f64; 2]> = (0..40u32).map(|i| [f64::from(i) / 10.0, f64::from((i * 7) % 5)]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let times: Vec<f64> = (0..40u32).map(|i| 50.0 - f64::from(i)).collect();
        let events = vec![true; 40];
        let m = LinearCox::fit(&x, &times, &events, LinearCoxConfig::default()).unwrap();
        assert!(m.coefficients()[0] > 0.0);
        assert!(m.coefficients()[0].abs() > m.coefficients()[1].abs());
    }
}
