//! Gradient-based maximizers over a flat parameter vector.

use crate::error::{Error, Result};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptAlg {
    Adam,
    Lbfgs,
}

impl OptAlg {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptAlg::Adam),
            "lbfgs" | "l-bfgs" => Ok(OptAlg::Lbfgs),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptAlg::Adam => "adam",
            OptAlg::Lbfgs => "lbfgs",
        }
    }
}

/// One recorded optimization step.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iter: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub struct RunResult {
    pub params: Vec<f64>,
    pub value: f64,
    pub trace: Vec<IterRecord>,
    pub converged: bool,
}

fn grad_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Adam ascent on `objective` (value and gradient of the quantity to
/// maximize). Stops on `max_iters` or when the relative change of the value
/// falls below `tol`. A non-finite objective aborts, returning the last
/// finite parameters.
pub fn adam_maximize<F>(
    mut objective: F,
    x0: &[f64],
    max_iters: usize,
    learning_rate: f64,
    tol: f64,
    iter_offset: usize,
) -> Result<RunResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut x = x0.to_vec();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut trace = Vec::new();
    let mut last_value = f64::NEG_INFINITY;
    let mut best = (x.clone(), f64::NEG_INFINITY);
    let mut converged = false;
    let start = std::time::Instant::now();
    for t in 1..=max_iters {
        let (value, grad) = objective(&x)?;
        if !value.is_finite() {
            return Ok(RunResult {
                params: best.0,
                value: best.1,
                trace,
                converged: false,
            });
        }
        if value > best.1 {
            best = (x.clone(), value);
        }
        trace.push(IterRecord {
            iter: iter_offset + t - 1,
            value,
            grad_norm: grad_norm(&grad),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if t > 1 {
            let denom = last_value.abs().max(1.0);
            if (value - last_value).abs() / denom < tol {
                converged = true;
                break;
            }
        }
        last_value = value;
        for i in 0..x.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / (1.0 - beta1.powi(t as i32));
            let v_hat = v[i] / (1.0 - beta2.powi(t as i32));
            x[i] += learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    let (final_value, _) = objective(&x)?;
    if final_value.is_finite() && final_value > best.1 {
        best = (x, final_value);
    }
    Ok(RunResult {
        params: best.0,
        value: best.1,
        trace,
        converged,
    })
}

/// L-BFGS ascent with backtracking Armijo line search; only improving steps
/// are accepted, so the reported value is monotone.
pub fn lbfgs_maximize<F>(
    mut objective: F,
    x0: &[f64],
    max_iters: usize,
    tol: f64,
    iter_offset: usize,
) -> Result<RunResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let memory = 10;
    let c1 = 1e-4;
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut value, mut grad) = objective(&x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new(); // (s, y, rho)
    let mut trace = Vec::new();
    let mut converged = false;
    let start = std::time::Instant::now();
    for t in 0..max_iters {
        trace.push(IterRecord {
            iter: iter_offset + t,
            value,
            grad_norm: grad_norm(&grad),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        // two-loop recursion on the descent problem for the negated value
        let mut q: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, yv, rho) in history.iter().rev() {
            let alpha = rho * s.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                q[i] -= alpha * yv[i];
            }
            alphas.push(alpha);
        }
        let gamma = history
            .back()
            .map(|(s, yv, _)| {
                let sy: f64 = s.iter().zip(yv.iter()).map(|(a, b)| a * b).sum();
                let yy: f64 = yv.iter().map(|v| v * v).sum();
                if yy > 0.0 {
                    sy / yy
                } else {
                    1.0
                }
            })
            .unwrap_or(1.0)
            .max(1e-12);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, yv, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * yv.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                q[i] += s[i] * (alpha - beta);
            }
        }
        // q approximates H⁻¹∇(−value); negate for an ascent direction
        let dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let slope: f64 = dir.iter().zip(grad.iter()).map(|(d, g)| d * g).sum();
        let dir = if slope <= 0.0 { grad.clone() } else { dir };
        let slope: f64 = dir.iter().zip(grad.iter()).map(|(d, g)| d * g).sum();
        if slope <= 1e-300 {
            converged = true;
            break;
        }

        // weak-Wolfe bracketing: Armijo on the value, curvature on the
        // directional derivative, so the (s,y) pair is always usable
        let c2 = 0.9;
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut step = 1.0;
        let mut accepted = None;
        let mut fallback: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(xi, di)| xi + step * di).collect();
            match objective(&cand) {
                Ok((cv, cg)) if cv.is_finite() => {
                    let cand_slope: f64 = dir.iter().zip(cg.iter()).map(|(d, g)| d * g).sum();
                    if cv < value + c1 * step * slope {
                        hi = step;
                    } else {
                        if fallback.as_ref().map_or(true, |(_, fv, _)| cv >= *fv) {
                            fallback = Some((cand.clone(), cv, cg.clone()));
                        }
                        if cand_slope > c2 * slope {
                            lo = step;
                        } else {
                            accepted = Some((cand, cv, cg));
                            break;
                        }
                    }
                }
                _ => hi = step,
            }
            step = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * step };
            if step <= 1e-300 {
                break;
            }
        }
        let Some((new_x, new_value, new_grad)) = accepted.or(fallback) else {
            converged = true;
            break;
        };
        let s: Vec<f64> = new_x.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = new_grad
            .iter()
            .zip(grad.iter())
            .map(|(a, b)| -(a - b))
            .collect();
        let sy: f64 = s.iter().zip(yv.iter()).map(|(a, b)| a * b).sum();
        if sy > 1e-10 {
            if history.len() == memory {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }
        let rel = (new_value - value).abs() / value.abs().max(1.0);
        x = new_x;
        value = new_value;
        grad = new_grad;
        if rel < tol {
            converged = true;
            break;
        }
    }
    Ok(RunResult {
        params: x,
        value,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let a = [1.0, 3.0, 0.5];
        let c = [2.0, -1.0, 0.5];
        let mut v = 0.0;
        let mut g = vec![0.0; 3];
        for i in 0..3 {
            v -= a[i] * (x[i] - c[i]).powi(2);
            g[i] = -2.0 * a[i] * (x[i] - c[i]);
        }
        Ok((v, g))
    }

    #[test]
    fn adam_reaches_quadratic_optimum() {
        let r = adam_maximize(quadratic, &[0.0; 3], 2000, 0.05, 0.0, 0).unwrap();
        assert!(r.value > -1e-4, "value {}", r.value);
    }

    #[test]
    fn lbfgs_reaches_quadratic_optimum_fast() {
        let r = lbfgs_maximize(quadratic, &[0.0; 3], 100, 1e-12, 0).unwrap();
        assert!(r.value > -1e-10, "value {}", r.value);
        assert!(r.trace.len() < 40);
        for w in r.trace.windows(2) {
            assert!(w[1].value >= w[0].value - 1e-12);
        }
    }

    #[test]
    fn lbfgs_rosenbrock() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (1.0, 100.0);
            let v = -((a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2));
            let g = vec![
                2.0 * (a - x[0]) + 4.0 * b * x[0] * (x[1] - x[0] * x[0]),
                -2.0 * b * (x[1] - x[0] * x[0]),
            ];
            Ok((v, g))
        };
        let r = lbfgs_maximize(f, &[-1.2, 1.0], 500, 1e-14, 0).unwrap();
        assert!(r.value > -1e-8, "value {}", r.value);
    }
}
