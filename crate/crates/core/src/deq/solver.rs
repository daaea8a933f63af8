use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::{norm, Tensor};

/// Fixed-point solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Threshold on `‖f(z) - z‖₂`.
    pub tol: f64,
    pub max_iters: usize,
    /// History length for Anderson mixing; 0 selects plain (damped) Picard.
    pub anderson_depth: usize,
    /// Mixing weight in (0, 1].
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 500,
            anderson_depth: 5,
            damping: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn picard() -> Self {
        Self {
            anderson_depth: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Argument(format!("solver tol {} must be > 0", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Argument("solver max_iters must be >= 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Argument(format!(
                "solver damping {} must lie in (0, 1]",
                self.damping
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub z_star: Tensor,
    /// Number of map evaluations performed.
    pub iterations: usize,
    /// `‖f(z_star) - z_star‖₂`.
    pub residual: f64,
    pub converged: bool,
}

/// Solves `z = f(z)` starting from `z0`.
///
/// `f(z, out)` writes the map value into `out`. The returned point is always
/// one at which `f` was evaluated, so `residual` is exact for `z_star`.
pub fn fixed_point<F>(mut f: F, z0: &[f64], cfg: &SolverConfig) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]),
{
    cfg.validate()?;
    let n = z0.len();
    let beta = cfg.damping;
    let mut x = z0.to_vec();
    let mut g = vec![0.0; n];
    let mut resid = vec![0.0; n];
    // (iterate, residual) pairs, newest last
    let mut history: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut last_residual = f64::INFINITY;

    for iter in 1..=cfg.max_iters {
        f(&x, &mut g);
        for i in 0..n {
            resid[i] = g[i] - x[i];
        }
        let r = norm(&resid);
        if !r.is_finite() {
            return Err(Error::Divergence {
                iterations: iter,
                residual: r,
            });
        }
        last_residual = r;
        if r <= cfg.tol {
            return Ok(SolveReport {
                z_star: Tensor::from_parts(vec![n], x),
                iterations: iter,
                residual: r,
                converged: true,
            });
        }
        if iter == cfg.max_iters {
            break;
        }

        let mut next: Option<Vec<f64>> = None;
        if cfg.anderson_depth > 0 {
            history.push_back((x.clone(), resid.clone()));
            if history.len() > cfg.anderson_depth + 1 {
                history.pop_front();
            }
            if history.len() >= 2 {
                next = anderson_step(&history, &x, &resid, beta);
            }
        }
        x = match next {
            Some(v) => v,
            None => x.iter().zip(&resid).map(|(xi, ri)| xi + beta * ri).collect(),
        };
    }

    Ok(SolveReport {
        z_star: Tensor::from_parts(vec![n], x),
        iterations: cfg.max_iters,
        residual: last_residual,
        converged: false,
    })
}

/// Type-II Anderson update in difference form:
/// `x⁺ = x + β·r - (ΔX + β·ΔR)·γ`, `γ = argmin ‖r - ΔR·γ‖`.
fn anderson_step(history: &VecDeque<(Vec<f64>, Vec<f64>)>, x: &[f64], r: &[f64], beta: f64) -> Option<Vec<f64>> {
    let n = x.len();
    let m = history.len() - 1;
    let mut dx = DMatrix::<f64>::zeros(n, m);
    let mut dr = DMatrix::<f64>::zeros(n, m);
    for j in 0..m {
        let (x0, r0) = &history[j];
        let (x1, r1) = &history[j + 1];
        for i in 0..n {
            dx[(i, j)] = x1[i] - x0[i];
            dr[(i, j)] = r1[i] - r0[i];
        }
    }
    let rv = DVector::from_column_slice(r);
    let mut gram = dr.transpose() * &dr;
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    for j in 0..m {
        gram[(j, j)] += 1e-12 * scale;
    }
    let rhs = dr.transpose() * &rv;
    let gamma = gram.cholesky()?.solve(&rhs);
    let correction = (dx + dr * beta) * gamma;
    let out: Vec<f64> = (0..n).map(|i| x[i] + beta * r[i] - correction[i]).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}
