//! Gradient checks for the equilibrium cell.
//!
//! Each case compares the implicit vector-Jacobian product against central
//! finite differences of `x ↦ yᵀ z*(x)` and against reverse-mode
//! differentiation through an unrolled Picard loop. Gradients are compared
//! over all of `(x, W, U, b)` at once.

use std::fmt;

use rand::Rng as _;

use crate::deq::{Activation, DeqCell, DeqGrads, SolverConfig};
use crate::error::{Error, Result};
use crate::numerics::{add_outer, axpy, matvec_into, matvec_t_into, relative_error, Tensor};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub seed: u64,
    /// State and input dimensions are drawn from `2..=max_dim`.
    pub max_dim: usize,
    pub kappa: f64,
    /// Solver used for the implicit forward and adjoint solves.
    pub solver: SolverConfig,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    pub unroll_iters: usize,
    pub unroll_tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            seed: 0,
            max_dim: 16,
            kappa: 0.9,
            solver: SolverConfig::default(),
            fd_step: 1e-5,
            fd_tolerance: 1e-4,
            unroll_iters: 500,
            unroll_tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CaseStatus {
    Pass,
    /// A forward or adjoint solve hit its iteration budget.
    Nonconverged {
        iterations: usize,
        residual: f64,
    },
    GradientMismatch,
}

impl CaseStatus {
    pub fn label(&self) -> &'static str {
        match self {
            CaseStatus::Pass => "PASS",
            CaseStatus::Nonconverged { .. } => "NONCONVERGED",
            CaseStatus::GradientMismatch => "GRADIENT_MISMATCH",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub index: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub fd_error: Option<f64>,
    pub unrolled_error: Option<f64>,
    pub status: CaseStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.status == CaseStatus::Pass)
    }

    /// The failing case with the largest error, or the largest-error case if
    /// everything passed.
    pub fn worst(&self) -> Option<&CaseReport> {
        let key = |c: &CaseReport| {
            let fail = c.status != CaseStatus::Pass;
            let err = c
                .fd_error
                .unwrap_or(f64::INFINITY)
                .max(c.unrolled_error.unwrap_or(f64::INFINITY));
            (fail, err)
        };
        self.cases
            .iter()
            .max_by(|a, b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fmt_err = |e: Option<f64>| e.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
        writeln!(
            f,
            "{:>4}  {:>3}  {:>3}  {:>10}  {:>10}  status",
            "case", "h", "d", "fd_rel", "unroll_rel"
        )?;
        for c in &self.cases {
            write!(
                f,
                "{:>4}  {:>3}  {:>3}  {:>10}  {:>10}  {}",
                c.index,
                c.state_dim,
                c.input_dim,
                fmt_err(c.fd_error),
                fmt_err(c.unrolled_error),
                c.status.label()
            )?;
            if let CaseStatus::Nonconverged { iterations, residual } = c.status {
                write!(f, " (residual {residual:.3e} after {iterations} iterations)")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Flattens `(x, W, U, b)` gradients in that order.
fn flatten(g: &DeqGrads) -> Vec<f64> {
    let mut out = g.x.clone();
    out.extend_from_slice(g.w.data());
    out.extend_from_slice(g.u.data());
    out.extend_from_slice(g.b.data());
    out
}

/// Reverse-mode gradient of `yᵀ z_K` where `z_{k+1} = σ(W z_k + U x + b)`
/// from `z_0 = 0`.
pub fn unrolled_grads(cell: &DeqCell, x: &[f64], y: &[f64], iters: usize) -> Result<DeqGrads> {
    let inj = cell.injection(x)?;
    let (h, d) = (cell.state_dim(), cell.input_dim());
    let mut states = Vec::with_capacity(iters + 1);
    let mut pres = Vec::with_capacity(iters);
    states.push(vec![0.0; h]);
    for _ in 0..iters {
        let mut pre = vec![0.0; h];
        matvec_into(cell.w.data(), h, h, states.last().unwrap(), &mut pre);
        pre.iter_mut().zip(&inj).for_each(|(p, c)| *p += c);
        states.push(pre.iter().map(|&p| cell.activation.apply(p)).collect());
        pres.push(pre);
    }
    let mut gz = y.to_vec();
    let mut gw = vec![0.0; h * h];
    let mut gu = vec![0.0; h * d];
    let mut gb = vec![0.0; h];
    let mut gx = vec![0.0; d];
    let mut next = vec![0.0; h];
    for k in (0..iters).rev() {
        let s: Vec<f64> = gz
            .iter()
            .zip(&pres[k])
            .map(|(g, &p)| g * cell.activation.derivative(p))
            .collect();
        add_outer(&mut gw, &s, &states[k]);
        add_outer(&mut gu, &s, x);
        axpy(&mut gb, 1.0, &s);
        let mut tx = vec![0.0; d];
        matvec_t_into(cell.u.data(), h, d, &s, &mut tx);
        axpy(&mut gx, 1.0, &tx);
        matvec_t_into(cell.w.data(), h, h, &s, &mut next);
        gz.copy_from_slice(&next);
    }
    Ok(DeqGrads {
        x: gx,
        w: Tensor::matrix(h, h, gw)?,
        u: Tensor::matrix(h, d, gu)?,
        b: Tensor::vector(gb)?,
    })
}

/// Central differences of `yᵀ z*` over `(x, W, U, b)`, each solve run to a
/// 1e-13 residual.
pub fn finite_difference_grads(cell: &DeqCell, x: &[f64], y: &[f64], step: f64) -> Result<Vec<f64>> {
    let tight = SolverConfig {
        tol: 1e-13,
        max_iters: 2000,
        ..SolverConfig::default()
    };
    let objective = |c: &DeqCell, xv: &[f64]| -> Result<f64> {
        let rep = c.solve_forward(xv, &tight, None)?;
        if !rep.converged {
            return Err(Error::Divergence {
                iterations: rep.iterations,
                residual: rep.residual,
            });
        }
        Ok(rep.z_star.data().iter().zip(y).map(|(a, b)| a * b).sum())
    };
    let mut out = Vec::new();
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += step;
        xm[i] -= step;
        out.push((objective(cell, &xp)? - objective(cell, &xm)?) / (2.0 * step));
    }
    for which in 0..3 {
        let len = [cell.w.len(), cell.u.len(), cell.b.len()][which];
        for i in 0..len {
            let perturbed = |delta: f64| {
                let mut c = cell.clone();
                let t = match which {
                    0 => &mut c.w,
                    1 => &mut c.u,
                    _ => &mut c.b,
                };
                t.data_mut()[i] += delta;
                c
            };
            out.push((objective(&perturbed(step), x)? - objective(&perturbed(-step), x)?) / (2.0 * step));
        }
    }
    Ok(out)
}

fn nonconverged(e: Error) -> Result<CaseStatus> {
    match e {
        Error::Divergence { iterations, residual } => Ok(CaseStatus::Nonconverged { iterations, residual }),
        other => Err(other),
    }
}

/// The seeded cell, input and cotangent for case `index`.
pub fn gradcheck_case(cfg: &GradcheckConfig, index: usize) -> Result<(DeqCell, Vec<f64>, Vec<f64>)> {
    let mut r = rng::substream(cfg.seed, streams::GRADCHECK, index as u64);
    let h = r.random_range(2..=cfg.max_dim);
    let d = r.random_range(2..=cfg.max_dim);
    let cell = DeqCell::init(h, d, cfg.kappa, Activation::Tanh, &mut r)?;
    let x = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let y = (0..h).map(|_| r.random_range(-1.0..1.0)).collect();
    Ok((cell, x, y))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.max_dim < 2 {
        return Err(Error::Argument("max_dim must be >= 2".into()));
    }
    cfg.solver.validate()?;
    let mut cases = Vec::with_capacity(cfg.cases);
    for index in 0..cfg.cases {
        let (cell, x, y) = gradcheck_case(cfg, index)?;
        let mut report = CaseReport {
            index,
            state_dim: cell.state_dim(),
            input_dim: cell.input_dim(),
            fd_error: None,
            unrolled_error: None,
            status: CaseStatus::Pass,
        };
        let fwd = cell.solve_forward(&x, &cfg.solver, None)?;
        if !fwd.converged {
            report.status = CaseStatus::Nonconverged {
                iterations: fwd.iterations,
                residual: fwd.residual,
            };
            cases.push(report);
            continue;
        }
        let implicit = match cell.vjp(fwd.z_star.data(), &x, &y, &cfg.solver) {
            Ok(g) => flatten(&g),
            Err(e) => {
                report.status = nonconverged(e)?;
                cases.push(report);
                continue;
            }
        };
        let fd = match finite_difference_grads(&cell, &x, &y, cfg.fd_step) {
            Ok(g) => g,
            Err(e) => {
                report.status = nonconverged(e)?;
                cases.push(report);
                continue;
            }
        };
        let unrolled = flatten(&unrolled_grads(&cell, &x, &y, cfg.unroll_iters)?);
        let fd_error = relative_error(&implicit, &fd);
        let unrolled_error = relative_error(&implicit, &unrolled);
        report.fd_error = Some(fd_error);
        report.unrolled_error = Some(unrolled_error);
        if !(fd_error <= cfg.fd_tolerance && unrolled_error <= cfg.unroll_tolerance) {
            report.status = CaseStatus::GradientMismatch;
        }
        cases.push(report);
    }
    Ok(GradcheckReport { cases })
}
