use super::cell::{Activation, DeqCell, DeqGrads};
use super::solver::SolverConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Equilibrium cells applied in sequence: cell `k` is driven by the fixed
/// point of cell `k-1`. A single cell is the default configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DeqStack {
    pub cells: Vec<DeqCell>,
}

/// Per-cell inputs and equilibria from one forward pass.
#[derive(Debug, Clone)]
pub struct StackTrace {
    pub inputs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl StackTrace {
    pub fn output(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl DeqStack {
    pub fn new(cells: Vec<DeqCell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Argument("a DEQ stack needs at least one cell".into()));
        }
        for pair in cells.windows(2) {
            if pair[1].input_dim() != pair[0].state_dim() {
                return Err(Error::dim("DeqStack::new", pair[0].w.shape(), pair[1].u.shape()));
            }
        }
        Ok(Self { cells })
    }

    /// `layers` cells of width `state_dim`; the first reads `input_dim` inputs.
    pub fn init(
        layers: usize,
        state_dim: usize,
        input_dim: usize,
        kappa: f64,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cells = (0..layers.max(1))
            .map(|k| {
                let d = if k == 0 { input_dim } else { state_dim };
                DeqCell::init(state_dim, d, kappa, activation, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cells)
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    pub fn input_dim(&self) -> usize {
        self.cells[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.cells[self.cells.len() - 1].state_dim()
    }

    pub fn param_count(&self) -> usize {
        self.cells.iter().map(DeqCell::param_count).sum()
    }

    /// Forward solve through every cell. Unconverged solves are errors here:
    /// downstream gradients are only meaningful at an equilibrium.
    pub fn forward(&self, x: &[f64], cfg: &SolverConfig) -> Result<StackTrace> {
        let mut inputs = Vec::with_capacity(self.cells.len());
        let mut states = Vec::with_capacity(self.cells.len());
        let mut iterations = 0;
        let mut current = x.to_vec();
        for cell in &self.cells {
            let report = cell.solve_forward(&current, cfg, None)?;
            if !report.converged {
                return Err(Error::Divergence {
                    iterations: report.iterations,
                    residual: report.residual,
                });
            }
            iterations += report.iterations;
            inputs.push(std::mem::replace(&mut current, report.z_star.into_data()));
            states.push(current.clone());
        }
        Ok(StackTrace {
            inputs,
            states,
            iterations,
        })
    }

    /// Implicit backward through the stack for output cotangent `y`.
    /// Returns per-cell parameter grads and the cotangent of the stack input.
    pub fn backward(&self, trace: &StackTrace, y: &[f64], cfg: &SolverConfig) -> Result<(Vec<DeqGrads>, Vec<f64>)> {
        let mut grads = Vec::with_capacity(self.cells.len());
        let mut upstream = y.to_vec();
        for (k, cell) in self.cells.iter().enumerate().rev() {
            let g = cell.vjp(&trace.states[k], &trace.inputs[k], &upstream, cfg)?;
            upstream = g.x.clone();
            grads.push(g);
        }
        grads.reverse();
        Ok((grads, upstream))
    }

    pub fn spectral_normalize(&self, power_iters: usize) -> Result<DeqStack> {
        let cells = self
            .cells
            .iter()
            .map(|c| c.spectral_normalize(power_iters))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cells })
    }
}
