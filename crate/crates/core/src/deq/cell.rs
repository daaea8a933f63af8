use rand::Rng as _;

use super::solver::{fixed_point, SolveReport, SolverConfig};
use crate::error::{Error, Result};
use crate::numerics::{add_outer, matvec_into, matvec_t_into, norm, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative as a function of the pre-activation.
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }
}

pub const DEFAULT_KAPPA: f64 = 0.9;
pub const DEFAULT_POWER_ITERS: usize = 100;

/// One equilibrium block `z ↦ σ(W z + U x + b)`.
///
/// `w` is stored already rescaled by [`DeqCell::spectral_normalize`]; training
/// re-projects it after every update, so the forward map uses it as-is.
#[derive(Debug, Clone, PartialEq)]
pub struct DeqCell {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
    pub kappa: f64,
    pub activation: Activation,
}

/// Cotangents produced by [`DeqCell::vjp`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeqGrads {
    pub x: Vec<f64>,
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl DeqCell {
    pub fn new(w: Tensor, u: Tensor, b: Tensor, kappa: f64, activation: Activation) -> Result<Self> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::Argument(format!("kappa {kappa} must lie in (0, 1)")));
        }
        if w.rank() != 2 || w.rows() != w.cols() {
            return Err(Error::dim("DeqCell::new", w.shape(), &[w.rows(), w.rows()]));
        }
        let h = w.rows();
        if u.rank() != 2 || u.rows() != h {
            return Err(Error::dim("DeqCell::new", w.shape(), u.shape()));
        }
        if b.rank() != 1 || b.len() != h {
            return Err(Error::dim("DeqCell::new", w.shape(), b.shape()));
        }
        Ok(Self {
            w,
            u,
            b,
            kappa,
            activation,
        })
    }

    /// Uniform `±1/√fan_in` initialisation followed by spectral normalisation.
    pub fn init(state_dim: usize, input_dim: usize, kappa: f64, activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = Tensor::matrix(state_dim, state_dim, uniform(state_dim * state_dim, state_dim))?;
        let u = Tensor::matrix(state_dim, input_dim, uniform(state_dim * input_dim, input_dim))?;
        let b = Tensor::vector(uniform(state_dim, input_dim))?;
        Self::new(w, u, b, kappa, activation)?.spectral_normalize(DEFAULT_POWER_ITERS)
    }

    pub fn state_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.u.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.u.len() + self.b.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("DeqCell input", self.u.shape(), &[x.len()]));
        }
        Ok(())
    }

    /// `U x + b`, constant across iterations of one solve.
    pub fn injection(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let h = self.state_dim();
        let mut out = vec![0.0; h];
        matvec_into(self.u.data(), h, self.input_dim(), x, &mut out);
        for (o, &bi) in out.iter_mut().zip(self.b.data()) {
            *o += bi;
        }
        Ok(out)
    }

    /// `out = σ(W z + inj)`.
    pub fn apply_with_injection(&self, z: &[f64], inj: &[f64], out: &mut [f64]) {
        let h = self.state_dim();
        matvec_into(self.w.data(), h, h, z, out);
        for (o, &c) in out.iter_mut().zip(inj) {
            *o = self.activation.apply(*o + c);
        }
    }

    pub fn forward(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        if z.len() != self.state_dim() {
            return Err(Error::dim("cell_forward", self.w.shape(), z.shape()));
        }
        let inj = self.injection(x.data())?;
        let mut out = vec![0.0; self.state_dim()];
        self.apply_with_injection(z.data(), &inj, &mut out);
        Tensor::vector(out)
    }

    /// Rescales `W` by `min(1, κ/σ̂)` where `σ̂` is a power-iteration estimate
    /// of its largest singular value.
    pub fn spectral_normalize(&self, power_iters: usize) -> Result<DeqCell> {
        if power_iters < 10 {
            return Err(Error::Argument(format!("power_iters {power_iters} must be >= 10")));
        }
        let sigma = spectral_norm_estimate(&self.w, power_iters);
        let mut out = self.clone();
        // Relative slack keeps normalisation idempotent under estimator noise.
        if sigma > self.kappa * (1.0 + 1e-12) {
            let s = self.kappa / sigma;
            out.w.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        Ok(out)
    }

    /// Solves `z = σ(W z + U x + b)` from `z0` (zeros when `None`).
    pub fn solve_forward(&self, x: &[f64], cfg: &SolverConfig, z0: Option<&[f64]>) -> Result<SolveReport> {
        let inj = self.injection(x)?;
        let h = self.state_dim();
        let zeros = vec![0.0; h];
        let start = z0.unwrap_or(&zeros);
        if start.len() != h {
            return Err(Error::dim("solve_forward z0", self.w.shape(), &[start.len()]));
        }
        fixed_point(|z, out| self.apply_with_injection(z, &inj, out), start, cfg)
    }

    fn preactivation_derivative(&self, z_star: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let inj = self.injection(x)?;
        let h = self.state_dim();
        let mut pre = vec![0.0; h];
        matvec_into(self.w.data(), h, h, z_star, &mut pre);
        Ok(pre
            .iter()
            .zip(&inj)
            .map(|(p, c)| self.activation.derivative(p + c))
            .collect())
    }

    /// Solves the adjoint equation `o = Jᵀ o + y`, `J = ∂f/∂z` at `(z_star, x)`.
    pub fn solve_adjoint(&self, z_star: &[f64], x: &[f64], y: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>> {
        let h = self.state_dim();
        if z_star.len() != h || y.len() != h {
            return Err(Error::dim("solve_adjoint", &[h], &[z_star.len(), y.len()]));
        }
        let deriv = self.preactivation_derivative(z_star, x)?;
        let mut scaled = vec![0.0; h];
        let report = fixed_point(
            |o, out| {
                for i in 0..h {
                    scaled[i] = deriv[i] * o[i];
                }
                matvec_t_into(self.w.data(), h, h, &scaled, out);
                for (oi, &yi) in out.iter_mut().zip(y) {
                    *oi += yi;
                }
            },
            y,
            cfg,
        )?;
        if !report.converged {
            return Err(Error::Divergence {
                iterations: report.iterations,
                residual: report.residual,
            });
        }
        Ok(report.z_star.into_data())
    }

    /// Implicit vector-Jacobian product of the equilibrium map: solves the
    /// adjoint for `o`, then runs one backward pass of the cell body seeded
    /// with `o`.
    pub fn vjp(&self, z_star: &[f64], x: &[f64], y: &[f64], cfg: &SolverConfig) -> Result<DeqGrads> {
        let o = self.solve_adjoint(z_star, x, y, cfg)?;
        let deriv = self.preactivation_derivative(z_star, x)?;
        let s: Vec<f64> = deriv.iter().zip(&o).map(|(d, oi)| d * oi).collect();
        let (h, d) = (self.state_dim(), self.input_dim());
        let mut gw = Tensor::zeros(&[h, h]);
        add_outer(gw.data_mut(), &s, z_star);
        let mut gu = Tensor::zeros(&[h, d]);
        add_outer(gu.data_mut(), &s, x);
        let mut gx = vec![0.0; d];
        matvec_t_into(self.u.data(), h, d, &s, &mut gx);
        Ok(DeqGrads {
            x: gx,
            w: gw,
            u: gu,
            b: Tensor::from_parts(vec![h], s),
        })
    }
}

/// Largest singular value of `w` by power iteration on `WᵀW`.
///
/// Starts from a fixed non-symmetric vector so results are deterministic.
pub fn spectral_norm_estimate(w: &Tensor, iters: usize) -> f64 {
    let (r, c) = (w.rows(), w.cols());
    if w.data().iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..c).map(|i| 1.0 + 0.37 * (i as f64 + 1.0).sin()).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut wv = vec![0.0; r];
    let mut sigma = 0.0;
    for _ in 0..iters {
        matvec_into(w.data(), r, c, &v, &mut wv);
        let mut next = vec![0.0; c];
        matvec_t_into(w.data(), r, c, &wv, &mut next);
        let nn = norm(&next);
        if nn == 0.0 {
            return norm(&wv);
        }
        next.iter_mut().for_each(|x| *x /= nn);
        v = next;
        matvec_into(w.data(), r, c, &v, &mut wv);
        sigma = norm(&wv);
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{inverse, matmul, relative_error, solve};
    use crate::rng;

    fn scalar_cell(w: f64, u: f64, b: f64) -> DeqCell {
        DeqCell::new(
            Tensor::matrix(1, 1, vec![w]).unwrap(),
            Tensor::matrix(1, 1, vec![u]).unwrap(),
            Tensor::vector(vec![b]).unwrap(),
            0.9,
            Activation::Identity,
        )
        .unwrap()
    }

    fn random_identity_cell(seed: u64, h: usize, d: usize) -> DeqCell {
        let mut r = rng::stream(seed, 0);
        let mut c = DeqCell::init(h, d, 0.9, Activation::Identity, &mut r).unwrap();
        // stretch W past kappa so normalisation is exercised
        c.w = c.w.scale(4.0);
        c.spectral_normalize(200).unwrap()
    }

    #[test]
    fn forward_definitions() {
        let c = scalar_cell(0.5, 1.0, 0.0);
        let z = Tensor::vector(vec![3.0]).unwrap();
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert_eq!(c.forward(&z, &x).unwrap().item(), 2.5);

        let mut r = rng::stream(1, 0);
        let mut c = DeqCell::init(3, 2, 0.9, Activation::Identity, &mut r).unwrap();
        c.w = Tensor::zeros(&[3, 3]);
        let x = Tensor::vector(vec![0.3, -0.7]).unwrap();
        let expected = matmul(&c.u, &x).unwrap().add(&c.b).unwrap();
        for z in [vec![0.0; 3], vec![5.0, -1.0, 2.0]] {
            let got = c.forward(&Tensor::vector(z).unwrap(), &x).unwrap();
            assert_eq!(got, expected);
        }

        let mut t = DeqCell::init(3, 2, 0.9, Activation::Tanh, &mut r).unwrap();
        t.b = Tensor::zeros(&[3]);
        let out = t.forward(&Tensor::zeros(&[3]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[0.0; 3]);
        assert!(t.forward(&Tensor::zeros(&[2]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn spectral_normalize_diagonal_and_unchanged_cases() {
        let mut c = scalar_cell(0.0, 1.0, 0.0);
        c.w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        c.u = Tensor::zeros(&[2, 1]);
        c.b = Tensor::zeros(&[2]);
        let n = c.spectral_normalize(50).unwrap();
        let expected = [0.9, 0.0, 0.0, 0.45];
        for (a, b) in n.w.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", n.w);
        }
        c.w = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.1]]).unwrap();
        assert_eq!(c.spectral_normalize(50).unwrap().w, c.w);
        c.w = Tensor::zeros(&[2, 2]);
        assert_eq!(c.spectral_normalize(50).unwrap(), c);
        assert!(c.spectral_normalize(5).is_err());
    }

    #[test]
    fn spectral_normalize_bound_and_idempotence() {
        for seed in 0..10 {
            let c = random_identity_cell(seed, 8, 4);
            assert!(spectral_norm_estimate(&c.w, 500) <= c.kappa + 1e-6);
            let again = c.spectral_normalize(200).unwrap();
            assert_eq!(again, c);
        }
    }

    #[test]
    fn identity_cell_fixed_point_matches_dense_solve() {
        let c = random_identity_cell(3, 6, 4);
        let x = [0.2, -0.4, 0.9, 0.1];
        let rep = c.solve_forward(&x, &SolverConfig::default(), None).unwrap();
        assert!(rep.converged && rep.residual <= 1e-8);
        let i_minus_w = Tensor::identity(6).sub(&c.w).unwrap();
        let oracle = solve(&i_minus_w, &c.injection(&x).unwrap()).unwrap();
        assert!(relative_error(rep.z_star.data(), &oracle) < 1e-7);
    }

    #[test]
    fn adjoint_scalar_and_zero_jacobian() {
        let c = scalar_cell(0.5, 1.0, 0.0);
        let cfg = SolverConfig {
            tol: 1e-12,
            ..SolverConfig::default()
        };
        let o = c.solve_adjoint(&[2.0], &[1.0], &[1.0], &cfg).unwrap();
        assert!((o[0] - 2.0).abs() < 1e-10);

        let c = scalar_cell(0.0, 1.0, 0.0);
        let o = c.solve_adjoint(&[1.0], &[1.0], &[0.7], &cfg).unwrap();
        assert_eq!(o, vec![0.7]);
    }

    #[test]
    fn adjoint_matches_dense_transpose_solve() {
        let c = random_identity_cell(5, 6, 3);
        let x = [0.5, -0.1, 0.3];
        let cfg = SolverConfig {
            tol: 1e-12,
            ..SolverConfig::default()
        };
        let z = c.solve_forward(&x, &cfg, None).unwrap().z_star.into_data();
        let y = [1.0, -2.0, 0.5, 0.0, 0.3, 1.1];
        let o = c.solve_adjoint(&z, &x, &y, &cfg).unwrap();
        let a = Tensor::identity(6).sub(&c.w.transpose()).unwrap();
        let oracle = solve(&a, &y).unwrap();
        assert!(relative_error(&o, &oracle) <= 1e-8);
    }

    #[test]
    fn scalar_vjp_matches_closed_form() {
        // z* = u·x / (1 - w)  ⇒  ∂z*/∂x = u / (1 - w)
        let (w, u) = (0.5, 1.5);
        let c = scalar_cell(w, u, 0.0);
        let cfg = SolverConfig {
            tol: 1e-13,
            ..SolverConfig::default()
        };
        let z = c.solve_forward(&[0.8], &cfg, None).unwrap();
        assert!((z.z_star.item() - u * 0.8 / (1.0 - w)).abs() < 1e-11);
        let g = c.vjp(z.z_star.data(), &[0.8], &[1.0], &cfg).unwrap();
        assert!((g.x[0] - u / (1.0 - w)).abs() < 1e-10);
    }

    #[test]
    fn identity_cell_vjp_matches_closed_form_jacobian() {
        // z* = (I - W)⁻¹ (U x + b)  ⇒  ∂z*/∂x ᵀ y = Uᵀ (I - W)⁻ᵀ y
        let c = random_identity_cell(6, 5, 3);
        let x = [0.1, 0.2, -0.3];
        let y = Tensor::vector(vec![0.4, -1.0, 0.2, 0.9, 0.0]).unwrap();
        let cfg = SolverConfig {
            tol: 1e-13,
            ..SolverConfig::default()
        };
        let z = c.solve_forward(&x, &cfg, None).unwrap();
        let g = c.vjp(z.z_star.data(), &x, y.data(), &cfg).unwrap();
        let inv_t = inverse(&Tensor::identity(5).sub(&c.w).unwrap()).unwrap().transpose();
        let o = matmul(&inv_t, &y).unwrap();
        let oracle = matmul(&c.u.transpose(), &o).unwrap();
        assert!(relative_error(&g.x, oracle.data()) < 1e-9);
        assert!(relative_error(g.b.data(), o.data()) < 1e-9);
    }

    #[test]
    fn contraction_holds_on_random_pairs() {
        let mut r = rng::stream(12, 0);
        let c = DeqCell::init(8, 4, 0.9, Activation::Tanh, &mut r).unwrap();
        let mut stretched = c.clone();
        stretched.w = stretched.w.scale(5.0);
        let c = stretched.spectral_normalize(DEFAULT_POWER_ITERS).unwrap();
        let x = Tensor::vector((0..4).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        for _ in 0..50 {
            let z1 = Tensor::vector((0..8).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
            let z2 = Tensor::vector((0..8).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
            let lhs = c
                .forward(&z1, &x)
                .unwrap()
                .sub(&c.forward(&z2, &x).unwrap())
                .unwrap()
                .norm();
            let rhs = c.kappa * z1.sub(&z2).unwrap().norm();
            assert!(lhs <= rhs * (1.0 + 1e-6));
        }
    }
}
