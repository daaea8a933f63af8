//! Desk-scale check of the input/output prompt asymmetry.
//!
//! A one-hidden-layer ReLU regressor `f(x) = vᵀ ReLU(Ŵ x)` is fit exactly.
//! An invertible input transform `A` can be undone by retraining `W`
//! (`W = Ŵ A⁻¹` is feasible), while negating the representation kills every
//! ReLU and no choice of `v` recovers strictly positive targets.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{determinant, inverse, matmul, solve, Tensor};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop1Config {
    pub dim: usize,
    pub hidden: usize,
    pub samples: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            dim: 4,
            hidden: 4,
            samples: 200,
            restarts: 10,
            max_iters: 50_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub pretrain_loss: f64,
    /// Loss of the closed-form `W = Ŵ A⁻¹` on the transformed inputs.
    pub closed_form_loss: f64,
    pub input_side_loss: f64,
    /// Minimum over restarts.
    pub output_side_loss: f64,
    pub output_side_losses: Vec<f64>,
    /// Output side with `B = I`.
    pub control_loss: f64,
}

pub const INPUT_SIDE_MAX: f64 = 1e-3;
pub const OUTPUT_SIDE_MIN: f64 = 0.5;

impl Prop1Report {
    pub fn confirmed(&self) -> bool {
        self.input_side_loss <= INPUT_SIDE_MAX
            && self.output_side_losses.iter().all(|&l| l >= OUTPUT_SIDE_MIN)
            && self.control_loss <= INPUT_SIDE_MAX
    }

    pub fn verdict(&self) -> &'static str {
        if self.confirmed() {
            "asymmetry confirmed"
        } else {
            "asymmetry not observed"
        }
    }
}

struct Problem {
    xs: Tensor,
    ys: Vec<f64>,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Row-wise hidden activations `H = ReLU(X Wᵀ Bᵀ)`.
fn hidden(xs: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(matmul(&matmul(xs, &w.transpose())?, &b.transpose())?.map(relu))
}

fn mse(pred: &[f64], ys: &[f64]) -> f64 {
    pred.iter().zip(ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / ys.len() as f64
}

fn predict(h: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..h.rows())
        .map(|i| h.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn top_eigenvalue(m: &Tensor) -> f64 {
    let n = m.rows();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; n];
        crate::numerics::matvec_into(m.data(), n, n, &v, &mut next);
        lambda = crate::numerics::norm(&next);
        if lambda == 0.0 {
            return 0.0;
        }
        v = next.into_iter().map(|a| a / lambda).collect();
    }
    lambda
}

/// Gradient descent on `v` for `mean (vᵀh - y)²` with step `1/L`.
fn fit_v(h: &Tensor, ys: &[f64], v0: Vec<f64>, max_iters: usize) -> Result<(Vec<f64>, f64)> {
    let n = h.rows() as f64;
    let gram = matmul(&h.transpose(), h)?.scale(2.0 / n);
    let l = top_eigenvalue(&gram);
    let mut v = v0;
    if l == 0.0 {
        // all features dead: the gradient is identically zero
        return Ok((v.clone(), mse(&predict(h, &v), ys)));
    }
    let step = 1.0 / l;
    for _ in 0..max_iters {
        let pred = predict(h, &v);
        if mse(&pred, ys) <= 1e-10 {
            break;
        }
        let mut g = vec![0.0; v.len()];
        for i in 0..h.rows() {
            let r = 2.0 * (pred[i] - ys[i]) / n;
            for (gj, &hj) in g.iter_mut().zip(h.row(i)) {
                *gj += r * hj;
            }
        }
        for (vj, gj) in v.iter_mut().zip(&g) {
            *vj -= step * gj;
        }
    }
    let loss = mse(&predict(h, &v), ys);
    Ok((v, loss))
}

/// Gradient descent on `W` with `v` frozen, from `w0`.
fn fit_w(xs: &Tensor, ys: &[f64], v: &[f64], w0: Tensor, max_iters: usize) -> Result<(Tensor, f64)> {
    let n = xs.rows() as f64;
    let (k, d) = (w0.rows(), w0.cols());
    // Lipschitz bound of the gradient while every unit stays active.
    let l = 2.0 * v.iter().map(|a| a * a).sum::<f64>() * top_eigenvalue(&matmul(&xs.transpose(), xs)?.scale(1.0 / n));
    let step = 1.0 / l;
    let eye = Tensor::identity(k);
    let mut w = w0;
    for _ in 0..max_iters {
        let pre = matmul(xs, &w.transpose())?;
        let pred = predict(&pre.map(relu), v);
        if mse(&pred, ys) <= 1e-10 {
            break;
        }
        let mut g = vec![0.0; k * d];
        for i in 0..xs.rows() {
            let r = 2.0 * (pred[i] - ys[i]) / n;
            for j in 0..k {
                if pre.row(i)[j] > 0.0 {
                    for (gjl, &xl) in g[j * d..(j + 1) * d].iter_mut().zip(xs.row(i)) {
                        *gjl += r * v[j] * xl;
                    }
                }
            }
        }
        for (wv, gv) in w.data_mut().iter_mut().zip(&g) {
            *wv -= step * gv;
        }
    }
    let loss = mse(&predict(&hidden(xs, &w, &eye)?, v), ys);
    Ok((w, loss))
}

fn build(cfg: &Prop1Config) -> Result<(Problem, Tensor, Vec<f64>, f64)> {
    let mut r = rng::stream(cfg.seed, streams::PROP1);
    let (d, k, n) = (cfg.dim, cfg.hidden, cfg.samples);
    let x: Vec<f64> = (0..n * d).map(|_| r.random_range(0.5..1.5)).collect();
    let xs = Tensor::matrix(n, d, x)?;
    let w_hat = Tensor::matrix(k, d, (0..k * d).map(|_| r.random_range(0.5..1.5)).collect())?;
    let v_true: Vec<f64> = (0..k).map(|_| r.random_range(0.5..1.5)).collect();
    let h = hidden(&xs, &w_hat, &Tensor::identity(k))?;
    let ys = predict(&h, &v_true);
    if ys.iter().any(|&y| y < 1.0) {
        return Err(Error::Setup("construction produced a target below 1".into()));
    }
    // least-squares fit of v through the normal equations
    let ht = h.transpose();
    let rhs = matmul(&ht, &Tensor::vector(ys.clone())?)?;
    let v_hat = solve(&matmul(&ht, &h)?, rhs.data())?;
    let loss = mse(&predict(&h, &v_hat), &ys);
    if loss >= 1e-6 {
        return Err(Error::Setup(format!("pretraining loss {loss:e} did not reach 1e-6")));
    }
    Ok((Problem { xs, ys }, w_hat, v_hat, loss))
}

/// Invertible input transform with positive entries, so `A x` stays in the
/// all-active ReLU region.
fn input_transform(cfg: &Prop1Config) -> Result<Tensor> {
    let d = cfg.dim;
    let mut r = rng::substream(cfg.seed, streams::PROP1, 1);
    loop {
        let mut a = Tensor::identity(d);
        for v in a.data_mut() {
            *v += r.random_range(0.0..0.5);
        }
        if determinant(&a)?.abs() > 1e-2 {
            return Ok(a);
        }
    }
}

pub fn verify_proposition1(cfg: &Prop1Config) -> Result<Prop1Report> {
    if cfg.dim == 0 || cfg.hidden == 0 || cfg.samples < cfg.dim.max(cfg.hidden) || cfg.restarts == 0 {
        return Err(Error::Argument("asymmetry instance is degenerate".into()));
    }
    let (p, w_hat, v_hat, pretrain_loss) = build(cfg)?;
    let k = cfg.hidden;
    let eye = Tensor::identity(k);

    // input side: x ↦ A x, retrain W with v frozen
    let a = input_transform(cfg)?;
    let xs_a = matmul(&p.xs, &a.transpose())?;
    let closed = matmul(&w_hat, &inverse(&a)?)?;
    let closed_form_loss = mse(&predict(&hidden(&xs_a, &closed, &eye)?, &v_hat), &p.ys);
    let (_, input_side_loss) = fit_w(&xs_a, &p.ys, &v_hat, w_hat.clone(), cfg.max_iters)?;

    // output side: representation multiplied by B, retrain v from random starts
    let mut r = rng::substream(cfg.seed, streams::PROP1, 2);
    let mut restart = |b: &Tensor| -> Result<Vec<f64>> {
        let h = hidden(&p.xs, &w_hat, b)?;
        (0..cfg.restarts)
            .map(|_| {
                let v0 = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
                Ok(fit_v(&h, &p.ys, v0, cfg.max_iters)?.1)
            })
            .collect()
    };
    let output_side_losses = restart(&eye.scale(-1.0))?;
    let control_loss = restart(&eye)?.into_iter().fold(f64::INFINITY, f64::min);
    let output_side_loss = output_side_losses.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Prop1Report {
        pretrain_loss,
        closed_form_loss,
        input_side_loss,
        output_side_loss,
        output_side_losses,
        control_loss,
    })
}
