use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Matrix product of an `m×k` and a `k×n` tensor. Rank-1 right operands are
/// treated as `k×1` columns and produce a rank-1 result.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() == 0 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = if b.rank() == 2 {
        (b.shape()[0], b.shape()[1])
    } else {
        (b.shape()[0], 1)
    };
    if k != kb {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matmul"));
    }
    let shape = if b.rank() == 2 { vec![m, n] } else { vec![m] };
    Ok(Tensor::from_parts(shape, out))
}

/// Vector-Jacobian product of [`matmul`]: returns `(ȳ·bᵀ, aᵀ·ȳ)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let b2 = as_column_matrix(b);
    let up2 = as_column_matrix(upstream);
    let grad_a = matmul(&up2, &b2.transpose())?;
    let grad_b = matmul(&a.transpose(), &up2)?;
    let grad_b = if b.rank() == 1 {
        Tensor::from_parts(b.shape().to_vec(), grad_b.into_data())
    } else {
        grad_b
    };
    Ok((grad_a, grad_b))
}

fn as_column_matrix(t: &Tensor) -> Tensor {
    if t.rank() == 1 {
        Tensor::from_parts(vec![t.len(), 1], t.data().to_vec())
    } else {
        t.clone()
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    mask.mul(upstream)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn tanh_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let deriv = x.map(|v| {
        let t = v.tanh();
        1.0 - t * t
    });
    deriv.mul(upstream)
}

/// Numerically stable softmax over a flat slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]`, evaluated as `logsumexp(logits) - logits[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    cross_entropy_slice(logits.data(), label)
}

pub fn cross_entropy_slice(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Argument(format!(
            "cross entropy needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            len: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = logits[label] - max;
    let loss = if shifted == 0.0 {
        // ln(1 + t) keeps precision when the labelled logit dominates.
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        rest.ln_1p()
    } else {
        let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
        sum.ln() - shifted
    };
    Ok(loss.max(0.0))
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax - onehot`.
pub fn cross_entropy_backward(logits: &Tensor, label: usize) -> Result<Tensor> {
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            len: logits.len(),
        });
    }
    let mut p = softmax(logits.data());
    p[label] -= 1.0;
    Ok(Tensor::from_parts(logits.shape().to_vec(), p))
}

/// Central-difference gradient `(f(x+h·eᵢ) - f(x-h·eᵢ)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Argument(format!("finite-difference step {step} must be > 0")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("non-finite objective at coordinate {i}")));
        }
        *g = (plus - minus) / (2.0 * step);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = dot(a, a).sqrt().max(dot(b, b).sqrt()).max(1e-12);
    diff / scale
}
