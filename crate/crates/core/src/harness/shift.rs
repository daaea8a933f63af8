use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{determinant, matmul, orthogonalize, Tensor};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    InvertibleLinear,
    Rotation,
    Noise,
}

impl ShiftKind {
    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::InvertibleLinear => "invertible_linear",
            ShiftKind::Rotation => "rotation",
            ShiftKind::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "invertible_linear" => Some(ShiftKind::InvertibleLinear),
            "rotation" => Some(ShiftKind::Rotation),
            "noise" => Some(ShiftKind::Noise),
            _ => None,
        }
    }
}

/// Minimum `|det A|` accepted for a linear shift.
pub const MIN_ABS_DET: f64 = 1e-6;

/// Input-space domain shift `x ↦ A x` (or additive noise); labels are untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub matrix: Option<Tensor>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn linear(matrix: Tensor) -> Self {
        Self {
            kind: ShiftKind::InvertibleLinear,
            matrix: Some(matrix),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn noise(sigma: f64, seed: u64) -> Self {
        Self {
            kind: ShiftKind::Noise,
            matrix: None,
            noise_sigma: sigma,
            seed,
        }
    }

    /// Draws a shift of the given kind for `dim`-dimensional inputs.
    ///
    /// `InvertibleLinear` is `Q₁ · diag(s) · Q₂` with random orthogonal factors
    /// and log-uniform gains `s ∈ [0.5, 2]`, redrawn until `|det| > 1e-6`.
    pub fn sample(kind: ShiftKind, dim: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, streams::SHIFT);
        let mut gaussian = |n: usize| -> Result<Tensor> {
            let data = (0..n * n).map(|_| StandardNormal.sample(&mut r)).collect();
            Tensor::matrix(n, n, data)
        };
        let matrix = match kind {
            ShiftKind::Noise => None,
            ShiftKind::Rotation => Some(orthogonalize(&gaussian(dim)?)?),
            ShiftKind::InvertibleLinear => loop {
                let q1 = orthogonalize(&gaussian(dim)?)?;
                let q2 = orthogonalize(&gaussian(dim)?)?;
                let mut gains = Tensor::zeros(&[dim, dim]);
                let mut gr = rng::substream(seed, streams::SHIFT, 1);
                for i in 0..dim {
                    gains.data_mut()[i * dim + i] = 2f64.powf(gr.random_range(-1.0..1.0));
                }
                let a = matmul(&matmul(&q1, &gains)?, &q2)?;
                if determinant(&a)?.abs() > MIN_ABS_DET {
                    break Some(a);
                }
            },
        };
        Ok(Self {
            kind,
            matrix,
            noise_sigma,
            seed,
        })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match (&self.kind, &self.matrix) {
            (ShiftKind::Noise, _) => {
                if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
                    return Err(Error::Argument(format!(
                        "noise sigma {} must be >= 0",
                        self.noise_sigma
                    )));
                }
                Ok(())
            }
            (_, None) => Err(Error::Argument("linear shift needs a matrix".into())),
            (_, Some(a)) => {
                if a.rank() != 2 || a.rows() != dim || a.cols() != dim {
                    return Err(Error::dim("apply_shift", a.shape(), &[dim, dim]));
                }
                let det = determinant(a)?;
                if det.abs() <= MIN_ABS_DET {
                    return Err(Error::Argument(format!(
                        "shift matrix is not invertible (|det| = {:e})",
                        det.abs()
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Applies `spec` to every input row; labels are copied unchanged.
pub fn apply_shift(ds: &Dataset, spec: &ShiftSpec) -> Result<Dataset> {
    let d = ds.dim();
    spec.validate(d)?;
    let inputs = match &spec.matrix {
        Some(a) if spec.kind != ShiftKind::Noise => {
            // rows are samples, so X' = X Aᵀ
            matmul(&ds.inputs, &a.transpose())?
        }
        _ => {
            let stream = match ds.split {
                Split::Train => 0,
                Split::Test => 1,
            };
            let mut r = rng::substream(spec.seed, streams::SHIFT, 2 + stream);
            let mut out = ds.inputs.clone();
            for v in out.data_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += spec.noise_sigma * z;
            }
            out
        }
    };
    ds.with_inputs(inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::make_blobs;
    use crate::numerics::inverse;

    #[test]
    fn identity_shift_is_a_no_op() {
        let ds = make_blobs(3, 4, 30, 1).unwrap();
        let out = apply_shift(&ds, &ShiftSpec::linear(Tensor::identity(4))).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn inverse_shift_restores_inputs() {
        let ds = make_blobs(3, 6, 30, 2).unwrap();
        for kind in [ShiftKind::InvertibleLinear, ShiftKind::Rotation] {
            let spec = ShiftSpec::sample(kind, 6, 0.0, 5).unwrap();
            let shifted = apply_shift(&ds, &spec).unwrap();
            assert_eq!(shifted.labels, ds.labels);
            let back = ShiftSpec::linear(inverse(spec.matrix.as_ref().unwrap()).unwrap());
            let restored = apply_shift(&shifted, &back).unwrap();
            for (a, b) in restored.inputs.data().iter().zip(ds.inputs.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let ds = make_blobs(2, 2, 20, 0).unwrap();
        let singular = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(
            apply_shift(&ds, &ShiftSpec::linear(singular)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn noise_shift_keeps_labels_and_is_seeded() {
        let ds = make_blobs(2, 3, 20, 0).unwrap();
        let a = apply_shift(&ds, &ShiftSpec::noise(0.5, 3)).unwrap();
        let b = apply_shift(&ds, &ShiftSpec::noise(0.5, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels, ds.labels);
        assert_ne!(a.inputs, ds.inputs);
    }
}
