//! Dense linear algebra on [`Tensor`] via nalgebra.

use nalgebra::DMatrix;

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::Argument(format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.rows(), t.cols(), t.data()))
}

fn from_dmatrix(m: &DMatrix<f64>) -> Result<Tensor> {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::matrix(m.nrows(), m.ncols(), data)
}

fn require_square(t: &Tensor, op: &'static str) -> Result<()> {
    if t.rank() != 2 || t.rows() != t.cols() {
        return Err(Error::dim(op, t.shape(), &[t.rows(), t.rows()]));
    }
    Ok(())
}

pub fn determinant(a: &Tensor) -> Result<f64> {
    require_square(a, "determinant")?;
    Ok(to_dmatrix(a)?.determinant())
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    require_square(a, "inverse")?;
    let inv = to_dmatrix(a)?
        .try_inverse()
        .ok_or_else(|| Error::Argument("matrix is singular".into()))?;
    from_dmatrix(&inv)
}

/// Solves `a · x = b` for a square `a` and vector `b` by LU with partial pivoting.
pub fn solve(a: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    require_square(a, "solve")?;
    if b.len() != a.rows() {
        return Err(Error::dim("solve", a.shape(), &[b.len()]));
    }
    let rhs = nalgebra::DVector::from_column_slice(b);
    let x = to_dmatrix(a)?
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Argument("matrix is singular".into()))?;
    Ok(x.iter().copied().collect())
}

/// Random orthogonal matrix from the QR factor of `g`.
pub fn orthogonalize(g: &Tensor) -> Result<Tensor> {
    require_square(g, "orthogonalize")?;
    let qr = to_dmatrix(g)?.qr();
    from_dmatrix(&qr.q())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_solve_agree() {
        let a = Tensor::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert!((determinant(&a).unwrap() - 10.0).abs() < 1e-12);
        let inv = inverse(&a).unwrap();
        let x = solve(&a, &[1.0, 2.0]).unwrap();
        let via_inv = super::super::ops::matmul(&inv, &Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        for (p, q) in x.iter().zip(via_inv.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(inverse(&Tensor::zeros(&[2, 2])).is_err());
    }
}
