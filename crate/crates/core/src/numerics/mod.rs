//! Dense tensor arithmetic with explicit vector-Jacobian rules.

mod linalg;
mod ops;
mod param;
mod tensor;

pub use linalg::{determinant, inverse, orthogonalize, solve};
pub use ops::{
    cross_entropy, cross_entropy_backward, cross_entropy_slice, finite_diff_grad, matmul, matmul_backward,
    relative_error, relu, relu_backward, softmax, tanh, tanh_backward,
};
pub use param::{check_unique_names, Param};
pub use tensor::{add_outer, axpy, dot, matvec_into, matvec_t_into, norm, Tensor};
