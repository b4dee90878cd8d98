//! Minimal reverse-mode differentiation core plus the second-order
//! machinery (finite-difference HVPs, damped conjugate gradient) required
//! by influence-function redaction.

pub mod optim;
pub mod params;
pub mod second_order;
pub mod tape;
pub mod tensor;

pub use optim::Adam;
pub use params::{ParamError, ParameterStore, Partition};
pub use second_order::{
    conjugate_gradient_solve, default_hvp_epsilon, gradient_check, hessian_vector_product,
    CgSolution, GradientCheckReport,
};
pub use tape::{AutodiffError, Gradients, Tape, Var};
pub use tensor::Tensor;
