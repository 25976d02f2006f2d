//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the record in reverse and
//! returns [`Gradients`] for the leaves. Leaves are either trainable
//! ([`Graph::param`]) or constants ([`Graph::constant`]); [`Var::stop_gradient`]
//! turns any intermediate into a constant with the same value.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, FiniteDiffReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{log_sigmoid, sigmoid, silu, softplus, Tensor};
