//! Float64 reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations on [`Var`] handles; [`Graph::backward`]
//! returns gradients for the leaves. Parameters live in a [`ParamStore`]
//! and are bound to a graph through a [`Session`].

mod error;
mod graph;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_inputs, check_params, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamStore, Session};
pub use tensor::{shape_str, Tensor};
