//! A compact reverse-mode differentiation engine over dense `f64` matrices.
//!
//! Operations are recorded on a [`Graph`] as they execute. [`Graph::gradient`]
//! walks the record backwards; with `create_graph` set, the backward pass is
//! itself recorded, so the returned gradients can be differentiated again.
//! That is what makes gradients of an inner gradient-descent step (and hence
//! meta-learning hypergradients) available.
//!
//! ```
//! use tapegrad::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let w = g.param(&Tensor::row(&[2.0]));
//! let y = w.mul(w).unwrap().mul(w).unwrap(); // w^3
//! let dy = g.gradient(y, &[w], true).unwrap();
//! assert_eq!(dy.grads[0].value().item(), 12.0);
//! let d2y = g.gradient(dy.grads[0], &[w], false).unwrap();
//! assert_eq!(d2y.grads[0].value().item(), 12.0);
//! ```

pub mod check;
mod error;
mod graph;
pub mod nn;
pub mod optim;
mod tensor;

pub use error::{AutogradError, Result};
pub use graph::{Gradients, Graph, NodeId, Var};
pub use tensor::{Shape, Tensor};
