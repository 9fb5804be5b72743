//! Minimal reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).
//!
//! A [`Graph`] records every op whose inputs include a tracked value; calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`] for
//! the parameter leaves. Ops on constants are evaluated eagerly and never
//! recorded, which doubles as the inference path.

mod conv;
mod elementwise;
pub mod gradcheck;
mod graph;
mod linalg;
mod norm;
mod structural;

pub use graph::{Gradients, Graph, Var};
pub use norm::{BatchNormMode, BatchStats};
pub use structural::{reflect_index, ZERO_FILL};
