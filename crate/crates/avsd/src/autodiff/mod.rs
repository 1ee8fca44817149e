//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Graphs are declared up front (define-then-run), evaluated against named
//! bindings, and differentiated on demand. Evaluation is pure: a `Graph`
//! can be shared across threads and evaluated concurrently because all
//! per-call state lives in `Bindings`, `Evaluation`, and `Gradients`.

mod backward;
mod forward;
mod graph;
mod tensor;

pub use backward::gradient;
pub use forward::evaluate;
pub use graph::{Bindings, Evaluation, Gradients, Graph, NodeId, Op};
pub use tensor::{matmul, Tensor};
