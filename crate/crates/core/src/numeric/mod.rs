//! Dense tensors, reverse-mode differentiation, attention, and gradient checking.

mod attention;
mod gradcheck;
mod graph;
pub mod io;
pub mod nn;
mod params;
mod tensor;

pub use attention::{masked_softmax, AttentionMask, AttnGroup, AttnLayout, MASK_NEG};
pub use gradcheck::{grad_check, grad_check_params, rel_err, GradCheckReport, REL_FLOOR};
pub use graph::{sigmoid, ConvGeom, Grads, Graph, RowMix, Unary, Var};
pub use params::{ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
