//! Minimal reverse-mode automatic differentiation over dense real and
//! split-plane complex tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Complex values
//! are differentiated plane by plane: the gradient of a real loss with
//! respect to a complex node is the pair `(dL/d re, dL/d im)`, which for the
//! bilinear complex product reduces to `g * conj(other)`.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, LeafReport, REL_ERR_FLOOR};
pub use graph::{ElementwiseKind, Graph, RecLossForm, Value, Var, LAYER_NORM_EPS, PROB_CLAMP};
pub use tensor::{ComplexTensor, Tensor};

pub(crate) use graph::{cl_reg_forward, rec_loss_row};
