//! Dense tensors, loss primitives, optimisers and gradient verification.

pub mod functions;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use functions::{cosine_similarity, cross_entropy, kl_divergence, log_softmax, softmax};
pub use gradcheck::{finite_diff_check, GradCheck, GradCheckReport};
pub use optim::{AdamState, SgdState};
pub use params::Params;
pub use tape::{BoundParams, Gradients, PoolAxes, Tape, Var};
pub use tensor::Tensor;
