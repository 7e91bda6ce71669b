//! Adversarially trained model compression.
//!
//! Trains small CNNs/MLPs whose every weight matrix is re-parameterized as
//! W = U*V + C under two global constraints: a nonzero budget k shared by all
//! U, V, C matrices, and a per-matrix cap of 2^b distinct nonzero values
//! enforced by zero-anchored k-means. The two constraints are split with ADMM
//! around an adversarial (min-max) training objective. Comparison pipelines
//! (plain/adversarial pruning, l0-projected training, low-rank decomposition)
//! and the attack evaluators needed for trade-off curves live here too.

pub mod attacks;
pub mod baselines;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod projections;
pub mod tensor;
pub mod trainer;

pub use error::{AtmcError, Result};
pub use graph::{Graph, Reduction, Var};
pub use model::{ArchitectureSpec, Block, ModelParams, ParamTriple};
pub use tensor::{Dtype, Element, Tensor};
