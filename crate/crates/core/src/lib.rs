//! Channel pruning for convolutional networks by entropy-regularized sparse
//! regression.
//!
//! Each convolution is lifted to a linear map over patch columns, and a
//! probability vector over its input channels is fitted jointly with a
//! regression matrix. Penalizing the entropy of that vector drives it onto a
//! few channels; the rest are removed together with the filters that produce
//! them, and the surviving kernels are refit.

pub mod config;
pub mod distribution;
pub mod dump;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod lifting;
pub mod netfile;
pub mod network;
pub mod pipeline;
pub mod solver;
pub mod tensor;
pub mod zoo;

pub use config::SparsifyConfig;
pub use distribution::{entropy, ProbabilityVector};
pub use dump::LayerDump;
pub use error::{Error, Result};
pub use geometry::ConvGeometry;
pub use lifting::{extract_patches, RegressionDataset};
pub use network::{sparsity, FlopConvention, NetworkSpec};
pub use pipeline::{prune_network, report, sparsify_layer, sparsify_network, LayerPruneResult, PruneReport};
pub use solver::{solve, SolveResult};
pub use tensor::Tensor;
