//! Graph Mamba Network engine.
//!
//! Graphs are tokenized into ordered random-walk neighborhood sequences,
//! each token is encoded into a vector, and a stack of bidirectional
//! selective state-space blocks turns the sequences into node encodings.
//! A second stack scans the nodes themselves in degree (or PageRank) order.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod eigen;
pub mod encoder;
pub mod error;
pub mod generators;
pub mod graph;
pub mod harness;
pub mod model;
pub mod posenc;
pub mod ssm;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{GmnError, Result};
pub use graph::Graph;
pub use tensor::Matrix;
