//! Space-time memory networks for semi-supervised video object
//! segmentation.
//!
//! Past frames and their object masks are embedded into key/value maps and
//! kept in a per-object memory. Each new frame is segmented by attending
//! from every query location to every space-time location in memory,
//! decoding the retrieved values, and merging objects with a differentiable
//! soft aggregation.

pub mod data;
pub mod decoder;
pub mod encoders;
pub mod engine;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod multi_object;
pub mod tensor;
pub mod training;

pub use error::{Result, StmError};
pub use memory::{MemoryPolicy, MemoryStore, ReadOutput};
pub use model::{ModelConfig, StmModel};
pub use multi_object::LabelMap;
pub use tensor::{Element, Gradients, Tape, Tensor, Var};
