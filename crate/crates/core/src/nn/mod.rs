//! A small reverse-mode differentiation engine in 64-bit floats, with the
//! layers needed by the sequence models.

pub mod conformer;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use conformer::{Conformer, ConformerConfig, ConformerLayer};
pub use graph::{Graph, Var};
pub use layers::{CodebookEmbeddings, LayerNorm, Linear};
pub use optim::AdamW;
pub use params::{Grads, Param, ParamId, ParamStore};
