//! Span-based named entity recognition with two encoder branches: a
//! regularity-aware classifier and a regularity-agnostic boundary scorer,
//! trained jointly with an orthogonality penalty between them.

pub mod agnostic;
pub mod aware;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod orth;
pub mod params;
pub mod spans;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
