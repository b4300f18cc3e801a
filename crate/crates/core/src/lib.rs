//! Hierarchical scene-parsing toolkit: lossless quadtree label compression,
//! a toy encoder-decoder with a sparse (active-site) decoder, training
//! machinery and activation memory accounting.

pub mod error;
pub mod mask;
pub mod model;
pub mod pyramid;
pub mod sparse;
pub mod train;
pub mod verify;

pub use error::{QgnError, Result};
