//! Reference-conditioned portrait animation with attribute transfer.
//!
//! Two reference encoders (one for an attribute-only image, one for an
//! attribute-masked portrait) feed multi-scale features into a denoising
//! network through width-concatenated spatial attention. Training uses
//! self-reconstruction on a procedural portrait-video world.

pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod evalcli;
pub mod nnmodel;
pub mod pipeline;
pub mod raster;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
