//! Masked region diffusion over layered RGBA designs.
//!
//! A design is a background plus z-ordered foreground layers on a canvas
//! large enough to hold elements that overflow the visible region. Each
//! layer is cropped to its own rectangle, encoded into latent cells, and
//! packed together with the composite into one token sequence. A task-
//! specific mask plan decides which regions are noised and predicted and
//! which stay clean as conditions, so text-to-layers, image-to-layers and
//! layers-to-layers editing all share one model and one sampler.

pub mod bundle;
pub mod canvas;
pub mod codec;
pub mod distill;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod pack;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
