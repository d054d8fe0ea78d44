//! Static background reconstruction from dynamic video with
//! staticness-attributed Gaussian splatting.

pub mod align;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod masks;
pub mod splat;
pub mod ssim;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{Grid, Image};
