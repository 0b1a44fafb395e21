pub mod bench;
pub mod error;
pub mod image_entropy;
pub mod io;
pub mod losses;
pub mod primitive;
pub mod neighborhood;
pub mod optimizer;
pub mod pipeline;
pub mod ray_oracle;
pub mod render;
pub mod synth;

pub use error::{GefError, Result};
pub use image_entropy::{EntropyPyramid, GrayImage, Raster};
pub use losses::{LossBreakdown, LossConfig, Term, TermSet};
pub use neighborhood::{NeighborGraph, NeighborhoodStats, ThresholdParams};
pub use pipeline::{RunConfig, RunOutcome, Summary};
pub use primitive::{Camera, GaussianPrimitive, Scene};
pub use render::{Gradient, RgbImage};
