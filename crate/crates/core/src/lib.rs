pub mod attention;
pub mod autograd;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod inpaint_net;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod shadow_net;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
