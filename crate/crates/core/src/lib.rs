pub mod audio;
pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod scene;
pub mod sepnet;
pub mod sod;

pub use error::{Error, Result};
