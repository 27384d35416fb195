pub mod ablation;
pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gate;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod propagation;
pub mod synthdata;
pub mod temporal_memory;
pub mod tensor;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
pub use model::QueryPropModel;
