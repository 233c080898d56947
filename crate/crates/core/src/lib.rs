pub mod ablation;
pub mod augment;
pub mod autodiff;
pub mod baseline;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod model;
pub mod optim;
pub mod queue;
pub mod sinkhorn;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
