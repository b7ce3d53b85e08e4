pub mod bias;
pub mod cli;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod train_eval;

pub use error::{KtError, Result};
