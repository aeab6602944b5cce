pub mod ablate;
pub mod autodiff;
pub mod config;
pub mod backbone;
pub mod checkpoint;
pub mod decoder;
pub mod drawing;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod lfe;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pgt;
pub mod train;

pub use error::{Error, Result};
