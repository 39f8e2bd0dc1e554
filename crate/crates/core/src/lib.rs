pub mod attacks;
pub mod bounds;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod net;
pub mod rng;
pub mod s2o;
pub mod table;
pub mod weight_stats;

pub use error::{Error, Result};
pub use linalg::Matrix;
