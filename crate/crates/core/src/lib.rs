pub mod error;
pub mod geometry;
pub mod io;
pub mod registration;
pub mod case;
pub mod manifold;
pub mod autodiff;
pub mod network;
pub mod training;
pub mod reconstruction;
pub mod synthetic;
pub mod eval;
pub mod pipeline;

pub use error::{Error, Result};
