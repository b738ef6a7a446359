pub mod backend;
pub mod color;
pub mod error;
pub mod latentops;
pub mod palette;
pub mod rng;
pub mod scheduler;
pub mod session;
pub mod vecmix;

pub use error::{Error, Result};
