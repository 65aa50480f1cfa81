pub mod error;
pub mod linalg;
pub mod nn;
pub mod ocp;
pub mod oracle;
pub mod parallel;
pub mod sim;
pub mod trainer;
pub mod vehicle;

pub use error::{Error, Result};
