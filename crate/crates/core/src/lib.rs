pub mod error;
pub mod gaussmath;
pub mod model;
pub mod semantic;
pub mod episodic;
pub mod experiments;

pub use error::{Error, Result};
