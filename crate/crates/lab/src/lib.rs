pub mod config;
pub mod error;
pub mod output;
pub mod study;

pub use config::{parse_model, ModelSpec};
pub use error::{LabError, Result};
pub use study::{run_study, StudyResult};
