pub mod contrastive;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod mean_teacher;
pub mod numerics;
pub mod oracle;
pub mod selfcheck;
pub mod synth_data;
pub mod trainer;

pub use error::{CmtError, Result};
