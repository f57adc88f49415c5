pub mod error;
pub mod panel;
pub mod weights;
pub mod likelihood;
pub mod estimation;
pub mod montecarlo;
pub mod io;
pub mod cli;
pub mod oracle;

pub use error::{Error, Result};
