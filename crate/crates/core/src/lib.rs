pub mod ekp;
pub mod error;
pub mod numerics;
pub mod operator;
pub mod oracle;
pub mod presets;
pub mod pressure;
pub mod shiftmodel;

pub use error::{Error, Result};
