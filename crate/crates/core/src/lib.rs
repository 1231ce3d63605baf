pub mod diff;
pub mod error;
pub mod eval;
pub mod geom;
pub mod losses;
pub mod ltm;
pub mod model;
pub mod percept;
pub mod pipeline;
pub mod scl;
pub mod sim;
pub mod stm;

pub use error::{Error, Result};
