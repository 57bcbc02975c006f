pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod multirep;
pub mod objectives;
pub mod textproc;

pub use error::{Error, Result};
