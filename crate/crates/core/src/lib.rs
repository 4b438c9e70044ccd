pub mod autograd;
pub mod data;
pub mod episodes;
pub mod harness;
pub mod error;
pub mod image;
pub mod learners;
pub mod metrics;
pub mod net;
pub mod par;
pub mod sparsify;

pub use error::{FwsError, Result};
