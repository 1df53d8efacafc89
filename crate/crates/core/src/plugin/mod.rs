//! Plugin contract, permissions and the host that runs the chain.

mod host;
mod types;

pub use host::*;
pub use types::*;
