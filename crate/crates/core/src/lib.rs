//! Vector self-attention networks on a small tape-based autograd engine.

pub mod accounting;
pub mod attention;
pub mod autograd;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod oracle;
pub mod robust;
pub mod structure;
pub mod models;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
