pub mod attitude;
pub mod config;
pub mod dare;
pub mod error;
pub mod experiments;
pub mod io;
pub mod lgvi;
pub mod mpc;
pub mod so3;
pub mod terminal;

pub use error::{Error, Result};
