pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gp_head;
pub mod mae;
pub mod model;
pub mod nn;
pub mod train;
pub mod vit;
pub mod viz;

pub use error::{Error, Result};
