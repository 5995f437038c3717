#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod error;
pub mod grid;
pub mod attention;
pub mod autodiff;
pub mod posembed;
pub mod params;
pub mod model;
pub mod data;
pub mod train;
pub mod analysis;

pub use error::{Error, Result};
pub use grid::Grid;
