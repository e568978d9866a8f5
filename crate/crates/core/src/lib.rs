//! Scene flow estimation on point clouds with a learnable patch-to-patch
//! cost volume and a coarse-to-fine pyramid network.

#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod autodiff;
pub mod cli;
pub mod costvolume;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod losses;
pub mod network;
pub mod pointconv;

pub use error::{Error, Result};
