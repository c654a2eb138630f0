#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod csm;
pub mod dat;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod pipeline;
mod resample;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
