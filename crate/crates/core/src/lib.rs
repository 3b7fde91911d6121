#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod channel;
pub mod config;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod tokenization;
pub mod training;

pub use error::{Error, Result};
