#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod exact_gp;
pub mod figure1;
pub mod fmgp;
pub mod gradcheck;
pub mod io;
pub mod json;
pub mod kernels;
pub mod metrics;
pub mod numkit;
pub mod training;

pub use error::{Error, Result};
pub use fmgp::Mode;
