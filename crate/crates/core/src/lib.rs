//! Spectral simulation of cavity acoustics coupled to damped membrane
//! patches on the cavity boundary.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acoustics;
pub mod coupling;
pub mod duhamel;
pub mod error;
pub mod geometry;
pub mod magnus;
pub mod membrane;
pub mod oracle;
pub mod quad;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
