//! Learning ellipsoidal reserve uncertainty sets through a robust zonal
//! security-constrained economic dispatch.

pub mod error;
pub mod geometry;
pub mod lpcore;
pub mod sced;
pub mod data;
pub mod quantile;
pub mod train;
pub mod eval;
pub mod oracle;

pub use error::{Error, Result};
