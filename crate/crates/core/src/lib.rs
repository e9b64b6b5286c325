//! Simulation library for a hybrid-RIS (HRIS) assisted millimeter-wave OTFS uplink.
//!
//! The crate covers the whole link:
//!
//! - [`ddframe`]: delay-Doppler frame layout, symbol mapping and the
//!   ISFFT / Heisenberg / Wigner / SFFT modem chain.
//! - [`channel`]: array geometry, random multipath realizations, the cascaded
//!   user-HRIS-BS channel and its delay-Doppler spreading kernel.
//! - [`hris`]: preamble processing at the surface: sparse element activation,
//!   NOMP parameter extraction, closed-form phase-shift design and LS
//!   recalibration of path gains.
//! - [`jcedd`]: the receiver. Message passing over the joint factor graph of
//!   channel gains and data symbols, interleaved with EM updates of the
//!   sparsity, tap variances and fractional Doppler.
//! - [`oracle`]: slow brute-force references used to cross-check the above.
//! - [`harness`]: Monte-Carlo experiment runner, metrics and result files.

pub mod channel;
pub mod ddframe;
pub mod error;
pub mod harness;
pub mod hris;
pub mod jcedd;
pub mod math;
pub mod oracle;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
