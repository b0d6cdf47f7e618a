//! Multi-device neural image signal processing.
//!
//! One network maps a packed RAW mosaic to the color renditions of several
//! devices, conditioned on a learned device embedding. A deterministic
//! reference ISP and its inverse manufacture exactly-known ground truth so
//! that training and evaluation run on synthetic data.

pub mod align;
pub mod color;
pub mod data;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod nnisp;
pub mod refisp;
pub mod train;

pub use error::{Error, Result};
