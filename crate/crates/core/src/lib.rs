//! Signal-level simulation of ultrasonically powered structural-health-monitoring networks.
//!
//! Plates carry guided Lamb waves between a hub and battery-free sensor nodes. This crate
//! models the channel, the transmit and receive electronics, the node power chain, the
//! acoustic data links, the measurement protocol and the damage imaging that consumes
//! the collected records. It needs only `alloc`.

#![no_std]

extern crate alloc;

pub mod channel;
pub mod datalink;
pub mod error;
pub mod fft;
pub mod localization;
pub mod pmu;
pub mod protocol;
pub mod rng;
pub mod scenario;
pub mod signal;
pub mod transceiver;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use scenario::{Mode, PlateScenario};
pub use signal::Waveform;
