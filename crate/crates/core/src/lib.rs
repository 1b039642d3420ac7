//! Cache-coherence based CPU/device messaging: a deterministic event-driven
//! model of a directory protocol with a device endpoint, the line-pair
//! protocols built on it, PCIe PIO and DMA cost models, and the benchmark
//! workloads that compare them.

pub mod baselines;
pub mod coherence;
pub mod config;
pub mod device;
pub mod error;
pub mod explore;
pub mod ffwd;
pub mod machine;
pub mod matrix;
pub mod sim;
pub mod stats;
pub mod stress;
pub mod workloads;
pub mod world;

pub use error::{Error, Result};
