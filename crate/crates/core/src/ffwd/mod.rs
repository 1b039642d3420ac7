//! Cache-line message passing between two cores: a simulated version over
//! the coherence model and a real two-thread benchmark.

pub mod real;
pub mod sim;

pub use real::{ff_bench_real, FfRealConfig, FfStats};
pub use sim::{FfSim, FfSimConfig, FfSimMessage};
