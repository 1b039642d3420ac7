//! Experiment definitions: accelerator invocation, NIC receive/transmit and
//! operator offload, each over any transport.

pub mod bloom;
pub mod invocation;
pub mod nic;
pub mod offload;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::DmaMode;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::stats::{percentiles, LatencySummary};

pub use bloom::{bloom_compute, bloom_hashes, BloomParams};
pub use invocation::InvokeTransport;
pub use offload::{bloom_crossover, OffloadParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transport {
    EciPio,
    PciePio,
    PcieDma(DmaMode),
    /// Software only, for offload comparisons.
    Cpu,
}

impl Transport {
    pub const COMPARED: [Transport; 3] = [
        Transport::EciPio,
        Transport::PciePio,
        Transport::PcieDma(DmaMode::Polled),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transport::EciPio => "eci_pio",
            Transport::PciePio => "pcie_pio",
            Transport::PcieDma(DmaMode::Polled) => "pcie_dma",
            Transport::PcieDma(DmaMode::Irq) => "pcie_dma_irq",
            Transport::Cpu => "cpu",
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Workload {
    Invoke,
    NicRx,
    NicTx,
    OffloadFilterchain,
    OffloadBloom,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::Invoke => "invoke",
            Workload::NicRx => "nic_rx",
            Workload::NicTx => "nic_tx",
            Workload::OffloadFilterchain => "offload_filterchain",
            Workload::OffloadBloom => "offload_bloom",
        }
    }
}

/// One cell of an experiment matrix. `size` is bytes, except for Bloom
/// offload where it is the batch size in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExperimentSpec {
    pub workload: Workload,
    pub transport: Transport,
    pub size: usize,
    pub iters: usize,
    pub seed: u64,
}

impl ExperimentSpec {
    /// Seed for this cell's random streams, distinct per cell.
    pub fn stream_seed(&self) -> u64 {
        let mut h = self.seed ^ 0x6A09_E667_F3BC_C908;
        for v in [
            self.workload as u64,
            self.transport.name().len() as u64 + self.transport.name().as_bytes()[0] as u64 * 31,
            self.size as u64,
        ] {
            h = (h ^ v).wrapping_mul(0x100_0000_01B3).rotate_left(17);
        }
        h
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.stream_seed())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub latencies: Vec<u64>,
    pub summary: LatencySummary,
    pub throughput_bytes_per_s: f64,
}

impl ExperimentResult {
    pub(crate) fn new(
        spec: ExperimentSpec,
        latencies: Vec<u64>,
        bytes_per_iter: usize,
    ) -> Result<Self> {
        let summary = percentiles(&latencies)?;
        let elapsed: u128 = latencies.iter().map(|&v| u128::from(v)).sum();
        let throughput = if elapsed == 0 {
            0.0
        } else {
            (bytes_per_iter as f64 * latencies.len() as f64) / (elapsed as f64 / 1e9)
        };
        Ok(ExperimentResult {
            spec,
            latencies,
            summary,
            throughput_bytes_per_s: throughput,
        })
    }
}

pub fn run_experiment(cfg: &Config, spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    match spec.workload {
        Workload::Invoke => invocation::run_invocation(cfg, spec),
        Workload::NicRx | Workload::NicTx => nic::run_nic(cfg, spec),
        Workload::OffloadFilterchain | Workload::OffloadBloom => offload::run_offload(cfg, spec),
    }
}
