use rand::RngCore;

use crate::baselines::{DmaParams, PcieParams};
use crate::config::Config;
use crate::device::{ComputeFunction, Variant};
use crate::error::{Error, Result};
use crate::machine::{lines_for, Machine, SimParams};
use crate::world::Topology;

use super::{ExperimentResult, ExperimentSpec, Transport};

/// Request/response invocation of a device function over one transport.
pub enum InvokeTransport {
    Eci {
        machine: Box<Machine>,
        channel: usize,
    },
    Pcie {
        params: PcieParams,
        compute: ComputeFunction,
    },
    Dma {
        params: DmaParams,
        mode: crate::baselines::DmaMode,
        compute: ComputeFunction,
        rng: Box<rand_chacha::ChaCha8Rng>,
    },
}

impl InvokeTransport {
    /// Set up a transport able to carry requests of up to `max_size` bytes.
    pub fn new(
        cfg: &Config,
        transport: Transport,
        max_size: usize,
        compute: ComputeFunction,
        seed: u64,
    ) -> Result<Self> {
        Ok(match transport {
            Transport::EciPio => {
                let mut params: SimParams = cfg.sim_params();
                params.seed = seed;
                let mut machine = Box::new(Machine::new(params, Topology::CpuDevice));
                let n = lines_for(max_size, machine.line_size());
                let channel = machine.open_channel(Variant::Bidirectional, n, compute)?;
                InvokeTransport::Eci { machine, channel }
            }
            Transport::PciePio => InvokeTransport::Pcie {
                params: cfg.pcie(),
                compute,
            },
            Transport::PcieDma(mode) => InvokeTransport::Dma {
                params: cfg.dma(),
                mode,
                compute,
                rng: Box::new(rand::SeedableRng::seed_from_u64(seed)),
            },
            Transport::Cpu => {
                return Err(Error::InvalidArgument("no invocation path for cpu".into()))
            }
        })
    }

    /// Run one request; returns latency in ns and the response bytes.
    pub fn invoke(&mut self, request: &[u8]) -> Result<(u64, Vec<u8>)> {
        match self {
            InvokeTransport::Eci { machine, channel } => {
                let t = machine.invoke(*channel, request)?;
                Ok((t.latency_ns, t.data))
            }
            InvokeTransport::Pcie { params, compute } => {
                let out = compute.apply(request);
                let ns = params.pio_write_latency(request.len())
                    + compute.latency_ns(request.len()) as f64
                    + params.pio_read_latency(out.len());
                Ok((ns.round() as u64, out))
            }
            InvokeTransport::Dma {
                params,
                mode,
                compute,
                rng,
            } => {
                let out = compute.apply(request);
                let ns = params.transfer_latency(request.len(), *mode)
                    + compute.latency_ns(request.len()) as f64
                    + params.transfer_latency(out.len(), *mode);
                Ok((params.perturb(ns, rng).round() as u64, out))
            }
        }
    }
}

pub fn run_invocation(cfg: &Config, spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let mut rng = spec.rng();
    let mut t = InvokeTransport::new(
        cfg,
        spec.transport,
        spec.size,
        ComputeFunction::echo(),
        rng.next_u64(),
    )?;
    let mut latencies = Vec::with_capacity(spec.iters);
    let mut request = vec![0u8; spec.size];
    for _ in 0..spec.iters {
        rng.fill_bytes(&mut request);
        let (ns, response) = t.invoke(&request)?;
        if response != request {
            return Err(Error::protocol(format!(
                "{} returned a corrupted response for {} bytes",
                spec.transport, spec.size
            )));
        }
        latencies.push(ns);
    }
    ExperimentResult::new(*spec, latencies, spec.size)
}
