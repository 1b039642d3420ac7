//! Batch offload of stream operators: a Bloom-filter hashing stage and a
//! chain of trivial filters coordinated by per-operator control messages.

use rand::RngCore;

use crate::config::Config;
use crate::device::ComputeFunction;
use crate::error::{Error, Result};

use super::bloom::{bloom_compute, bloom_hashes, BloomParams};
use super::invocation::InvokeTransport;
use super::{ExperimentResult, ExperimentSpec, Transport, Workload};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffloadParams {
    pub stream_fixed_ns: f64,
    pub filters: usize,
    pub filter_cpu_ns: f64,
    pub filter_cpu_per_word_ns: f64,
}

impl Default for OffloadParams {
    fn default() -> Self {
        OffloadParams {
            stream_fixed_ns: 25_000.0,
            filters: 31,
            filter_cpu_ns: 1000.0,
            filter_cpu_per_word_ns: 3.0,
        }
    }
}

/// Elements handed to the device per invocation.
pub const MAX_CHUNK_ELEMENTS: usize = 256;

/// Size of a filter-chain control message.
pub const CONTROL_BYTES: usize = 64;

/// Offloads Bloom hashing of batches, checking every device result against
/// the reference hashes.
pub struct BloomOffload {
    params: BloomParams,
    stream_fixed_ns: f64,
    transport: Transport,
    device: Option<InvokeTransport>,
    chunk: usize,
}

impl BloomOffload {
    pub fn new(cfg: &Config, transport: Transport, max_batch: usize, seed: u64) -> Result<Self> {
        let params = cfg.bloom();
        let chunk = max_batch.clamp(1, MAX_CHUNK_ELEMENTS);
        let device = match transport {
            Transport::Cpu => None,
            t => Some(InvokeTransport::new(
                cfg,
                t,
                chunk * params.element_size,
                bloom_compute(params),
                seed,
            )?),
        };
        Ok(BloomOffload {
            params,
            stream_fixed_ns: cfg.offload().stream_fixed_ns,
            transport,
            device,
            chunk,
        })
    }

    /// Hash `elements` (concatenated); returns batch latency and the hashes.
    pub fn run_batch(&mut self, elements: &[u8]) -> Result<(u64, Vec<u64>)> {
        let size = self.params.element_size;
        if !elements.len().is_multiple_of(size) {
            return Err(Error::ElementLength {
                expected: size,
                got: elements.len() % size,
            });
        }
        let batch = elements.len() / size;
        let mut hashes = Vec::with_capacity(batch * self.params.k);
        let mut ns = self.stream_fixed_ns;
        match self.device.as_mut() {
            None => {
                for e in elements.chunks_exact(size) {
                    hashes.extend(bloom_hashes(e, &self.params)?);
                }
                ns += batch as f64 * self.params.cpu_per_element_ns;
            }
            Some(dev) => {
                for part in elements.chunks(self.chunk * size) {
                    let (lat, out) = dev.invoke(part)?;
                    ns += lat as f64;
                    hashes.extend(
                        out.chunks_exact(8)
                            .map(|w| u64::from_le_bytes(w.try_into().expect("8 bytes"))),
                    );
                }
                let mut want = Vec::with_capacity(hashes.len());
                for e in elements.chunks_exact(size) {
                    want.extend(bloom_hashes(e, &self.params)?);
                }
                if want != hashes {
                    return Err(Error::protocol(format!(
                        "{} device hashes differ from the reference",
                        self.transport
                    )));
                }
            }
        }
        Ok((ns.round() as u64, hashes))
    }
}

/// Filter-chain batch latency for `bytes` of input.
pub struct FilterChain {
    params: OffloadParams,
    control: Option<InvokeTransport>,
    data: Option<InvokeTransport>,
}

impl FilterChain {
    pub fn new(cfg: &Config, transport: Transport, max_bytes: usize, seed: u64) -> Result<Self> {
        let params = cfg.offload();
        let (control, data) = match transport {
            Transport::Cpu => (None, None),
            t => (
                Some(InvokeTransport::new(
                    cfg,
                    t,
                    CONTROL_BYTES,
                    ComputeFunction::echo(),
                    seed,
                )?),
                Some(InvokeTransport::new(
                    cfg,
                    t,
                    max_bytes,
                    ComputeFunction::echo(),
                    seed.wrapping_add(1),
                )?),
            ),
        };
        Ok(FilterChain {
            params,
            control,
            data,
        })
    }

    pub fn run_batch(&mut self, batch: &[u8]) -> Result<u64> {
        let p = self.params;
        let mut ns = p.stream_fixed_ns;
        match (self.control.as_mut(), self.data.as_mut()) {
            (Some(control), Some(data)) => {
                let msg = [0u8; CONTROL_BYTES];
                for _ in 0..p.filters {
                    ns += control.invoke(&msg)?.0 as f64;
                }
                ns += data.invoke(batch)?.0 as f64;
            }
            _ => {
                let words = batch.len().div_ceil(8) as f64;
                ns += p.filters as f64 * (p.filter_cpu_ns + p.filter_cpu_per_word_ns * words);
            }
        }
        Ok(ns.round() as u64)
    }
}

pub fn run_offload(cfg: &Config, spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.size == 0 {
        return Err(Error::InvalidArgument(
            "batch must hold at least one element".into(),
        ));
    }
    let mut rng = spec.rng();
    let mut latencies = Vec::with_capacity(spec.iters);
    match spec.workload {
        Workload::OffloadBloom => {
            let element = cfg.bloom().element_size;
            let mut off = BloomOffload::new(cfg, spec.transport, spec.size, rng.next_u64())?;
            let mut batch = vec![0u8; spec.size * element];
            for _ in 0..spec.iters {
                rng.fill_bytes(&mut batch);
                latencies.push(off.run_batch(&batch)?.0);
            }
            ExperimentResult::new(*spec, latencies, spec.size * element)
        }
        _ => {
            let mut chain = FilterChain::new(cfg, spec.transport, spec.size, rng.next_u64())?;
            let mut batch = vec![0u8; spec.size];
            for _ in 0..spec.iters {
                rng.fill_bytes(&mut batch);
                latencies.push(chain.run_batch(&batch)?);
            }
            ExperimentResult::new(*spec, latencies, spec.size)
        }
    }
}

/// Batch sizes probed when searching for the offload crossover.
pub fn crossover_batches() -> Vec<usize> {
    let mut v: Vec<usize> = (1..=16).collect();
    v.extend((5..=12).map(|p| 1usize << p));
    v
}

/// Per-batch latency of the CPU and device paths and the smallest probed
/// batch from which the device path is faster for every larger probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossover {
    pub points: Vec<(usize, u64, u64)>,
    pub batch: Option<usize>,
}

pub fn bloom_crossover(cfg: &Config, transport: Transport) -> Result<Crossover> {
    let element = cfg.bloom().element_size;
    let mut points = Vec::new();
    for b in crossover_batches() {
        // A channel moves its whole line group per invoke, so size it to the batch.
        let mut cpu = BloomOffload::new(cfg, Transport::Cpu, b, cfg.seed())?;
        let mut dev = BloomOffload::new(cfg, transport, b, cfg.seed())?;
        let batch: Vec<u8> = (0..b * element).map(|i| (i % 251) as u8).collect();
        points.push((b, cpu.run_batch(&batch)?.0, dev.run_batch(&batch)?.0));
    }
    let mut batch = None;
    for (b, c, d) in points.iter().rev() {
        if d < c {
            batch = Some(*b);
        } else {
            break;
        }
    }
    Ok(Crossover { points, batch })
}
