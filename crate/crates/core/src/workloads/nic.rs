use rand::RngCore;

use crate::config::Config;
use crate::device::{ComputeFunction, Variant};
use crate::error::{Error, Result};
use crate::machine::Machine;
use crate::world::Topology;

use super::{ExperimentResult, ExperimentSpec, Transport, Workload};

pub const MIN_FRAME: usize = 64;
pub const MAX_FRAME: usize = 9600;

pub fn run_nic(cfg: &Config, spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if !(MIN_FRAME..=MAX_FRAME).contains(&spec.size) {
        return Err(Error::InvalidArgument(format!(
            "packet size {} outside {MIN_FRAME}..={MAX_FRAME}",
            spec.size
        )));
    }
    let rx = spec.workload == Workload::NicRx;
    let mut rng = spec.rng();
    let mut latencies = Vec::with_capacity(spec.iters);
    match spec.transport {
        Transport::EciPio => {
            let mut params = cfg.sim_params();
            params.seed = rng.next_u64();
            let mut m = Machine::new(params, Topology::CpuDevice);
            let variant = if rx {
                Variant::ReadFromDevice
            } else {
                Variant::WriteToDevice
            };
            let ch = m.open_channel(variant, params.nic_overflow_lines, ComputeFunction::echo())?;
            let mut frame = vec![0u8; spec.size];
            for _ in 0..spec.iters {
                rng.fill_bytes(&mut frame);
                let t = if rx {
                    m.recv(ch, &frame, cfg.nic_arrival_delay_ns())?
                } else {
                    m.send(ch, &frame)?
                };
                if t.data != frame {
                    return Err(Error::protocol(format!(
                        "frame of {} bytes corrupted",
                        spec.size
                    )));
                }
                latencies.push(t.latency_ns);
            }
        }
        Transport::PciePio => {
            let p = cfg.pcie();
            let ns = if rx {
                p.pio_read_latency(spec.size)
            } else {
                p.pio_write_latency(spec.size)
            };
            latencies.resize(spec.iters, ns.round() as u64);
        }
        Transport::PcieDma(_) => {
            let p = cfg.dma();
            let ns = if rx {
                p.nic_rx_latency(spec.size)
            } else {
                p.nic_tx_latency(spec.size)
            };
            for _ in 0..spec.iters {
                latencies.push(p.perturb(ns, &mut rng).round() as u64);
            }
        }
        Transport::Cpu => return Err(Error::InvalidArgument("no NIC path for cpu".into())),
    }
    ExperimentResult::new(*spec, latencies, spec.size)
}
