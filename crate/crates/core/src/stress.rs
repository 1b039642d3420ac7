//! Randomized protocol tester: random channel shapes, payload sizes, device
//! delays and message reordering, with the single-writer check on every
//! delivery and payload checks on every transfer.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::device::{ComputeFunction, Variant};
use crate::error::{Error, Result};
use crate::machine::{Machine, SimParams};
use crate::world::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StressConfig {
    pub seed: u64,
    /// Upper bound on the line-pair group size.
    pub max_lines: usize,
    pub operations: usize,
    /// Upper bound on injected device delays.
    pub max_defer_ns: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            seed: 0,
            max_lines: 8,
            operations: 3,
            max_defer_ns: 20_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StressReport {
    pub operations: usize,
    pub swmr_violations: usize,
    pub payload_violations: usize,
    pub other_failures: usize,
    pub first_problem: Option<String>,
}

impl StressReport {
    pub fn failures(&self) -> usize {
        self.swmr_violations + self.payload_violations + self.other_failures
    }

    fn note(&mut self, seed: u64, what: String) {
        if self.first_problem.is_none() {
            self.first_problem = Some(format!("seed {seed}: {what}"));
        }
    }

    pub fn merge(&mut self, other: StressReport) {
        self.operations += other.operations;
        self.swmr_violations += other.swmr_violations;
        self.payload_violations += other.payload_violations;
        self.other_failures += other.other_failures;
        if self.first_problem.is_none() {
            self.first_problem = other.first_problem;
        }
    }
}

fn scramble(r: &[u8]) -> Vec<u8> {
    r.iter()
        .enumerate()
        .map(|(i, b)| b ^ (i as u8).wrapping_mul(31) ^ 0x5A)
        .collect()
}

/// One randomized run. Protocol failures are counted in the report rather
/// than returned.
pub fn stress_run(cfg: &StressConfig) -> StressReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = StressReport::default();
    if let Err(e) = drive(cfg, &mut rng, &mut report) {
        match e {
            Error::Swmr { .. } => report.swmr_violations += 1,
            _ => report.other_failures += 1,
        }
        report.note(cfg.seed, e.to_string());
    }
    report
}

fn drive(cfg: &StressConfig, rng: &mut ChaCha8Rng, report: &mut StressReport) -> Result<()> {
    let mut params = SimParams {
        seed: rng.next_u64(),
        jitter: true,
        reorder: true,
        check_swmr: true,
        ..SimParams::default()
    };
    params.device.exclusive_return = rng.random_bool(0.5);
    // Small overflow banks keep runs short while still spanning many lines.
    params.nic_overflow_lines = rng.random_range(1..=cfg.max_lines.max(1));
    let mut m = Machine::new(params, Topology::CpuDevice);
    let line = m.line_size();
    let variant = match rng.random_range(0..4) {
        0 => Variant::ReadFromDevice,
        1 => Variant::WriteToDevice,
        _ => Variant::Bidirectional,
    };
    let compute_ns = rng.random_range(0..=cfg.max_defer_ns);
    let n = match variant {
        Variant::Bidirectional => rng.random_range(1..=cfg.max_lines.max(1)),
        _ => params.nic_overflow_lines,
    };
    let ch = m.open_channel(
        variant,
        n,
        ComputeFunction::new("scramble", scramble).with_latency(compute_ns, 0.0),
    )?;
    let lines = m.world.device.channels[ch].all_lines();
    for _ in 0..cfg.operations {
        if rng.random_bool(0.5) {
            let victim = lines[rng.random_range(0..lines.len())];
            let ns = rng.random_range(0..=cfg.max_defer_ns);
            m.set_device_stall(&victim, ns);
        }
        let cap = n * line;
        let len = rng.random_range(1..=cap);
        let mut payload = vec![0u8; len];
        rng.fill_bytes(&mut payload);
        let (got, want) = match variant {
            Variant::Bidirectional => (m.invoke(ch, &payload)?.data, scramble(&payload)),
            Variant::WriteToDevice => (m.send(ch, &payload)?.data, payload),
            Variant::ReadFromDevice => {
                let arrive = rng.random_range(0..=cfg.max_defer_ns);
                (m.recv(ch, &payload, arrive)?.data, payload)
            }
        };
        report.operations += 1;
        if got != want {
            report.payload_violations += 1;
            report.note(
                cfg.seed,
                format!("{variant:?} payload of {len} bytes corrupted"),
            );
        }
        m.check_quiescent()?;
    }
    Ok(())
}
