use rand::Rng;
use rand_distr::{Distribution, LogNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DmaMode {
    Polled,
    Irq,
}

/// Heavy-tailed multiplicative noise: a narrow lognormal body plus a rare,
/// much slower tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmaJitter {
    pub body_sigma: f64,
    pub tail_prob: f64,
    pub tail_median: f64,
    pub tail_sigma: f64,
}

impl Default for DmaJitter {
    fn default() -> Self {
        DmaJitter {
            body_sigma: 0.01,
            tail_prob: 0.01,
            tail_median: 1.6,
            tail_sigma: 0.15,
        }
    }
}

impl DmaJitter {
    pub fn multiplier<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (median, sigma) = if rng.random_bool(self.tail_prob.clamp(0.0, 1.0)) {
            (self.tail_median, self.tail_sigma)
        } else {
            (1.0, self.body_sigma)
        };
        match LogNormal::new(median.ln(), sigma.max(0.0)) {
            Ok(d) => d.sample(rng),
            Err(_) => median,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmaParams {
    pub desc_overhead_ns: f64,
    pub per_byte_ns: f64,
    pub irq_extra_ns: f64,
    pub max_tlp: usize,
    pub nic_rx_fixed_ns: f64,
    pub nic_tx_fixed_ns: f64,
    pub nic_rx_per_byte_ns: f64,
    pub nic_tx_per_byte_ns: f64,
    pub jitter: Option<DmaJitter>,
}

impl Default for DmaParams {
    fn default() -> Self {
        DmaParams {
            desc_overhead_ns: 10_000.0,
            per_byte_ns: 0.1,
            irq_extra_ns: 2_000.0,
            max_tlp: 4096,
            nic_rx_fixed_ns: 65_390.0,
            nic_tx_fixed_ns: 10_060.0,
            nic_rx_per_byte_ns: 0.05,
            nic_tx_per_byte_ns: 0.595,
            jitter: None,
        }
    }
}

impl DmaParams {
    /// One descriptor-driven transfer of `size` bytes.
    pub fn transfer_latency(&self, size: usize, mode: DmaMode) -> f64 {
        let units = size.max(1).div_ceil(self.max_tlp) as f64;
        let irq = match mode {
            DmaMode::Polled => 0.0,
            DmaMode::Irq => self.irq_extra_ns,
        };
        self.desc_overhead_ns * units + size as f64 * self.per_byte_ns + irq
    }

    /// Request to the device and response back: two transfers.
    pub fn invoke_latency(&self, size: usize, mode: DmaMode) -> f64 {
        2.0 * self.transfer_latency(size, mode)
    }

    pub fn nic_rx_latency(&self, size: usize) -> f64 {
        self.nic_rx_fixed_ns + size.saturating_sub(64) as f64 * self.nic_rx_per_byte_ns
    }

    pub fn nic_tx_latency(&self, size: usize) -> f64 {
        self.nic_tx_fixed_ns + size.saturating_sub(64) as f64 * self.nic_tx_per_byte_ns
    }

    /// Apply the configured jitter, if any, to a modeled latency.
    pub fn perturb<R: Rng + ?Sized>(&self, ns: f64, rng: &mut R) -> f64 {
        match &self.jitter {
            Some(j) => ns * j.multiplier(rng),
            None => ns,
        }
    }
}
