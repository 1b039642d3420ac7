#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcieParams {
    pub read_rtt_ns: f64,
    /// Bytes returned by one non-posted read.
    pub read_width: usize,
    pub write_combine: usize,
    /// Bytes per ns once posted writes are streaming.
    pub write_stream_rate: f64,
    pub write_fixed_ns: f64,
}

impl Default for PcieParams {
    fn default() -> Self {
        PcieParams {
            read_rtt_ns: 750.0,
            read_width: 16,
            write_combine: 64,
            write_stream_rate: 1.0,
            write_fixed_ns: 280.0,
        }
    }
}

impl PcieParams {
    /// Reads are serialized: one bus round trip per `read_width` bytes.
    pub fn pio_read_latency(&self, size: usize) -> f64 {
        size.div_ceil(self.read_width) as f64 * self.read_rtt_ns
    }

    /// Posted writes pipeline behind a fixed doorbell cost.
    pub fn pio_write_latency(&self, size: usize) -> f64 {
        self.write_fixed_ns + size as f64 / self.write_stream_rate
    }

    /// Write the request, then read the response back.
    pub fn pio_invoke_latency(&self, size: usize) -> f64 {
        self.pio_write_latency(size) + self.pio_read_latency(size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_model_points() {
        let p = PcieParams::default();
        assert_eq!(p.pio_read_latency(0), 0.0);
        assert_eq!(p.pio_read_latency(16), 750.0);
        assert_eq!(p.pio_read_latency(17), 1500.0);
        assert_eq!(p.pio_read_latency(9600), 450_000.0);
    }

    #[test]
    fn write_model_points() {
        let p = PcieParams::default();
        assert_eq!(p.pio_write_latency(0), 280.0);
        assert_eq!(p.pio_write_latency(64), 344.0);
        assert_eq!(p.pio_write_latency(9600), 9880.0);
    }
}
