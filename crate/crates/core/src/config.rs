//! Flat `key = value` configuration with calibrated defaults.
//!
//! Precedence is defaults, then the TOML file (nested tables flatten to
//! dotted keys), then command-line overrides in order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::baselines::{DmaJitter, DmaParams, PcieParams};
use crate::device::TimeoutGuard;
use crate::error::{Error, Result};
use crate::machine::SimParams;
use crate::workloads::{BloomParams, OffloadParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn k(key: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec {
        key,
        kind,
        default,
        doc,
    }
}

use Kind::{Bool, Float, Int};

#[rustfmt::skip]
pub const KEYS: &[KeySpec] = &[
    k("seed", Int, "0", "seed for every random stream"),
    k("sim.jitter", Bool, "false", "per-message link noise"),
    k("sim.check_swmr", Bool, "false", "check single-writer/multi-reader on every delivery"),
    k("sim.run_limit_ns", Int, "60000000000", "simulated time budget per operation"),
    k("link.one_way_ns", Int, "150", "one-way cross-socket link latency"),
    k("link.jitter_ns", Int, "10", "maximum link noise when jitter is on"),
    k("link.reorder", Bool, "false", "random delivery order across lines"),
    k("link.reorder_window", Int, "4", "reordering window in slots"),
    k("link.reorder_slot_ns", Int, "20", "width of one reordering slot"),
    k("line.size", Int, "128", "cache-line size in bytes"),
    k("dir.proc_ns", Int, "150", "directory processing per transaction"),
    k("dir.tad_count", Int, "64", "transaction units in the home"),
    k("dir.tad_capacity", Int, "16", "concurrent transactions per unit"),
    k("cpu.l1_capacity_bytes", Int, "32768", "L1 size used as the eviction threshold"),
    k("cpu.timeout_ns", Int, "100000000", "outstanding-request timeout (machine check)"),
    k("cpu.poll_interval_ns", Int, "0", "back-off before re-polling an invalidated line"),
    k("dev.exclusive_return", Bool, "true", "answer shared requests with exclusive grants"),
    k("dev.shared_return_penalty_ns", Int, "700", "extra latency of the shared-return path"),
    k("dev.per_line_pipeline_ns", Int, "51", "issue interval between pipelined line requests"),
    k("dev.thrash_factor", Float, "1.3", "issue-interval multiplier once the L1 thrashes"),
    k("dev.retry_margin", Float, "0.9", "fraction of the timeout after which a held request is retried"),
    k("nic.overflow_lines", Int, "75", "overflow lines per bank"),
    k("nic.rx_fixed_ns", Int, "300", "device staging cost for a received frame"),
    k("nic.per_line_rx_ns", Int, "519", "staging cost per additional received line"),
    k("nic.tx_fixed_ns", Int, "460", "egress cost for a transmitted frame"),
    k("nic.per_line_tx_ns", Int, "60", "egress cost per additional transmitted line"),
    k("nic.arrival_delay_ns", Int, "10000", "time between the CPU waiting and a frame arriving"),
    k("pcie.read_rtt_ns", Float, "750", "non-posted read round trip"),
    k("pcie.read_width", Int, "16", "bytes per non-posted read"),
    k("pcie.write_combine", Int, "64", "write-combining buffer size"),
    k("pcie.write_stream_rate", Float, "1.0", "posted-write throughput in bytes per ns"),
    k("pcie.write_fixed_ns", Float, "280", "fixed cost of a posted write burst"),
    k("dma.desc_overhead_ns", Float, "10000", "descriptor handling per transfer unit"),
    k("dma.per_byte_ns", Float, "0.1", "DMA cost per byte"),
    k("dma.irq_extra_ns", Float, "2000", "interrupt delivery cost"),
    k("dma.max_tlp", Int, "4096", "largest single transfer unit"),
    k("dma.nic_rx_fixed_ns", Float, "65390", "NIC receive latency at 64 B"),
    k("dma.nic_tx_fixed_ns", Float, "10060", "NIC transmit latency at 64 B"),
    k("dma.nic_rx_per_byte_ns", Float, "0.05", "NIC receive cost per byte beyond 64 B"),
    k("dma.nic_tx_per_byte_ns", Float, "0.595", "NIC transmit cost per byte beyond 64 B"),
    k("dma.jitter", Bool, "false", "heavy-tailed DMA noise"),
    k("dma.jitter_body_sigma", Float, "0.01", "lognormal sigma of the common case"),
    k("dma.jitter_tail_prob", Float, "0.01", "probability of a tail event"),
    k("dma.jitter_tail_median", Float, "1.6", "median multiplier of a tail event"),
    k("dma.jitter_tail_sigma", Float, "0.15", "lognormal sigma of a tail event"),
    k("bloom.k", Int, "8", "hash lanes"),
    k("bloom.element_size", Int, "128", "element size in bytes"),
    k("bloom.cpu_per_element_ns", Float, "2600", "CPU hashing cost per element"),
    k("bloom.dev_per_element_ns", Float, "1700", "device hashing cost per element"),
    k("offload.stream_fixed_ns", Float, "25000", "fixed input streaming overhead per batch"),
    k("offload.filters", Int, "31", "operators in the filter chain"),
    k("offload.filter_cpu_ns", Float, "1000", "fixed CPU cost per filter per batch"),
    k("offload.filter_cpu_per_word_ns", Float, "3", "CPU cost per filter per 8-byte word"),
    k("ffwd.poll_interval_ns", Int, "0", "receiver back-off after losing the line"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS
                .iter()
                .map(|s| (s.key, s.default.to_string()))
                .collect(),
        }
    }
}

fn check(spec: &KeySpec, value: &str) -> Result<()> {
    let ok = match spec.kind {
        Int => value.parse::<u64>().is_ok(),
        Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Bool => matches!(value, "true" | "false"),
    };
    if ok {
        Ok(())
    } else {
        let want = match spec.kind {
            Int => "a non-negative integer",
            Float => "a number",
            Bool => "true or false",
        };
        Err(Error::config(
            spec.key,
            format!("expected {want}, got {value:?}"),
        ))
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec(key).ok_or_else(|| Error::config(key, "unknown key"))?;
        let value = value.trim();
        check(spec, value)?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "override must be key=value"))?;
        self.set(key.trim(), value)
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (key, value) in flat {
            let value = match value {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => return Err(Error::config(key, format!("unsupported value {other}"))),
            };
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            cfg.merge_toml(&text)?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("no configuration key {key}"))
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated integer")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.u64(key) as usize
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated number")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    pub fn sim_params(&self) -> SimParams {
        let mut p = SimParams::default();
        let line = self.usize("line.size");
        let one_way = self.u64("link.one_way_ns");
        let proc_ns = self.u64("dir.proc_ns");
        let pipeline = self.u64("dev.per_line_pipeline_ns");
        let timeout = self.u64("cpu.timeout_ns");
        p.seed = self.seed();
        p.one_way_ns = one_way;
        p.jitter = self.bool("sim.jitter");
        p.link_jitter_ns = self.u64("link.jitter_ns");
        p.reorder = self.bool("link.reorder");
        p.reorder_window = self.u64("link.reorder_window");
        p.reorder_slot_ns = self.u64("link.reorder_slot_ns");
        p.check_swmr = self.bool("sim.check_swmr");
        p.run_limit_ns = self.u64("sim.run_limit_ns");
        p.dir.proc_ns = proc_ns;
        // the upgrade round trip itself accounts for part of the penalty
        p.dir.upgrade_extra_ns = self
            .u64("dev.shared_return_penalty_ns")
            .saturating_sub(2 * one_way + proc_ns);
        p.dir.tad_count = self.u64("dir.tad_count").clamp(1, u64::from(u16::MAX)) as u16;
        p.dir.tad_capacity = self.usize("dir.tad_capacity");
        p.dir.line_size = line;
        p.cpu.line_size = line;
        p.cpu.l1_capacity_bytes = self.u64("cpu.l1_capacity_bytes");
        p.cpu.issue_interval_ns = pipeline;
        p.cpu.thrash_interval_ns = (pipeline as f64 * self.f64("dev.thrash_factor")).round() as u64;
        p.cpu.timeout_ns = timeout;
        p.cpu.poll_interval_ns = self.u64("cpu.poll_interval_ns");
        p.device.exclusive_return = self.bool("dev.exclusive_return");
        p.device.retry_after_ns = TimeoutGuard {
            timeout_ns: timeout,
            retry_margin: self.f64("dev.retry_margin"),
        }
        .retry_after_ns();
        p.device.nic.rx_fixed_ns = self.u64("nic.rx_fixed_ns");
        p.device.nic.per_line_rx_ns = self.u64("nic.per_line_rx_ns");
        p.device.nic.tx_fixed_ns = self.u64("nic.tx_fixed_ns");
        p.device.nic.per_line_tx_ns = self.u64("nic.per_line_tx_ns");
        p.nic_overflow_lines = self.usize("nic.overflow_lines");
        p
    }

    pub fn pcie(&self) -> PcieParams {
        PcieParams {
            read_rtt_ns: self.f64("pcie.read_rtt_ns"),
            read_width: self.usize("pcie.read_width").max(1),
            write_combine: self.usize("pcie.write_combine"),
            write_stream_rate: self.f64("pcie.write_stream_rate"),
            write_fixed_ns: self.f64("pcie.write_fixed_ns"),
        }
    }

    pub fn dma(&self) -> DmaParams {
        DmaParams {
            desc_overhead_ns: self.f64("dma.desc_overhead_ns"),
            per_byte_ns: self.f64("dma.per_byte_ns"),
            irq_extra_ns: self.f64("dma.irq_extra_ns"),
            max_tlp: self.usize("dma.max_tlp").max(1),
            nic_rx_fixed_ns: self.f64("dma.nic_rx_fixed_ns"),
            nic_tx_fixed_ns: self.f64("dma.nic_tx_fixed_ns"),
            nic_rx_per_byte_ns: self.f64("dma.nic_rx_per_byte_ns"),
            nic_tx_per_byte_ns: self.f64("dma.nic_tx_per_byte_ns"),
            jitter: self.bool("dma.jitter").then(|| DmaJitter {
                body_sigma: self.f64("dma.jitter_body_sigma"),
                tail_prob: self.f64("dma.jitter_tail_prob"),
                tail_median: self.f64("dma.jitter_tail_median"),
                tail_sigma: self.f64("dma.jitter_tail_sigma"),
            }),
        }
    }

    pub fn bloom(&self) -> BloomParams {
        BloomParams {
            k: self.usize("bloom.k"),
            element_size: self.usize("bloom.element_size"),
            cpu_per_element_ns: self.f64("bloom.cpu_per_element_ns"),
            dev_per_element_ns: self.f64("bloom.dev_per_element_ns"),
        }
    }

    pub fn offload(&self) -> OffloadParams {
        OffloadParams {
            stream_fixed_ns: self.f64("offload.stream_fixed_ns"),
            filters: self.usize("offload.filters"),
            filter_cpu_ns: self.f64("offload.filter_cpu_ns"),
            filter_cpu_per_word_ns: self.f64("offload.filter_cpu_per_word_ns"),
        }
    }

    pub fn nic_arrival_delay_ns(&self) -> u64 {
        self.u64("nic.arrival_delay_ns")
    }
}

fn flatten<'a>(prefix: &str, table: &'a toml::Table, out: &mut Vec<(String, &'a toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other)),
        }
    }
}
