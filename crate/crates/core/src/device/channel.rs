use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::coherence::{Grant, LineAddr, LineData, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Bidirectional,
    WriteToDevice,
    ReadFromDevice,
}

/// Two device-homed lines that alternate roles. With `parity == 0` the CPU
/// loads `line_a` and the device recalls `line_b`; the roles swap each epoch.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LinePairChannel {
    pub line_a: LineAddr,
    pub line_b: LineAddr,
    pub parity: u8,
    pub variant: Variant,
    pub epoch: u64,
}

impl LinePairChannel {
    /// The line the CPU loads this epoch.
    pub fn request_line(&self) -> LineAddr {
        if self.parity == 0 {
            self.line_a
        } else {
            self.line_b
        }
    }

    /// The line the CPU has written this epoch (recalled by the device).
    pub fn data_line(&self) -> LineAddr {
        if self.parity == 0 {
            self.line_b
        } else {
            self.line_a
        }
    }

    fn flip(&mut self) {
        self.parity ^= 1;
        self.epoch += 1;
    }
}

/// Two groups of `n` lines used by multi-line invocations. Group 0 starts out
/// writable at the CPU; group 1 starts out invalid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiLineGroup {
    pub group0: Vec<LineAddr>,
    pub group1: Vec<LineAddr>,
    pub n: usize,
    pub received_count: [usize; 2],
}

impl MultiLineGroup {
    pub fn request_lines(&self, parity: u8) -> &[LineAddr] {
        if parity == 0 {
            &self.group1
        } else {
            &self.group0
        }
    }

    pub fn data_lines(&self, parity: u8) -> &[LineAddr] {
        if parity == 0 {
            &self.group0
        } else {
            &self.group1
        }
    }
}

/// Extra lines carrying frame data next to a control pair. The two banks
/// alternate so the device can reclaim one while the CPU reads the other.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OverflowSet {
    pub overflow: Vec<LineAddr>,
    pub alternate: Vec<LineAddr>,
}

impl OverflowSet {
    pub fn bank(&self, parity: u8) -> &[LineAddr] {
        if parity == 0 {
            &self.overflow
        } else {
            &self.alternate
        }
    }

    pub fn len(&self) -> usize {
        self.overflow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.overflow.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeoutGuard {
    pub timeout_ns: u64,
    pub retry_margin: f64,
}

impl TimeoutGuard {
    /// Delay after arrival at which a deferred request is answered with RetryLater.
    pub fn retry_after_ns(&self) -> u64 {
        (self.timeout_ns as f64 * self.retry_margin).floor() as u64
    }
}

type Handler = dyn Fn(&[u8]) -> Vec<u8> + Send + Sync;

/// The device-side function applied to each request.
#[derive(Clone)]
pub struct ComputeFunction {
    name: String,
    handler: Arc<Handler>,
    pub fixed_ns: u64,
    pub per_byte_ns: f64,
}

impl ComputeFunction {
    pub fn new(
        name: impl Into<String>,
        handler: impl Fn(&[u8]) -> Vec<u8> + Send + Sync + 'static,
    ) -> Self {
        ComputeFunction {
            name: name.into(),
            handler: Arc::new(handler),
            fixed_ns: 0,
            per_byte_ns: 0.0,
        }
    }

    pub fn echo() -> Self {
        ComputeFunction::new("echo", |b| b.to_vec())
    }

    pub fn with_latency(mut self, fixed_ns: u64, per_byte_ns: f64) -> Self {
        self.fixed_ns = fixed_ns;
        self.per_byte_ns = per_byte_ns;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn apply(&self, request: &[u8]) -> Vec<u8> {
        (self.handler)(request)
    }

    pub fn latency_ns(&self, len: usize) -> u64 {
        self.fixed_ns + (self.per_byte_ns * len as f64).round() as u64
    }
}

impl fmt::Debug for ComputeFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComputeFunction")
            .field("name", &self.name)
            .field("fixed_ns", &self.fixed_ns)
            .field("per_byte_ns", &self.per_byte_ns)
            .finish()
    }
}

impl PartialEq for ComputeFunction {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.fixed_ns == other.fixed_ns
            && self.per_byte_ns.to_bits() == other.per_byte_ns.to_bits()
    }
}

impl Eq for ComputeFunction {}

impl Hash for ComputeFunction {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.name.hash(state);
        self.fixed_ns.hash(state);
        self.per_byte_ns.to_bits().hash(state);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeferReason {
    AwaitingData,
    Computing,
    NoFrame,
    Staging,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DeviceAction {
    RespondNow { data: LineData, grant: Grant },
    Defer(DeferReason),
    PullLine { line: LineAddr, want: Grant },
    RetryLater,
}

/// Per-epoch progress of a channel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct EpochState {
    /// Request-role lines whose load is being held, by line index.
    pub deferred: BTreeMap<u64, TxnId>,
    pub pulls: BTreeSet<u64>,
    pub pulls_pending: usize,
    pub received: BTreeMap<u64, LineData>,
    pub busy: bool,
    pub started: bool,
    /// Response contents by request-line index, once available.
    pub response: Option<BTreeMap<u64, LineData>>,
    pub responded: BTreeSet<u64>,
    /// Lines that must be answered before the epoch closes.
    pub expected: usize,
    pub frame: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Channel {
    pub id: usize,
    pub pair: LinePairChannel,
    pub group: Option<MultiLineGroup>,
    pub overflow: Option<OverflowSet>,
    pub compute: ComputeFunction,
    pub request_len: usize,
    pub last_response_len: usize,
    pub epoch: EpochState,
    /// Frames that have arrived at the device and wait for delivery.
    pub frames: VecDeque<Vec<u8>>,
    /// Frames scheduled to arrive (released by a frame-arrival event).
    pub incoming: VecDeque<Vec<u8>>,
    pub transmitted: Vec<Vec<u8>>,
    pub hazard: bool,
}

impl Channel {
    pub fn variant(&self) -> Variant {
        self.pair.variant
    }

    pub fn n(&self) -> usize {
        self.group.as_ref().map_or(1, |g| g.n)
    }

    pub fn request_lines(&self) -> Vec<LineAddr> {
        match &self.group {
            Some(g) => g.request_lines(self.pair.parity).to_vec(),
            None => vec![self.pair.request_line()],
        }
    }

    pub fn data_lines(&self) -> Vec<LineAddr> {
        match &self.group {
            Some(g) => g.data_lines(self.pair.parity).to_vec(),
            None => vec![self.pair.data_line()],
        }
    }

    /// Overflow bank used this epoch.
    pub fn bank(&self) -> &[LineAddr] {
        self.overflow
            .as_ref()
            .map_or(&[], |o| o.bank(self.pair.parity))
    }

    /// Overflow bank used by the previous epoch.
    pub fn previous_bank(&self) -> &[LineAddr] {
        self.overflow
            .as_ref()
            .map_or(&[], |o| o.bank(self.pair.parity ^ 1))
    }

    pub fn all_lines(&self) -> Vec<LineAddr> {
        let mut v = vec![self.pair.line_a, self.pair.line_b];
        if let Some(g) = &self.group {
            v = g.group0.iter().chain(&g.group1).copied().collect();
        }
        if let Some(o) = &self.overflow {
            v.extend(o.overflow.iter().chain(&o.alternate));
        }
        v
    }

    pub(crate) fn close_epoch(&mut self) {
        self.pair.flip();
        if let Some(g) = self.group.as_mut() {
            g.received_count = [0, 0];
        }
        self.epoch = EpochState::default();
    }
}

/// Bytes a frame occupies in the control line header.
pub const FRAME_HEADER: usize = 8;

/// Number of overflow lines a frame of `len` bytes needs; zero when it fits in
/// the control line after the header.
pub fn frame_lines(len: usize, line_size: usize) -> usize {
    if len <= line_size - FRAME_HEADER {
        0
    } else {
        len.div_ceil(line_size)
    }
}
