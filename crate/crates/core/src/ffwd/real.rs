//! Two pinned threads exchanging messages through one cache-line cell per
//! direction. The sequence word is written last with release ordering and
//! read first with acquire ordering.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::stats::{percentiles, LatencySummary};

const WORDS: usize = 15;
const SPINS_BEFORE_YIELD: u32 = 256;

#[repr(C, align(128))]
struct Cell {
    seq: AtomicU64,
    payload: [AtomicU64; WORDS],
}

impl Cell {
    fn new() -> Self {
        Cell {
            seq: AtomicU64::new(0),
            payload: std::array::from_fn(|_| AtomicU64::new(0)),
        }
    }

    fn publish(&self, seq: u64, words: usize) {
        for (i, w) in self.payload.iter().take(words).enumerate() {
            w.store(pattern(seq, i), Ordering::Relaxed);
        }
        self.seq.store(seq, Ordering::Release);
    }

    /// Spin until the sequence word moves past `last`; returns the new value.
    fn wait_past(&self, last: u64) -> u64 {
        let mut spins = 0u32;
        loop {
            let s = self.seq.load(Ordering::Acquire);
            if s != last {
                return s;
            }
            spins += 1;
            if spins < SPINS_BEFORE_YIELD {
                std::hint::spin_loop();
            } else {
                spins = 0;
                thread::yield_now();
            }
        }
    }

    fn intact(&self, seq: u64, words: usize) -> bool {
        self.payload
            .iter()
            .take(words)
            .enumerate()
            .all(|(i, w)| w.load(Ordering::Relaxed) == pattern(seq, i))
    }
}

fn pattern(seq: u64, i: usize) -> u64 {
    seq.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FfRealConfig {
    pub iterations: u64,
    /// Payload bytes, at most one line minus the sequence word.
    pub payload: usize,
    /// Cores for the (initiator, responder) threads.
    pub pin: Option<(usize, usize)>,
}

impl Default for FfRealConfig {
    fn default() -> Self {
        FfRealConfig {
            iterations: 1_000_000,
            payload: 64,
            pin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfStats {
    pub messages: u64,
    pub lost: u64,
    pub out_of_order: u64,
    pub corrupted: u64,
    /// Half of each measured round trip, in ns.
    pub latency: LatencySummary,
    pub pinned: bool,
    pub warning: Option<String>,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counters {
    seen: u64,
    lost: u64,
    out_of_order: u64,
    corrupted: u64,
}

impl Counters {
    fn check(&mut self, expected: u64, got: u64, intact: bool) {
        self.seen += 1;
        if got > expected {
            self.lost += got - expected;
        } else if got < expected {
            self.out_of_order += 1;
        }
        if !intact {
            self.corrupted += 1;
        }
    }
}

/// Pin the calling thread to `core`.
pub fn pin_current(core: usize) -> bool {
    // SAFETY: cpu_set_t is a plain bitmask; zeroed is the empty set, and the
    // pointer passed to sched_setaffinity is valid for its size.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if core >= 8 * std::mem::size_of::<libc::cpu_set_t>() {
            return false;
        }
        libc::CPU_SET(core, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

pub fn available_cores() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn ff_bench_real(cfg: &FfRealConfig) -> Result<FfStats> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument(
            "iterations must be at least 1".into(),
        ));
    }
    let words = cfg.payload.div_ceil(8);
    if words > WORDS {
        return Err(Error::PayloadTooLarge {
            len: cfg.payload,
            max: WORDS * 8,
        });
    }
    let ping = Arc::new(Cell::new());
    let pong = Arc::new(Cell::new());
    let iterations = cfg.iterations;
    let responder_core = cfg.pin.map(|p| p.1);
    let responder = {
        let (ping, pong) = (Arc::clone(&ping), Arc::clone(&pong));
        thread::spawn(move || {
            let pinned = responder_core.is_none_or(pin_current);
            let mut c = Counters::default();
            let mut last = 0;
            for expected in 1..=iterations {
                let got = ping.wait_past(last);
                c.check(expected, got, ping.intact(got, words));
                last = got;
                pong.publish(got, words);
            }
            (c, pinned)
        })
    };
    let initiator_pinned = cfg.pin.is_none_or(|p| pin_current(p.0));
    let mut c = Counters::default();
    let mut half_rtts = Vec::with_capacity(iterations as usize);
    for seq in 1..=iterations {
        let t0 = Instant::now();
        ping.publish(seq, words);
        let got = pong.wait_past(seq - 1);
        let rtt = t0.elapsed().as_nanos() as u64;
        c.check(seq, got, pong.intact(got, words));
        half_rtts.push(rtt / 2);
    }
    let (rc, responder_pinned) = responder
        .join()
        .map_err(|_| Error::protocol("responder thread panicked"))?;
    let pinned = cfg.pin.is_some() && initiator_pinned && responder_pinned;
    let warning = match cfg.pin {
        Some(_) if !pinned => Some("could not pin threads; ran unpinned".to_string()),
        None => Some("threads not pinned".to_string()),
        _ => None,
    };
    Ok(FfStats {
        messages: rc.seen,
        lost: c.lost + rc.lost,
        out_of_order: c.out_of_order + rc.out_of_order,
        corrupted: c.corrupted + rc.corrupted,
        latency: percentiles(&half_rtts)?,
        pinned,
        warning,
    })
}
