//! Discrete-event engine.
//!
//! Events are ordered by `(fire_at, seq)`; `seq` is the insertion counter, so
//! events scheduled for the same instant fire in the order they were queued.
//! The engine owns no model state: the caller's handler receives each event
//! together with `&mut Engine` and schedules follow-up events through it.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub fn ns(self) -> u64 {
        self.0
    }

    pub fn checked_add(self, delay: u64) -> Option<SimTime> {
        self.0.checked_add(delay).map(SimTime)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(u64);

#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: Endpoint,
    pub payload: P,
}

struct Queued<P>(SimEvent<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_at == other.0.fire_at && self.0.seq == other.0.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // BinaryHeap is a max-heap; reverse so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.fire_at, other.0.seq).cmp(&(self.0.fire_at, self.0.seq))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RunStats {
    pub events_processed: u64,
    pub messages_on_link: u64,
    pub one_way_traversals: u64,
    pub wall_clock_end: SimTime,
}

impl RunStats {
    /// Counter deltas from `earlier` to `self`.
    pub fn since(&self, earlier: &RunStats) -> RunStats {
        RunStats {
            events_processed: self.events_processed - earlier.events_processed,
            messages_on_link: self.messages_on_link - earlier.messages_on_link,
            one_way_traversals: self.one_way_traversals - earlier.one_way_traversals,
            wall_clock_end: self.wall_clock_end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOutcome {
    pub stats: RunStats,
    /// The run limit was reached while events were still queued.
    pub stalled: bool,
}

/// Running SHA-256 over trace lines, optionally keeping the lines themselves.
#[derive(Clone, Default)]
pub struct Tracer {
    hasher: Sha256,
    lines: Option<Vec<String>>,
    count: u64,
}

impl Tracer {
    pub fn keep_lines(&mut self, keep: bool) {
        self.lines = if keep { Some(Vec::new()) } else { None };
    }

    pub fn record(&mut self, line: &str) {
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if let Some(lines) = self.lines.as_mut() {
            lines.push(line.to_owned());
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn lines(&self) -> &[String] {
        self.lines.as_deref().unwrap_or(&[])
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

impl fmt::Debug for Tracer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tracer")
            .field("count", &self.count)
            .finish()
    }
}

pub struct Engine<P> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Queued<P>>,
    live: HashSet<u64>,
    stats: RunStats,
    finished: bool,
    tracer: Tracer,
}

impl<P> fmt::Debug for Engine<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("now", &self.now)
            .field("pending", &self.live.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            live: HashSet::new(),
            stats: RunStats::default(),
            finished: false,
            tracer: Tracer::default(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of queued events that have not been cancelled.
    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut RunStats {
        &mut self.stats
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn tracer_mut(&mut self) -> &mut Tracer {
        &mut self.tracer
    }

    pub fn schedule(&mut self, delay: u64, target: Endpoint, payload: P) -> Result<EventId> {
        if self.finished {
            return Err(Error::Finished);
        }
        let fire_at = self.now.checked_add(delay).ok_or(Error::TimeOverflow {
            now: self.now.0,
            delay,
        })?;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.live.insert(seq);
        self.queue.push(Queued(SimEvent {
            fire_at,
            seq,
            target,
            payload,
        }));
        Ok(EventId(seq))
    }

    /// Cancel a queued event. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.live.remove(&id.0)
    }

    /// Process events in `(fire_at, seq)` order until the queue drains or the
    /// next event lies beyond `limit`.
    pub fn run_until_quiescent<F>(&mut self, limit: SimTime, mut handler: F) -> Result<RunOutcome>
    where
        F: FnMut(&mut Self, SimEvent<P>) -> Result<()>,
    {
        if self.finished {
            return Err(Error::Finished);
        }
        let mut stalled = false;
        while let Some(head) = self.queue.peek() {
            if !self.live.contains(&head.0.seq) {
                self.queue.pop();
                continue;
            }
            if head.0.fire_at > limit {
                stalled = true;
                break;
            }
            let Queued(ev) = self.queue.pop().expect("peeked");
            self.live.remove(&ev.seq);
            debug_assert!(ev.fire_at >= self.now, "clock went backwards");
            self.now = ev.fire_at;
            self.stats.events_processed += 1;
            handler(self, ev)?;
        }
        self.stats.wall_clock_end = self.now;
        Ok(RunOutcome {
            stats: self.stats,
            stalled,
        })
    }

    /// Close the engine; further scheduling fails.
    pub fn finish(&mut self) -> RunStats {
        self.finished = true;
        self.stats.wall_clock_end = self.now;
        self.stats
    }
}

/// Seeded per-message noise, only consulted when jitter is enabled.
#[derive(Debug, Clone)]
pub struct Jitter {
    rng: ChaCha8Rng,
    max_ns: u64,
}

impl Jitter {
    pub fn new(seed: u64, max_ns: u64) -> Self {
        Jitter {
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_ns,
        }
    }

    pub fn sample(&mut self) -> u64 {
        if self.max_ns == 0 {
            0
        } else {
            self.rng.random_range(0..=self.max_ns)
        }
    }

    pub fn below(&mut self, bound: u64) -> u64 {
        if bound == 0 {
            0
        } else {
            self.rng.random_range(0..bound)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain(engine: &mut Engine<u32>) -> Vec<(u64, u32)> {
        let mut seen = Vec::new();
        engine
            .run_until_quiescent(SimTime::MAX, |e, ev| {
                seen.push((e.now().ns(), ev.payload));
                Ok(())
            })
            .unwrap();
        seen
    }

    #[test]
    fn delay_arithmetic() {
        let mut e = Engine::new();
        e.schedule(150, Endpoint(2), 7).unwrap();
        assert_eq!(drain(&mut e), vec![(150, 7)]);
    }

    #[test]
    fn same_instant_fires_in_insertion_order() {
        let mut e = Engine::new();
        for p in 0..5 {
            e.schedule(10, Endpoint(0), p).unwrap();
        }
        let order: Vec<u32> = drain(&mut e).into_iter().map(|(_, p)| p).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_delay_runs_after_current_event() {
        let mut e = Engine::new();
        e.schedule(900, Endpoint(0), 1).unwrap();
        e.schedule(900, Endpoint(0), 2).unwrap();
        let mut seen = Vec::new();
        e.run_until_quiescent(SimTime::MAX, |e, ev| {
            seen.push((e.now().ns(), ev.payload));
            if ev.payload == 1 {
                e.schedule(0, Endpoint(0), 3)?;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(900, 1), (900, 2), (900, 3)]);
    }

    #[test]
    fn empty_queue_is_immediately_quiescent() {
        let mut e: Engine<u32> = Engine::new();
        let out = e.run_until_quiescent(SimTime(1000), |_, _| Ok(())).unwrap();
        assert_eq!(out.stats.events_processed, 0);
        assert!(!out.stalled);
    }

    #[test]
    fn limit_with_pending_events_sets_stall_flag() {
        let mut e = Engine::new();
        e.schedule(10, Endpoint(0), 1).unwrap();
        e.schedule(5000, Endpoint(0), 2).unwrap();
        let out = e.run_until_quiescent(SimTime(100), |_, _| Ok(())).unwrap();
        assert!(out.stalled);
        assert_eq!(out.stats.events_processed, 1);
        assert_eq!(e.pending(), 1);
    }

    #[test]
    fn cancelled_events_never_fire() {
        let mut e = Engine::new();
        let a = e.schedule(10, Endpoint(0), 1).unwrap();
        e.schedule(20, Endpoint(0), 2).unwrap();
        assert!(e.cancel(a));
        assert!(!e.cancel(a));
        assert_eq!(drain(&mut e), vec![(20, 2)]);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut e = Engine::new();
        e.schedule(u64::MAX, Endpoint(0), 1).unwrap();
        e.run_until_quiescent(SimTime::MAX, |e, _| {
            assert!(matches!(
                e.schedule(1, Endpoint(0), 2),
                Err(Error::TimeOverflow { .. })
            ));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn finished_engine_rejects_work() {
        let mut e = Engine::new();
        e.finish();
        assert!(matches!(
            e.schedule(1, Endpoint(0), 1),
            Err(Error::Finished)
        ));
    }

    #[test]
    fn trace_hash_depends_on_content() {
        let mut a = Tracer::default();
        let mut b = Tracer::default();
        a.record("0,cpu0,dev,ReqShared,1,-");
        b.record("0,cpu0,dev,ReqShared,1,-");
        assert_eq!(a.hash_hex(), b.hash_hex());
        b.record("x");
        assert_ne!(a.hash_hex(), b.hash_hex());
    }
}
