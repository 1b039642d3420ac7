//! CPU node: one coherent cache (the point of coherence), a coalescing write
//! buffer, and a core that executes a list of memory operations.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::coherence::types::{
    CacheLineState, CoherenceMessage, Effect, Effects, Envelope, Grant, LineAddr, LineData,
    LocalEvent, MsgKind, NodeId, TimerKey, TxnId,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PendingStore {
    pub line: LineAddr,
    pub patches: Vec<(usize, Vec<u8>)>,
}

/// LRU occupancy of the small first-level cache. Only used to notice when
/// freshly written lines are pushed out before they reach the device.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct L1Tracker {
    capacity_lines: usize,
    tick: u64,
    by_line: BTreeMap<u64, u64>,
    by_tick: BTreeMap<u64, u64>,
}

impl L1Tracker {
    fn new(capacity_lines: usize) -> Self {
        L1Tracker {
            capacity_lines: capacity_lines.max(1),
            tick: 0,
            by_line: BTreeMap::new(),
            by_tick: BTreeMap::new(),
        }
    }

    fn touch(&mut self, index: u64) -> Option<u64> {
        if let Some(t) = self.by_line.remove(&index) {
            self.by_tick.remove(&t);
        }
        self.tick += 1;
        self.by_line.insert(index, self.tick);
        self.by_tick.insert(self.tick, index);
        if self.by_line.len() > self.capacity_lines {
            let (_, victim) = self.by_tick.pop_first().expect("non-empty");
            self.by_line.remove(&victim);
            return Some(victim);
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CpuCacheModel {
    pub lines: BTreeMap<LineAddr, (CacheLineState, LineData)>,
    pub write_buffer: Vec<PendingStore>,
    pub capacity_bytes: u64,
    pub evictions: u64,
    line_size: usize,
    l1: L1Tracker,
}

impl CpuCacheModel {
    pub fn new(line_size: usize, capacity_bytes: u64) -> Self {
        CpuCacheModel {
            lines: BTreeMap::new(),
            write_buffer: Vec::new(),
            capacity_bytes,
            evictions: 0,
            line_size,
            l1: L1Tracker::new((capacity_bytes / line_size as u64) as usize),
        }
    }

    pub fn line_size(&self) -> usize {
        self.line_size
    }

    pub fn state(&self, line: &LineAddr) -> CacheLineState {
        self.lines
            .get(line)
            .map_or(CacheLineState::Invalid, |(s, _)| *s)
    }

    pub fn data(&self, line: &LineAddr) -> Option<&LineData> {
        self.lines
            .get(line)
            .filter(|(s, _)| s.is_valid())
            .map(|(_, d)| d)
    }

    pub fn install(&mut self, line: LineAddr, state: CacheLineState, data: LineData) {
        if state.is_valid() {
            self.lines.insert(line, (state, data));
        } else {
            self.lines.remove(&line);
        }
    }

    fn set_state(&mut self, line: &LineAddr, state: CacheLineState) {
        if state.is_valid() {
            if let Some(entry) = self.lines.get_mut(line) {
                entry.0 = state;
            }
        } else {
            self.lines.remove(line);
        }
    }

    fn buffer(&mut self, line: LineAddr, offset: usize, bytes: Vec<u8>) {
        if let Some(p) = self.write_buffer.iter_mut().find(|p| p.line == line) {
            p.patches.push((offset, bytes));
        } else {
            self.write_buffer.push(PendingStore {
                line,
                patches: vec![(offset, bytes)],
            });
        }
    }

    fn buffered(&self, line: &LineAddr) -> bool {
        self.write_buffer.iter().any(|p| p.line == *line)
    }

    /// Apply buffered stores if the line is now writable. Returns true if
    /// the buffer still holds stores for the line.
    fn try_drain(&mut self, line: &LineAddr) -> bool {
        let Some(pos) = self.write_buffer.iter().position(|p| p.line == *line) else {
            return false;
        };
        if !self.state(line).is_writable() {
            return true;
        }
        let pending = self.write_buffer.remove(pos);
        let entry = self.lines.get_mut(line).expect("writable line present");
        for (offset, bytes) in pending.patches {
            entry.1.write(offset, &bytes);
        }
        // Silent upgrade: no interconnect message.
        entry.0 = CacheLineState::Modified;
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CpuOp {
    Store {
        line: LineAddr,
        offset: usize,
        bytes: Vec<u8>,
    },
    Barrier,
    Load {
        line: LineAddr,
    },
    Prefetch {
        line: LineAddr,
        want: Grant,
    },
    /// Block until every line is readable, requesting any that are not.
    AwaitLines {
        lines: Vec<LineAddr>,
    },
    /// Block until every line is writable.
    Own {
        lines: Vec<LineAddr>,
    },
    Flush {
        line: LineAddr,
    },
    /// Report completion of a program point to the driver.
    Mark(u32),
    /// Start a new transfer epoch (resets L1 thrash tracking).
    BeginEpoch,
    Delay(u64),
    /// Spin on `line` until its sequence word reaches `at_least`.
    Poll {
        line: LineAddr,
        at_least: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Blocked {
    Barrier,
    Lines(Vec<LineAddr>),
    Own(Vec<LineAddr>),
    Delay,
    Poll { line: LineAddr, at_least: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CpuParams {
    pub line_size: usize,
    pub l1_capacity_bytes: u64,
    pub issue_interval_ns: u64,
    pub thrash_interval_ns: u64,
    pub timeout_ns: u64,
    pub poll_interval_ns: u64,
    /// Dirty lines become Owned rather than Shared when downgraded.
    pub owned_on_downgrade: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CpuNode {
    pub id: NodeId,
    pub cache: CpuCacheModel,
    pub params: CpuParams,
    program: VecDeque<CpuOp>,
    blocked: Option<Blocked>,
    outstanding: BTreeMap<LineAddr, MsgKind>,
    next_issue_at: u64,
    recent_stores: BTreeSet<u64>,
    thrashing: bool,
    pub retries_seen: u64,
}

impl CpuNode {
    pub fn new(id: NodeId, params: CpuParams) -> Self {
        CpuNode {
            id,
            cache: CpuCacheModel::new(params.line_size, params.l1_capacity_bytes),
            params,
            program: VecDeque::new(),
            blocked: None,
            outstanding: BTreeMap::new(),
            next_issue_at: 0,
            recent_stores: BTreeSet::new(),
            thrashing: false,
            retries_seen: 0,
        }
    }

    pub fn load_program(&mut self, ops: impl IntoIterator<Item = CpuOp>) {
        self.program.extend(ops);
    }

    pub fn is_done(&self) -> bool {
        self.program.is_empty() && self.blocked.is_none()
    }

    pub fn is_idle(&self) -> bool {
        self.is_done() && self.outstanding.is_empty() && self.cache.write_buffer.is_empty()
    }

    pub fn outstanding(&self, line: &LineAddr) -> Option<MsgKind> {
        self.outstanding.get(line).copied()
    }

    pub fn thrashing(&self) -> bool {
        self.thrashing
    }

    /// Run the program until it blocks or ends.
    pub fn step(&mut self, now: u64, fx: &mut Effects) {
        loop {
            if self.blocked.is_some() && !self.try_unblock(now, fx) {
                return;
            }
            let Some(op) = self.program.pop_front() else {
                return;
            };
            self.exec(now, op, fx);
        }
    }

    fn exec(&mut self, now: u64, op: CpuOp, fx: &mut Effects) {
        match op {
            CpuOp::Store {
                line,
                offset,
                bytes,
            } => {
                self.touch(line.index);
                self.recent_stores.insert(line.index);
                self.cache.buffer(line, offset, bytes);
                if self.cache.try_drain(&line) && !self.outstanding.contains_key(&line) {
                    self.issue_ownership(now, line, fx);
                }
            }
            CpuOp::Barrier => {
                if !self.cache.write_buffer.is_empty() {
                    self.blocked = Some(Blocked::Barrier);
                }
            }
            CpuOp::Load { line } => {
                self.touch(line.index);
                self.blocked = Some(Blocked::Lines(vec![line]));
            }
            CpuOp::Prefetch { line, want } => {
                let state = self.cache.state(&line);
                let satisfied = match want {
                    Grant::Shared => state.is_valid(),
                    Grant::Exclusive => state.is_writable(),
                };
                if !satisfied && !self.outstanding.contains_key(&line) {
                    match want {
                        Grant::Shared => self.issue(now, MsgKind::ReqShared, line, fx),
                        Grant::Exclusive => self.issue_ownership(now, line, fx),
                    }
                }
            }
            CpuOp::AwaitLines { lines } => {
                for l in &lines {
                    self.touch(l.index);
                }
                self.blocked = Some(Blocked::Lines(lines));
            }
            CpuOp::Own { lines } => {
                self.blocked = Some(Blocked::Own(lines));
            }
            CpuOp::Flush { line } => {
                let state = self.cache.state(&line);
                if state.is_valid()
                    && !self.outstanding.contains_key(&line)
                    && !self.cache.buffered(&line)
                {
                    let data = self.cache.data(&line).cloned().expect("valid line");
                    self.cache.set_state(&line, CacheLineState::Invalid);
                    let msg =
                        CoherenceMessage::new(MsgKind::WriteBack, line, TxnId(0)).with_data(data);
                    self.send_request(now, msg, fx);
                }
            }
            CpuOp::Mark(tag) => fx.push(Effect::Completed { node: self.id, tag }),
            CpuOp::BeginEpoch => {
                self.recent_stores.clear();
                self.thrashing = false;
            }
            CpuOp::Delay(ns) => {
                self.blocked = Some(Blocked::Delay);
                fx.push(Effect::Local {
                    node: self.id,
                    ev: LocalEvent::Wake,
                    delay: ns,
                });
            }
            CpuOp::Poll { line, at_least } => {
                self.touch(line.index);
                if !self.cache.state(&line).is_valid() && !self.outstanding.contains_key(&line) {
                    self.issue(now, MsgKind::ReqShared, line, fx);
                }
                self.blocked = Some(Blocked::Poll { line, at_least });
            }
        }
    }

    fn try_unblock(&mut self, now: u64, fx: &mut Effects) -> bool {
        let done = match self.blocked.clone() {
            None => true,
            Some(Blocked::Barrier) => self.cache.write_buffer.is_empty(),
            Some(Blocked::Lines(lines)) => {
                let mut all = true;
                for line in lines {
                    if !self.cache.state(&line).is_valid() {
                        all = false;
                        if !self.outstanding.contains_key(&line) {
                            self.issue(now, MsgKind::ReqShared, line, fx);
                        }
                    }
                }
                all
            }
            Some(Blocked::Own(lines)) => {
                let mut all = true;
                for line in lines {
                    if !self.cache.state(&line).is_writable() {
                        all = false;
                        if !self.outstanding.contains_key(&line) {
                            self.issue_ownership(now, line, fx);
                        }
                    }
                }
                all
            }
            Some(Blocked::Delay) => false,
            Some(Blocked::Poll { line, at_least }) => {
                self.cache.data(&line).is_some_and(|d| d.seq() >= at_least)
            }
        };
        if done {
            self.blocked = None;
        }
        done
    }

    fn touch(&mut self, index: u64) {
        if let Some(victim) = self.cache.l1.touch(index) {
            self.cache.evictions += 1;
            if self.recent_stores.contains(&victim) {
                self.thrashing = true;
            }
        }
    }

    fn issue_ownership(&mut self, now: u64, line: LineAddr, fx: &mut Effects) {
        let kind = if self.cache.state(&line).is_valid() {
            MsgKind::ReqUpgrade
        } else {
            MsgKind::ReqExclusive
        };
        self.issue(now, kind, line, fx);
    }

    fn issue(&mut self, now: u64, kind: MsgKind, line: LineAddr, fx: &mut Effects) {
        self.send_request(now, CoherenceMessage::new(kind, line, TxnId(0)), fx);
    }

    fn send_request(&mut self, now: u64, msg: CoherenceMessage, fx: &mut Effects) {
        let at = now.max(self.next_issue_at);
        let interval = if self.thrashing {
            self.params.thrash_interval_ns
        } else {
            self.params.issue_interval_ns
        };
        self.next_issue_at = at + interval;
        let line = msg.line;
        self.outstanding.insert(line, msg.kind);
        fx.push(Effect::Send {
            env: Envelope {
                src: self.id,
                dst: line.home,
                msg,
            },
            delay: at - now,
        });
        fx.push(Effect::Arm {
            key: TimerKey::MachineCheck {
                node: self.id,
                line: line.index,
            },
            node: self.id,
            delay: at - now + self.params.timeout_ns,
        });
    }

    fn reply(&self, src: NodeId, msg: CoherenceMessage, fx: &mut Effects) {
        fx.push(Effect::Send {
            env: Envelope {
                src: self.id,
                dst: src,
                msg,
            },
            delay: 0,
        });
    }

    fn settle(&mut self, line: LineAddr, fx: &mut Effects) {
        self.outstanding.remove(&line);
        fx.push(Effect::Disarm(TimerKey::MachineCheck {
            node: self.id,
            line: line.index,
        }));
    }

    pub fn on_message(&mut self, now: u64, env: Envelope, fx: &mut Effects) -> Result<()> {
        let msg = env.msg;
        let line = msg.line;
        match msg.kind {
            MsgKind::RespData => {
                let (Some(grant), Some(data)) = (msg.granted_state, msg.data) else {
                    return Err(Error::protocol("RespData without data or grant"));
                };
                if self.outstanding(&line).is_none() {
                    return Err(Error::protocol(format!(
                        "{} got RespData for line {} with nothing outstanding",
                        self.id, line.index
                    )));
                }
                self.cache.install(line, grant.into(), data);
                self.settle(line, fx);
                self.after_fill(now, line, fx);
            }
            MsgKind::RespAck => match self.outstanding(&line) {
                Some(MsgKind::WriteBack) => self.settle(line, fx),
                Some(MsgKind::ReqUpgrade) => {
                    let state = self.cache.state(&line);
                    if !matches!(state, CacheLineState::Shared | CacheLineState::Owned) {
                        return Err(Error::protocol(format!(
                            "{} got upgrade ack for line {} in state {:?}",
                            self.id, line.index, state
                        )));
                    }
                    self.cache.set_state(&line, CacheLineState::Exclusive);
                    self.settle(line, fx);
                    self.after_fill(now, line, fx);
                }
                other => {
                    return Err(Error::protocol(format!(
                        "{} got RespAck for line {} while outstanding={other:?}",
                        self.id, line.index
                    )))
                }
            },
            MsgKind::RetryLater => {
                let Some(kind) = self.outstanding(&line) else {
                    return Err(Error::protocol("RetryLater with nothing outstanding"));
                };
                self.settle(line, fx);
                self.retries_seen += 1;
                match kind {
                    MsgKind::ReqUpgrade | MsgKind::ReqExclusive => {
                        self.issue_ownership(now, line, fx)
                    }
                    other => self.issue(now, other, line, fx),
                }
            }
            MsgKind::InvalidateToInvalid => {
                let state = self.cache.state(&line);
                let reply = CoherenceMessage::new(MsgKind::RespData, line, msg.txn);
                let reply = match (state.is_dirty_supplier(), self.cache.data(&line)) {
                    (true, Some(d)) => CoherenceMessage {
                        kind: MsgKind::RespData,
                        granted_state: None,
                        data: Some(d.clone()),
                        ..reply
                    },
                    _ => CoherenceMessage {
                        kind: MsgKind::RespAck,
                        ..reply
                    },
                };
                self.cache.set_state(&line, CacheLineState::Invalid);
                self.reply(env.src, reply, fx);
                self.after_invalidate(now, line, fx);
            }
            MsgKind::DowngradeToShared => {
                let state = self.cache.state(&line);
                let next = match state {
                    CacheLineState::Modified | CacheLineState::Exclusive
                        if self.params.owned_on_downgrade =>
                    {
                        CacheLineState::Owned
                    }
                    CacheLineState::Modified | CacheLineState::Exclusive => CacheLineState::Shared,
                    s => s,
                };
                let reply = match (state.is_dirty_supplier(), self.cache.data(&line)) {
                    (true, Some(d)) => {
                        CoherenceMessage::new(MsgKind::RespData, line, msg.txn).with_data(d.clone())
                    }
                    _ => CoherenceMessage::new(MsgKind::RespAck, line, msg.txn),
                };
                self.cache.set_state(&line, next);
                self.reply(env.src, reply, fx);
            }
            other => {
                return Err(Error::protocol(format!(
                    "{} cannot handle {}",
                    self.id,
                    other.name()
                )))
            }
        }
        self.step(now, fx);
        Ok(())
    }

    fn after_fill(&mut self, now: u64, line: LineAddr, fx: &mut Effects) {
        if self.cache.try_drain(&line) && !self.outstanding.contains_key(&line) {
            self.issue_ownership(now, line, fx);
        }
    }

    fn after_invalidate(&mut self, now: u64, line: LineAddr, fx: &mut Effects) {
        if let Some(Blocked::Poll { line: polled, .. }) = &self.blocked {
            if *polled == line && !self.outstanding.contains_key(&line) {
                if self.params.poll_interval_ns == 0 {
                    self.issue(now, MsgKind::ReqShared, line, fx);
                } else {
                    fx.push(Effect::Local {
                        node: self.id,
                        ev: LocalEvent::Wake,
                        delay: self.params.poll_interval_ns,
                    });
                }
            }
        }
    }

    pub fn on_wake(&mut self, now: u64, fx: &mut Effects) {
        match self.blocked.clone() {
            Some(Blocked::Delay) => self.blocked = None,
            Some(Blocked::Poll { line, .. })
                if !self.cache.state(&line).is_valid() && !self.outstanding.contains_key(&line) =>
            {
                self.issue(now, MsgKind::ReqShared, line, fx);
            }
            _ => {}
        }
        self.step(now, fx);
    }

    /// The machine-check timer for `line` fired: a fault unless the request
    /// was answered in the meantime.
    pub fn on_timeout(&self, line: u64) -> Result<()> {
        if self.outstanding.keys().any(|l| l.index == line) {
            return Err(Error::MachineCheck {
                node: self.id.to_string(),
                line,
                timeout_ns: self.params.timeout_ns,
            });
        }
        Ok(())
    }
}
