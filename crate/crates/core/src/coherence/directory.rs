//! Home directory: per-line bookkeeping, transaction units (TADs) with bounded
//! concurrency, and the default MOESI transition function.
//!
//! Requests are admitted in two stages. A line with a pending transaction
//! parks further work for that line; otherwise the work joins its TAD's FIFO
//! and is admitted when the unit has a free slot.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::coherence::types::{
    CoherenceMessage, Effect, Effects, Envelope, Grant, LineAddr, LineData, MsgKind, NodeId, TxnId,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DirectoryEntry {
    pub line: LineAddr,
    /// Exclusive or Modified holder.
    pub owner: Option<NodeId>,
    pub sharers: BTreeSet<NodeId>,
    /// Owned-state holder responsible for supplying data.
    pub supplier: Option<NodeId>,
    pub pending: Option<TxnId>,
}

impl DirectoryEntry {
    fn new(line: LineAddr) -> Self {
        DirectoryEntry {
            line,
            owner: None,
            sharers: BTreeSet::new(),
            supplier: None,
            pending: None,
        }
    }

    pub fn holders(&self) -> BTreeSet<NodeId> {
        let mut h = self.sharers.clone();
        h.extend(self.owner);
        h.extend(self.supplier);
        h
    }

    fn forget(&mut self, node: NodeId) {
        if self.owner == Some(node) {
            self.owner = None;
        }
        if self.supplier == Some(node) {
            self.supplier = None;
        }
        self.sharers.remove(&node);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TadUnit {
    pub id: u16,
    pub capacity: usize,
    pub in_flight: BTreeSet<TxnId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TxnKind {
    /// A request from a caching agent.
    Request {
        requester: NodeId,
        kind: MsgKind,
        tag: TxnId,
    },
    /// Home-initiated recall of a line into the home.
    Pull,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Txn {
    pub id: TxnId,
    pub line: LineAddr,
    pub kind: TxnKind,
    pub awaiting: BTreeSet<NodeId>,
    pub snoop: Option<MsgKind>,
    pub collected: Option<LineData>,
    pub deferred: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Work {
    Request(Envelope),
    Pull(LineAddr),
}

impl Work {
    fn line(&self) -> LineAddr {
        match self {
            Work::Request(env) => env.msg.line,
            Work::Pull(l) => *l,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DirParams {
    pub proc_ns: u64,
    /// Extra latency on upgrade acknowledgements.
    pub upgrade_extra_ns: u64,
    pub tad_count: u16,
    pub tad_capacity: usize,
    pub line_size: usize,
    /// Downgraded dirty holders keep supplying data (MOESI) instead of
    /// writing back and becoming plain sharers.
    pub keep_owned: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Directory {
    pub id: NodeId,
    pub params: DirParams,
    entries: BTreeMap<u64, DirectoryEntry>,
    memory: BTreeMap<u64, LineData>,
    tads: Vec<TadUnit>,
    tad_queue: Vec<VecDeque<Work>>,
    line_waiting: BTreeMap<u64, VecDeque<Work>>,
    txns: BTreeMap<TxnId, Txn>,
    next_txn: u64,
    admitted: VecDeque<TxnId>,
    pulls_done: VecDeque<(LineAddr, LineData)>,
}

impl Directory {
    pub fn new(id: NodeId, params: DirParams) -> Self {
        let count = params.tad_count.max(1);
        Directory {
            id,
            params,
            entries: BTreeMap::new(),
            memory: BTreeMap::new(),
            tads: (0..count)
                .map(|id| TadUnit {
                    id,
                    capacity: params.tad_capacity.max(1),
                    in_flight: BTreeSet::new(),
                })
                .collect(),
            tad_queue: vec![VecDeque::new(); count as usize],
            line_waiting: BTreeMap::new(),
            txns: BTreeMap::new(),
            next_txn: 1,
            admitted: VecDeque::new(),
            pulls_done: VecDeque::new(),
        }
    }

    pub fn line(&self, index: u64) -> LineAddr {
        LineAddr::new(index, self.id, self.params.tad_count)
    }

    pub fn entry(&self, line: &LineAddr) -> Option<&DirectoryEntry> {
        self.entries.get(&line.index)
    }

    pub fn entries(&self) -> impl Iterator<Item = &DirectoryEntry> {
        self.entries.values()
    }

    fn entry_mut(&mut self, line: LineAddr) -> &mut DirectoryEntry {
        self.entries
            .entry(line.index)
            .or_insert_with(|| DirectoryEntry::new(line))
    }

    pub fn holders(&self, line: &LineAddr) -> BTreeSet<NodeId> {
        self.entry(line).map(|e| e.holders()).unwrap_or_default()
    }

    pub fn memory(&self, line: &LineAddr) -> LineData {
        self.memory
            .get(&line.index)
            .cloned()
            .unwrap_or_else(|| LineData::zeroed(self.params.line_size))
    }

    pub fn set_memory(&mut self, line: &LineAddr, data: LineData) {
        self.memory.insert(line.index, data);
    }

    /// Record an initial grant without any messages (used when setting up
    /// a channel's quiescent state).
    pub fn install_owner(&mut self, line: LineAddr, node: NodeId) {
        let e = self.entry_mut(line);
        e.owner = Some(node);
        e.sharers.clear();
        e.supplier = None;
    }

    pub fn install_sharer(&mut self, line: LineAddr, node: NodeId) {
        self.entry_mut(line).sharers.insert(node);
    }

    pub fn tad(&self, id: u16) -> &TadUnit {
        &self.tads[id as usize]
    }

    pub fn queued_at(&self, id: u16) -> usize {
        self.tad_queue[id as usize].len()
    }

    pub fn txn(&self, id: TxnId) -> Option<&Txn> {
        self.txns.get(&id)
    }

    pub fn txns(&self) -> impl Iterator<Item = &Txn> {
        self.txns.values()
    }

    pub fn mark_deferred(&mut self, id: TxnId) {
        if let Some(t) = self.txns.get_mut(&id) {
            t.deferred = true;
        }
    }

    pub fn is_busy(&self) -> bool {
        !self.txns.is_empty()
            || self.tad_queue.iter().any(|q| !q.is_empty())
            || self.line_waiting.values().any(|q| !q.is_empty())
    }

    pub fn pop_admitted(&mut self) -> Option<TxnId> {
        self.admitted.pop_front()
    }

    pub fn pop_pull_done(&mut self) -> Option<(LineAddr, LineData)> {
        self.pulls_done.pop_front()
    }

    fn send(&self, dst: NodeId, msg: CoherenceMessage, delay: u64, fx: &mut Effects) {
        fx.push(Effect::Send {
            env: Envelope {
                src: self.id,
                dst,
                msg,
            },
            delay,
        });
    }

    /// Accept an incoming request. Write-backs are applied immediately; all
    /// other requests go through line and TAD admission.
    pub fn submit(&mut self, env: Envelope, fx: &mut Effects) -> Result<()> {
        env.msg.validate()?;
        if env.msg.kind == MsgKind::WriteBack {
            let line = env.msg.line;
            let data = env.msg.data.clone().expect("validated");
            let e = self.entry_mut(line);
            let authoritative = e.owner == Some(env.src) || e.supplier == Some(env.src);
            e.forget(env.src);
            if authoritative {
                self.memory.insert(line.index, data);
            }
            let ack = CoherenceMessage::new(MsgKind::RespAck, line, env.msg.txn);
            self.send(env.src, ack, self.params.proc_ns, fx);
            return Ok(());
        }
        if !env.msg.kind.is_request() {
            return Err(Error::protocol(format!(
                "{} submitted as a request",
                env.msg.kind.name()
            )));
        }
        self.enqueue(Work::Request(env));
        Ok(())
    }

    /// Begin recalling `line` from whoever caches it.
    pub fn start_pull(&mut self, line: LineAddr) {
        self.enqueue(Work::Pull(line));
    }

    fn enqueue(&mut self, work: Work) {
        let line = work.line();
        if self.entry_mut(line).pending.is_some() {
            self.line_waiting
                .entry(line.index)
                .or_default()
                .push_back(work);
            return;
        }
        self.tad_queue[line.tad as usize].push_back(work);
        self.drain_tad(line.tad);
    }

    fn drain_tad(&mut self, tad: u16) {
        loop {
            let unit = &self.tads[tad as usize];
            if unit.in_flight.len() >= unit.capacity {
                return;
            }
            let Some(work) = self.tad_queue[tad as usize].pop_front() else {
                return;
            };
            let line = work.line();
            if self.entry_mut(line).pending.is_some() {
                self.line_waiting
                    .entry(line.index)
                    .or_default()
                    .push_back(work);
                continue;
            }
            self.admit(work);
        }
    }

    fn admit(&mut self, work: Work) {
        let id = TxnId(self.next_txn);
        self.next_txn += 1;
        let line = work.line();
        let kind = match work {
            Work::Request(env) => TxnKind::Request {
                requester: env.src,
                kind: env.msg.kind,
                tag: env.msg.txn,
            },
            Work::Pull(_) => TxnKind::Pull,
        };
        self.txns.insert(
            id,
            Txn {
                id,
                line,
                kind,
                awaiting: BTreeSet::new(),
                snoop: None,
                collected: None,
                deferred: false,
            },
        );
        self.entry_mut(line).pending = Some(id);
        self.tads[line.tad as usize].in_flight.insert(id);
        self.admitted.push_back(id);
    }

    fn complete(&mut self, id: TxnId) {
        let Some(txn) = self.txns.remove(&id) else {
            return;
        };
        let line = txn.line;
        self.entry_mut(line).pending = None;
        self.tads[line.tad as usize].in_flight.remove(&id);
        if let Some(q) = self.line_waiting.get_mut(&line.index) {
            if let Some(w) = q.pop_front() {
                self.tad_queue[line.tad as usize].push_back(w);
            }
            if q.is_empty() {
                self.line_waiting.remove(&line.index);
            }
        }
        self.drain_tad(line.tad);
    }

    fn snoop(&mut self, id: TxnId, kind: MsgKind, targets: BTreeSet<NodeId>, fx: &mut Effects) {
        let txn = self.txns.get_mut(&id).expect("live txn");
        let line = txn.line;
        txn.awaiting = targets.clone();
        txn.snoop = Some(kind);
        for t in targets {
            self.send(
                t,
                CoherenceMessage::new(kind, line, id),
                self.params.proc_ns,
                fx,
            );
        }
    }

    /// Default MOESI handling for an admitted request.
    pub fn process_default(&mut self, id: TxnId, fx: &mut Effects) -> Result<()> {
        let txn = self
            .txns
            .get(&id)
            .ok_or_else(|| Error::protocol(format!("unknown transaction {id:?}")))?;
        let TxnKind::Request {
            requester, kind, ..
        } = txn.kind.clone()
        else {
            return self.process_pull(id, fx);
        };
        let line = txn.line;
        let entry = self.entry_mut(line).clone();
        match kind {
            MsgKind::ReqShared => {
                let source = entry
                    .owner
                    .filter(|o| *o != requester)
                    .or(entry.supplier.filter(|s| *s != requester));
                match source {
                    Some(s) => self.snoop(id, MsgKind::DowngradeToShared, [s].into(), fx),
                    None => self.finish_default(id, fx)?,
                }
            }
            MsgKind::ReqExclusive | MsgKind::ReqUpgrade => {
                let mut targets = entry.holders();
                targets.remove(&requester);
                if targets.is_empty() {
                    self.finish_default(id, fx)?;
                } else {
                    self.snoop(id, MsgKind::InvalidateToInvalid, targets, fx);
                }
            }
            other => {
                return Err(Error::protocol(format!(
                    "no default handling for {}",
                    other.name()
                )))
            }
        }
        Ok(())
    }

    /// Start an admitted pull: invalidate every cached copy.
    pub fn process_pull(&mut self, id: TxnId, fx: &mut Effects) -> Result<()> {
        let txn = self
            .txns
            .get(&id)
            .ok_or_else(|| Error::protocol(format!("unknown transaction {id:?}")))?;
        let mut targets = self.holders(&txn.line);
        targets.remove(&self.id);
        if targets.is_empty() {
            self.complete_pull(id);
        } else {
            self.snoop(id, MsgKind::InvalidateToInvalid, targets, fx);
        }
        Ok(())
    }

    fn complete_pull(&mut self, id: TxnId) {
        let txn = self.txns.get(&id).expect("live txn");
        let line = txn.line;
        let data = txn.collected.clone().unwrap_or_else(|| self.memory(&line));
        self.memory.insert(line.index, data.clone());
        self.complete(id);
        self.pulls_done.push_back((line, data));
    }

    fn finish_default(&mut self, id: TxnId, fx: &mut Effects) -> Result<()> {
        let txn = self.txns.get(&id).expect("live txn").clone();
        let TxnKind::Request {
            requester, kind, ..
        } = txn.kind
        else {
            unreachable!("pulls finish via complete_pull");
        };
        let line = txn.line;
        let entry = self.entry_mut(line).clone();
        if let Some(d) = &txn.collected {
            if entry.supplier.is_none() || kind != MsgKind::ReqShared {
                self.memory.insert(line.index, d.clone());
            }
        }
        let data = txn.collected.clone().unwrap_or_else(|| self.memory(&line));
        match kind {
            MsgKind::ReqShared => {
                self.entry_mut(line).forget(requester);
                self.respond(id, Grant::Shared, data, fx)
            }
            _ => {
                let still_holds = entry.sharers.contains(&requester)
                    || entry.supplier == Some(requester)
                    || entry.owner == Some(requester);
                if kind == MsgKind::ReqUpgrade && still_holds {
                    self.respond_ack(id, fx)
                } else {
                    self.respond(id, Grant::Exclusive, data, fx)
                }
            }
        }
    }

    /// Answer an admitted request with data and close the transaction.
    pub fn respond(
        &mut self,
        id: TxnId,
        grant: Grant,
        data: LineData,
        fx: &mut Effects,
    ) -> Result<()> {
        let (requester, tag, line) = self.request_parts(id)?;
        let e = self.entry_mut(line);
        match grant {
            Grant::Shared => {
                if e.owner.is_some_and(|o| o != requester) {
                    return Err(Error::protocol(format!(
                        "shared grant of line {} while {:?} owns it",
                        line.index, e.owner
                    )));
                }
                e.owner = None;
                e.sharers.insert(requester);
            }
            Grant::Exclusive => {
                let mut others = e.holders();
                others.remove(&requester);
                if !others.is_empty() {
                    return Err(Error::protocol(format!(
                        "exclusive grant of line {} while {others:?} hold it",
                        line.index
                    )));
                }
                e.owner = Some(requester);
                e.sharers.clear();
                e.supplier = None;
            }
        }
        self.memory.insert(line.index, data.clone());
        let msg = CoherenceMessage::new(MsgKind::RespData, line, tag)
            .with_grant(grant)
            .with_data(data);
        self.send(requester, msg, self.params.proc_ns, fx);
        self.complete(id);
        Ok(())
    }

    fn respond_ack(&mut self, id: TxnId, fx: &mut Effects) -> Result<()> {
        let (requester, tag, line) = self.request_parts(id)?;
        let e = self.entry_mut(line);
        e.owner = Some(requester);
        e.sharers.clear();
        e.supplier = None;
        let msg = CoherenceMessage::new(MsgKind::RespAck, line, tag).with_grant(Grant::Exclusive);
        self.send(
            requester,
            msg,
            self.params.proc_ns + self.params.upgrade_extra_ns,
            fx,
        );
        self.complete(id);
        Ok(())
    }

    /// Tell the requester to try again later and release the slot.
    pub fn retry_later(&mut self, id: TxnId, fx: &mut Effects) -> Result<()> {
        let (requester, tag, line) = self.request_parts(id)?;
        let msg = CoherenceMessage::new(MsgKind::RetryLater, line, tag);
        self.send(requester, msg, self.params.proc_ns, fx);
        self.complete(id);
        Ok(())
    }

    fn request_parts(&self, id: TxnId) -> Result<(NodeId, TxnId, LineAddr)> {
        match self.txns.get(&id) {
            Some(Txn {
                kind: TxnKind::Request { requester, tag, .. },
                line,
                ..
            }) => Ok((*requester, *tag, *line)),
            _ => Err(Error::protocol(format!("{id:?} is not a live request"))),
        }
    }

    /// A cache answered one of our snoops.
    pub fn on_snoop_reply(&mut self, env: Envelope, fx: &mut Effects) -> Result<()> {
        let id = env.msg.txn;
        let Some(txn) = self.txns.get_mut(&id) else {
            return Err(Error::protocol(format!(
                "{} from {} for idle transaction {id:?}",
                env.msg.kind.name(),
                env.src
            )));
        };
        if !txn.awaiting.remove(&env.src) {
            return Err(Error::protocol(format!(
                "unexpected snoop reply from {} for {id:?}",
                env.src
            )));
        }
        if let Some(d) = env.msg.data.clone() {
            txn.collected = Some(d);
        }
        let line = txn.line;
        let snoop = txn.snoop;
        let finished = txn.awaiting.is_empty();
        let is_pull = txn.kind == TxnKind::Pull;
        let keep_owned = self.params.keep_owned;
        let had_data = env.msg.data.is_some();
        let e = self.entry_mut(line);
        match snoop {
            Some(MsgKind::DowngradeToShared) => {
                if e.owner == Some(env.src) {
                    e.owner = None;
                    if keep_owned && had_data {
                        e.supplier = Some(env.src);
                    } else {
                        e.sharers.insert(env.src);
                    }
                }
            }
            _ => e.forget(env.src),
        }
        if finished {
            if is_pull {
                self.complete_pull(id);
            } else {
                self.finish_default(id, fx)?;
            }
        }
        Ok(())
    }

    /// Run one message through a directory with no device policy attached and
    /// return the messages it emits.
    pub fn directory_step(&mut self, env: Envelope) -> Result<Vec<Envelope>> {
        let mut fx = Vec::new();
        if env.msg.kind.is_request() {
            self.submit(env, &mut fx)?;
        } else {
            self.on_snoop_reply(env, &mut fx)?;
        }
        while let Some(id) = self.pop_admitted() {
            self.process_default(id, &mut fx)?;
        }
        self.pulls_done.clear();
        Ok(fx
            .into_iter()
            .filter_map(|e| match e {
                Effect::Send { env, .. } => Some(env),
                _ => None,
            })
            .collect())
    }
}
