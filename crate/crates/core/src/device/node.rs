//! The device endpoint: a home directory plus per-channel state machines that
//! decide how requests for channel lines are answered.

use std::collections::{BTreeMap, BTreeSet};

use crate::coherence::{
    CacheLineState, Directory, Effect, Effects, Envelope, Grant, LineAddr, LineData, LocalEvent,
    MsgKind, NodeId, TimerKey, Txn, TxnId, TxnKind,
};
use crate::device::channel::{
    frame_lines, Channel, ComputeFunction, DeferReason, DeviceAction, EpochState, LinePairChannel,
    MultiLineGroup, OverflowSet, Variant, FRAME_HEADER,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NicTiming {
    pub rx_fixed_ns: u64,
    pub per_line_rx_ns: u64,
    pub tx_fixed_ns: u64,
    pub per_line_tx_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceParams {
    pub exclusive_return: bool,
    pub retry_after_ns: u64,
    pub nic: NicTiming,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeviceNode {
    pub dir: Directory,
    pub params: DeviceParams,
    pub channels: Vec<Channel>,
    roles: BTreeMap<u64, usize>,
    next_line: u64,
    stalls: BTreeMap<u64, u64>,
    stalled: BTreeSet<TxnId>,
    pub retries_sent: u64,
}

/// Lines a newly opened channel hands to the CPU in writable state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenedChannel {
    pub id: usize,
    pub hazard: bool,
    pub cpu_exclusive: Vec<LineAddr>,
}

impl DeviceNode {
    pub fn new(dir: Directory, params: DeviceParams) -> Self {
        DeviceNode {
            dir,
            params,
            channels: Vec::new(),
            roles: BTreeMap::new(),
            next_line: 0,
            stalls: BTreeMap::new(),
            stalled: BTreeSet::new(),
            retries_sent: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.dir.id
    }

    fn line_size(&self) -> usize {
        self.dir.params.line_size
    }

    fn grant(&self) -> Grant {
        if self.params.exclusive_return {
            Grant::Exclusive
        } else {
            Grant::Shared
        }
    }

    /// Allocate `count` consecutive device-homed lines.
    pub fn alloc_lines(&mut self, count: usize) -> Vec<LineAddr> {
        let start = self.next_line;
        self.next_line += count as u64;
        (start..self.next_line).map(|i| self.dir.line(i)).collect()
    }

    pub fn channel_of(&self, line: &LineAddr) -> Option<usize> {
        self.roles.get(&line.index).copied()
    }

    /// Set up a channel in its quiescent state. For `Bidirectional`, `n` is the
    /// group size; for the NIC variants it is the overflow bank size.
    pub fn open_channel(
        &mut self,
        variant: Variant,
        n: usize,
        compute: ComputeFunction,
    ) -> Result<OpenedChannel> {
        let tads = self.dir.params.tad_count.max(1) as usize;
        let slots = tads * self.dir.params.tad_capacity.max(1);
        let id = self.channels.len();
        let (pair, group, overflow, needed) = match variant {
            Variant::Bidirectional => {
                if n == 0 {
                    return Err(Error::InvalidArgument(
                        "group size must be at least 1".into(),
                    ));
                }
                let group0 = self.alloc_lines(n);
                if tads > 1 && n.is_multiple_of(tads) {
                    // keep pair partners on different units
                    self.alloc_lines(1);
                }
                let group1 = self.alloc_lines(n);
                let pair = LinePairChannel {
                    line_a: group1[0],
                    line_b: group0[0],
                    parity: 0,
                    variant,
                    epoch: 0,
                };
                let group = MultiLineGroup {
                    group0,
                    group1,
                    n,
                    received_count: [0, 0],
                };
                (pair, Some(group), None, 2 * n)
            }
            Variant::ReadFromDevice | Variant::WriteToDevice => {
                let ctrl = self.alloc_lines(2);
                let overflow = OverflowSet {
                    overflow: self.alloc_lines(n),
                    alternate: self.alloc_lines(n),
                };
                let pair = LinePairChannel {
                    line_a: ctrl[1],
                    line_b: ctrl[0],
                    parity: 0,
                    variant,
                    epoch: 0,
                };
                (pair, None, Some(overflow), 2 * n + 2)
            }
        };
        let mut hazard = pair.line_a.tad == pair.line_b.tad;
        if let Some(g) = &group {
            hazard |= g.group0.iter().zip(&g.group1).any(|(a, b)| a.tad == b.tad);
        }
        if needed > slots {
            if needed / 2 > slots {
                return Err(Error::GroupTooLarge {
                    n,
                    needed,
                    available: slots,
                });
            }
            hazard = true;
        }
        let cpu_exclusive = match &group {
            Some(g) => g.group0.clone(),
            None => vec![pair.line_b],
        };
        let ch = Channel {
            id,
            pair,
            group,
            overflow,
            compute,
            request_len: 0,
            last_response_len: 0,
            epoch: EpochState::default(),
            frames: Default::default(),
            incoming: Default::default(),
            transmitted: Vec::new(),
            hazard,
        };
        for l in ch.all_lines() {
            self.roles.insert(l.index, id);
        }
        self.channels.push(ch);
        Ok(OpenedChannel {
            id,
            hazard,
            cpu_exclusive,
        })
    }

    /// Hold the next request for `line` for `ns` before answering it.
    pub fn stall_once(&mut self, line: &LineAddr, ns: u64) {
        self.stalls.insert(line.index, ns);
    }

    /// Requests currently held by the device (candidates for RetryLater).
    pub fn deferred_txns(&self) -> Vec<TxnId> {
        let mut v: Vec<TxnId> = self
            .channels
            .iter()
            .flat_map(|c| c.epoch.deferred.values().copied())
            .collect();
        v.extend(self.stalled.iter().copied());
        v.sort();
        v
    }

    pub fn is_busy(&self) -> bool {
        self.dir.is_busy()
    }

    pub fn on_message(&mut self, now: u64, env: Envelope, fx: &mut Effects) -> Result<()> {
        match env.msg.kind {
            k if k.is_request() => self.dir.submit(env, fx)?,
            MsgKind::RespData | MsgKind::RespAck => self.dir.on_snoop_reply(env, fx)?,
            other => {
                return Err(Error::protocol(format!(
                    "device cannot handle {} from {}",
                    other.name(),
                    env.src
                )))
            }
        }
        self.pump(now, fx)
    }

    fn pump(&mut self, now: u64, fx: &mut Effects) -> Result<()> {
        loop {
            if let Some(id) = self.dir.pop_admitted() {
                self.dispatch(now, id, fx)?;
                continue;
            }
            if let Some((line, data)) = self.dir.pop_pull_done() {
                self.on_pull_done(line, data, fx)?;
                continue;
            }
            return Ok(());
        }
    }

    fn dispatch(&mut self, _now: u64, id: TxnId, fx: &mut Effects) -> Result<()> {
        let txn = self.dir.txn(id).cloned().expect("admitted txn");
        if txn.kind == TxnKind::Pull {
            return self.dir.process_pull(id, fx);
        }
        if let Some(ch) = self.channel_of(&txn.line) {
            if let Some(actions) = self.device_on_request(ch, &txn)? {
                return self.apply(ch, id, txn.line, actions, fx);
            }
        } else if let Some(ns) = self.stalls.remove(&txn.line.index) {
            self.dir.mark_deferred(id);
            self.stalled.insert(id);
            self.arm_guard(id, fx);
            fx.push(Effect::Local {
                node: self.id(),
                ev: LocalEvent::StallDone { txn: id },
                delay: ns,
            });
            return Ok(());
        }
        self.dir.process_default(id, fx)
    }

    /// Decide how to answer a request for a channel line. `None` means the
    /// line is not in a request role this epoch and gets default handling.
    pub fn device_on_request(&mut self, ch: usize, txn: &Txn) -> Result<Option<Vec<DeviceAction>>> {
        let grant = self.grant();
        let line = txn.line;
        let line_size = self.line_size();
        let c = &self.channels[ch];
        match c.variant() {
            Variant::Bidirectional => {
                let req = c.request_lines();
                let Some(j) = req.iter().position(|l| *l == line) else {
                    return Ok(None);
                };
                if let Some(resp) = &c.epoch.response {
                    let data = resp.get(&line.index).cloned().expect("response per line");
                    return Ok(Some(vec![DeviceAction::RespondNow { data, grant }]));
                }
                let data_line = c.data_lines()[j];
                let reason = if c.epoch.busy {
                    DeferReason::Computing
                } else {
                    DeferReason::AwaitingData
                };
                let mut actions = vec![DeviceAction::Defer(reason)];
                if !c.epoch.pulls.contains(&data_line.index) {
                    actions.push(DeviceAction::PullLine {
                        line: data_line,
                        want: Grant::Exclusive,
                    });
                }
                Ok(Some(actions))
            }
            Variant::ReadFromDevice => {
                let is_control = line == c.pair.request_line();
                let in_bank = c.bank().contains(&line);
                if !is_control && !in_bank {
                    return Ok(None);
                }
                if let Some(resp) = &c.epoch.response {
                    let data = resp
                        .get(&line.index)
                        .cloned()
                        .unwrap_or_else(|| LineData::zeroed(line_size));
                    return Ok(Some(vec![DeviceAction::RespondNow { data, grant }]));
                }
                let have_frame = c.epoch.frame.is_some() || !c.frames.is_empty();
                let reason = if have_frame {
                    DeferReason::Staging
                } else {
                    DeferReason::NoFrame
                };
                let mut actions = vec![DeviceAction::Defer(reason)];
                if is_control && have_frame && !c.epoch.started {
                    actions.extend(self.begin_rx(ch));
                }
                Ok(Some(actions))
            }
            Variant::WriteToDevice => {
                if line != c.pair.request_line() {
                    return Ok(None);
                }
                if let Some(resp) = &c.epoch.response {
                    let data = resp.get(&line.index).cloned().expect("control response");
                    return Ok(Some(vec![DeviceAction::RespondNow { data, grant }]));
                }
                let mut actions = vec![DeviceAction::Defer(DeferReason::AwaitingData)];
                if !c.epoch.started {
                    actions.extend(self.begin_tx(ch));
                }
                Ok(Some(actions))
            }
        }
    }

    fn recall_actions(&mut self, ch: usize, lines: Vec<LineAddr>) -> Vec<DeviceAction> {
        let c = &mut self.channels[ch];
        c.epoch.started = true;
        c.epoch.pulls_pending = lines.len();
        lines
            .into_iter()
            .map(|line| DeviceAction::PullLine {
                line,
                want: Grant::Exclusive,
            })
            .collect()
    }

    fn begin_rx(&mut self, ch: usize) -> Vec<DeviceAction> {
        let c = &mut self.channels[ch];
        if c.epoch.frame.is_none() {
            c.epoch.frame = c.frames.pop_front();
        }
        let mut lines = vec![c.pair.data_line()];
        let previous: Vec<LineAddr> = c.previous_bank().to_vec();
        lines.extend(
            previous
                .into_iter()
                .filter(|l| !self.dir.holders(l).is_empty()),
        );
        self.recall_actions(ch, lines)
    }

    fn begin_tx(&mut self, ch: usize) -> Vec<DeviceAction> {
        let c = &self.channels[ch];
        let mut lines = vec![c.pair.data_line()];
        lines.extend(
            c.bank()
                .iter()
                .filter(|l| !self.dir.holders(l).is_empty())
                .copied(),
        );
        self.recall_actions(ch, lines)
    }

    fn arm_guard(&self, txn: TxnId, fx: &mut Effects) {
        fx.push(Effect::Arm {
            key: TimerKey::Guard { txn },
            node: self.id(),
            delay: self.params.retry_after_ns,
        });
    }

    fn apply(
        &mut self,
        ch: usize,
        id: TxnId,
        line: LineAddr,
        actions: Vec<DeviceAction>,
        fx: &mut Effects,
    ) -> Result<()> {
        for action in actions {
            match action {
                DeviceAction::RespondNow { data, grant } => {
                    self.answer(ch, id, line, grant, data, fx)?;
                }
                DeviceAction::Defer(_) => {
                    self.dir.mark_deferred(id);
                    self.channels[ch].epoch.deferred.insert(line.index, id);
                    self.arm_guard(id, fx);
                }
                DeviceAction::PullLine { line, .. } => {
                    self.channels[ch].epoch.pulls.insert(line.index);
                    self.dir.start_pull(line);
                }
                DeviceAction::RetryLater => {
                    self.channels[ch].epoch.deferred.remove(&line.index);
                    self.retries_sent += 1;
                    self.dir.retry_later(id, fx)?;
                }
            }
        }
        Ok(())
    }

    fn answer(
        &mut self,
        ch: usize,
        id: TxnId,
        line: LineAddr,
        grant: Grant,
        data: LineData,
        fx: &mut Effects,
    ) -> Result<()> {
        self.dir.respond(id, grant, data, fx)?;
        fx.push(Effect::Disarm(TimerKey::Guard { txn: id }));
        let c = &mut self.channels[ch];
        c.epoch.deferred.remove(&line.index);
        c.epoch.responded.insert(line.index);
        if c.epoch.responded.len() >= c.epoch.expected.max(1) && c.epoch.response.is_some() {
            c.close_epoch();
        }
        Ok(())
    }

    /// Answer every held request of the channel from its response map.
    fn release_deferred(&mut self, ch: usize, fx: &mut Effects) -> Result<()> {
        let grant = self.grant();
        let line_size = self.line_size();
        let held: Vec<(u64, TxnId)> = self.channels[ch]
            .epoch
            .deferred
            .iter()
            .map(|(l, t)| (*l, *t))
            .collect();
        for (idx, txn) in held {
            let line = self.dir.line(idx);
            let data = self.channels[ch]
                .epoch
                .response
                .as_ref()
                .and_then(|r| r.get(&idx).cloned())
                .unwrap_or_else(|| LineData::zeroed(line_size));
            self.answer(ch, txn, line, grant, data, fx)?;
        }
        Ok(())
    }

    fn on_pull_done(&mut self, line: LineAddr, data: LineData, fx: &mut Effects) -> Result<()> {
        let Some(ch) = self.channel_of(&line) else {
            return Ok(());
        };
        if !self.channels[ch].epoch.pulls.contains(&line.index) {
            return Ok(());
        }
        let line_size = self.line_size();
        let nic = self.params.nic;
        let node = self.id();
        let c = &mut self.channels[ch];
        c.epoch.received.insert(line.index, data);
        c.epoch.pulls_pending = c.epoch.pulls_pending.saturating_sub(1);
        match c.variant() {
            Variant::Bidirectional => {
                let parity = c.pair.parity as usize;
                let n = c.n();
                if let Some(g) = c.group.as_mut() {
                    g.received_count[parity] += 1;
                }
                if c.epoch.received.len() == n && !c.epoch.busy {
                    c.epoch.busy = true;
                    fx.push(Effect::Local {
                        node,
                        ev: LocalEvent::ComputeDone { channel: ch },
                        delay: c.compute.latency_ns(c.request_len),
                    });
                }
            }
            Variant::ReadFromDevice => {
                if c.epoch.pulls_pending == 0 {
                    let len = c.epoch.frame.as_ref().map_or(0, Vec::len);
                    let k = frame_lines(len, line_size).max(1) as u64;
                    c.epoch.busy = true;
                    fx.push(Effect::Local {
                        node,
                        ev: LocalEvent::StageDone { channel: ch },
                        delay: nic.rx_fixed_ns + (k - 1) * nic.per_line_rx_ns,
                    });
                }
            }
            Variant::WriteToDevice => {
                if c.epoch.pulls_pending == 0 {
                    let header = &c.epoch.received[&c.pair.data_line().index];
                    let len = header.seq() as usize;
                    let lines = frame_lines(len, line_size);
                    let frame = if lines == 0 {
                        header.as_bytes()[FRAME_HEADER..FRAME_HEADER + len].to_vec()
                    } else {
                        let mut bytes = Vec::with_capacity(lines * line_size);
                        for l in &c.bank()[..lines] {
                            let d = c.epoch.received.get(&l.index).ok_or_else(|| {
                                Error::protocol(format!("overflow line {} never written", l.index))
                            })?;
                            bytes.extend_from_slice(d.as_bytes());
                        }
                        bytes.truncate(len);
                        bytes
                    };
                    c.transmitted.push(frame);
                    let k = lines.max(1) as u64;
                    fx.push(Effect::Local {
                        node,
                        ev: LocalEvent::Egress { channel: ch },
                        delay: nic.tx_fixed_ns + (k - 1) * nic.per_line_tx_ns,
                    });
                    let req = c.pair.request_line();
                    let mut resp = BTreeMap::new();
                    resp.insert(req.index, self.dir.memory(&req));
                    let c = &mut self.channels[ch];
                    c.epoch.response = Some(resp);
                    c.epoch.expected = 1;
                    self.release_deferred(ch, fx)?;
                }
            }
        }
        Ok(())
    }

    pub fn on_local(&mut self, now: u64, ev: LocalEvent, fx: &mut Effects) -> Result<()> {
        match ev {
            LocalEvent::ComputeDone { channel } => self.finish_compute(channel, fx)?,
            LocalEvent::StageDone { channel } => self.finish_stage(channel, fx)?,
            LocalEvent::Egress { channel } => fx.push(Effect::Completed {
                node: self.id(),
                tag: channel as u32,
            }),
            LocalEvent::FrameArrival { channel } => self.frame_arrived(channel, fx)?,
            LocalEvent::StallDone { txn } => {
                if self.stalled.remove(&txn) {
                    fx.push(Effect::Disarm(TimerKey::Guard { txn }));
                    self.dir.process_default(txn, fx)?;
                }
            }
            LocalEvent::Wake => {}
        }
        self.pump(now, fx)
    }

    fn finish_compute(&mut self, ch: usize, fx: &mut Effects) -> Result<()> {
        let line_size = self.line_size();
        let c = &mut self.channels[ch];
        let data_lines = c.data_lines();
        let req_lines = c.request_lines();
        let mut input = Vec::with_capacity(data_lines.len() * line_size);
        for l in &data_lines {
            input.extend_from_slice(c.epoch.received[&l.index].as_bytes());
        }
        input.truncate(c.request_len);
        let output = c.compute.apply(&input);
        let max = req_lines.len() * line_size;
        if output.len() > max {
            return Err(Error::PayloadTooLarge {
                len: output.len(),
                max,
            });
        }
        c.last_response_len = output.len();
        let mut resp = BTreeMap::new();
        for (j, l) in req_lines.iter().enumerate() {
            let lo = (j * line_size).min(output.len());
            let hi = ((j + 1) * line_size).min(output.len());
            resp.insert(l.index, LineData::from_slice(&output[lo..hi], line_size)?);
        }
        c.epoch.response = Some(resp);
        c.epoch.expected = req_lines.len();
        // lines answered before the response existed do not count twice
        c.epoch.responded.clear();
        self.release_deferred(ch, fx)
    }

    fn finish_stage(&mut self, ch: usize, fx: &mut Effects) -> Result<()> {
        let line_size = self.line_size();
        let c = &mut self.channels[ch];
        let frame = c.epoch.frame.clone().unwrap_or_default();
        let lines = frame_lines(frame.len(), line_size);
        let mut control = LineData::zeroed(line_size);
        control.write(0, &(frame.len() as u64).to_le_bytes());
        if lines == 0 {
            control.write(FRAME_HEADER, &frame);
        }
        let mut resp = BTreeMap::new();
        resp.insert(c.pair.request_line().index, control);
        for (j, l) in c.bank()[..lines].iter().enumerate() {
            let hi = ((j + 1) * line_size).min(frame.len());
            resp.insert(
                l.index,
                LineData::from_slice(&frame[j * line_size..hi], line_size)?,
            );
        }
        c.last_response_len = frame.len();
        c.epoch.expected = 1 + lines;
        c.epoch.response = Some(resp);
        self.release_deferred(ch, fx)
    }

    fn frame_arrived(&mut self, ch: usize, fx: &mut Effects) -> Result<()> {
        let c = &mut self.channels[ch];
        let Some(frame) = c.incoming.pop_front() else {
            return Err(Error::protocol("frame arrival with nothing incoming"));
        };
        c.frames.push_back(frame);
        let control = c.pair.request_line();
        if let Some(&txn) = c.epoch.deferred.get(&control.index) {
            if !c.epoch.started {
                let actions = self.begin_rx(ch);
                self.apply(ch, txn, control, actions, fx)?;
            }
        }
        Ok(())
    }

    /// A guard timer fired: answer the request with RetryLater if it is
    /// still being held.
    pub fn on_guard(&mut self, now: u64, txn: TxnId, fx: &mut Effects) -> Result<()> {
        if self.stalled.remove(&txn) {
            self.retries_sent += 1;
            self.dir.retry_later(txn, fx)?;
            return self.pump(now, fx);
        }
        let held = self.channels.iter().enumerate().find_map(|(ch, c)| {
            c.epoch
                .deferred
                .iter()
                .find(|(_, t)| **t == txn)
                .map(|(l, _)| (ch, *l))
        });
        if let Some((ch, idx)) = held {
            let line = self.dir.line(idx);
            self.apply(ch, txn, line, vec![DeviceAction::RetryLater], fx)?;
        }
        self.pump(now, fx)
    }

    /// State the device itself holds for `line`, inferred from the directory.
    pub fn local_state(&self, line: &LineAddr) -> CacheLineState {
        match self.dir.entry(line) {
            None => CacheLineState::Modified,
            Some(e) if e.owner.is_some() => CacheLineState::Invalid,
            Some(e) if e.sharers.is_empty() && e.supplier.is_none() => CacheLineState::Modified,
            Some(_) => CacheLineState::Shared,
        }
    }
}
