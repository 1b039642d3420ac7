//! Event-driven execution of a [`World`]: link latencies, timers, jitter and
//! message reordering, plus the high-level channel operations.

use std::collections::HashMap;

use crate::coherence::{
    CacheLineState, CpuNode, CpuOp, CpuParams, DirParams, Directory, Effect, Effects, Envelope,
    Grant, LineAddr, LineData, LocalEvent, NodeId, TimerKey,
};
use crate::device::{
    frame_lines, ComputeFunction, DeviceNode, DeviceParams, NicTiming, Variant, FRAME_HEADER,
};
use crate::error::{Error, Result};
use crate::sim::{Endpoint, Engine, EventId, Jitter, RunStats, SimTime};
use crate::world::{Topology, World};

/// Mark emitted by a CPU program when the measured operation is finished.
pub const MARK_DONE: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub seed: u64,
    pub one_way_ns: u64,
    pub jitter: bool,
    pub link_jitter_ns: u64,
    pub reorder: bool,
    pub reorder_window: u64,
    pub reorder_slot_ns: u64,
    pub check_swmr: bool,
    pub run_limit_ns: u64,
    pub dir: DirParams,
    pub cpu: CpuParams,
    pub device: DeviceParams,
    pub nic_overflow_lines: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            seed: 0,
            one_way_ns: 150,
            jitter: false,
            link_jitter_ns: 10,
            reorder: false,
            reorder_window: 4,
            reorder_slot_ns: 20,
            check_swmr: false,
            run_limit_ns: 60_000_000_000,
            dir: DirParams {
                proc_ns: 150,
                upgrade_extra_ns: 250,
                tad_count: 64,
                tad_capacity: 16,
                line_size: 128,
                keep_owned: false,
            },
            cpu: CpuParams {
                line_size: 128,
                l1_capacity_bytes: 32 * 1024,
                issue_interval_ns: 51,
                thrash_interval_ns: 66,
                timeout_ns: 100_000_000,
                poll_interval_ns: 0,
                owned_on_downgrade: false,
            },
            device: DeviceParams {
                exclusive_return: true,
                retry_after_ns: 90_000_000,
                nic: NicTiming {
                    rx_fixed_ns: 300,
                    per_line_rx_ns: 519,
                    tx_fixed_ns: 460,
                    per_line_tx_ns: 60,
                },
            },
            nic_overflow_lines: 75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Deliver(Envelope),
    Local(NodeId, LocalEvent),
    Timer(TimerKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub node: NodeId,
    pub tag: u32,
    pub at: u64,
}

/// Result of running one CPU program to quiescence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Run {
    pub start: u64,
    pub stats: RunStats,
    pub stalled: bool,
    pub completions: Vec<Completion>,
    pub retries: u64,
}

impl Run {
    pub fn finished_at(&self, node: NodeId, tag: u32) -> Option<u64> {
        self.completions
            .iter()
            .find(|c| c.node == node && c.tag == tag)
            .map(|c| c.at)
    }
}

/// Outcome of one channel operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    pub latency_ns: u64,
    pub data: Vec<u8>,
    pub one_way_traversals: u64,
    pub messages: u64,
    pub retries: u64,
}

#[derive(Debug)]
struct Sched {
    params: SimParams,
    topology: Topology,
    timers: HashMap<TimerKey, EventId>,
    fifo: HashMap<(NodeId, NodeId, u64), u64>,
    jitter: Jitter,
    completions: Vec<Completion>,
}

impl Sched {
    fn apply(&mut self, eng: &mut Engine<Event>, fx: Effects) -> Result<()> {
        let now = eng.now().ns();
        for effect in fx {
            match effect {
                Effect::Send { env, delay } => {
                    let cross = self.topology.crosses(env.src, env.dst);
                    let mut at = now + delay;
                    if cross {
                        at += self.params.one_way_ns;
                        eng.stats_mut().one_way_traversals += 1;
                        if self.params.jitter {
                            at += self.jitter.sample();
                        }
                    }
                    if self.params.reorder {
                        let span = self.params.reorder_window * self.params.reorder_slot_ns;
                        at += self.jitter.below(span + 1);
                    }
                    let key = (env.src, env.dst, env.msg.line.index);
                    let last = self.fifo.entry(key).or_insert(0);
                    at = at.max(*last);
                    *last = at;
                    eng.stats_mut().messages_on_link += 1;
                    eng.schedule(
                        at - now,
                        Endpoint(u32::from(env.dst.0)),
                        Event::Deliver(env),
                    )?;
                }
                Effect::Local { node, ev, delay } => {
                    eng.schedule(delay, Endpoint(u32::from(node.0)), Event::Local(node, ev))?;
                }
                Effect::Arm { key, node, delay } => {
                    if let Some(old) = self.timers.remove(&key) {
                        eng.cancel(old);
                    }
                    let id = eng.schedule(delay, Endpoint(u32::from(node.0)), Event::Timer(key))?;
                    self.timers.insert(key, id);
                }
                Effect::Disarm(key) => {
                    if let Some(old) = self.timers.remove(&key) {
                        eng.cancel(old);
                    }
                }
                Effect::Completed { node, tag } => {
                    self.completions.push(Completion { node, tag, at: now })
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Machine {
    pub world: World,
    engine: Engine<Event>,
    sched: Sched,
}

impl Machine {
    pub fn new(params: SimParams, topology: Topology) -> Self {
        let dir = Directory::new(NodeId::DEVICE, params.dir);
        let device = DeviceNode::new(dir, params.device);
        let cpus = (0..topology.cpu_count())
            .map(|i| CpuNode::new(NodeId(i as u8), params.cpu))
            .collect();
        Machine {
            world: World {
                cpus,
                device,
                topology,
            },
            engine: Engine::new(),
            sched: Sched {
                params,
                topology,
                timers: HashMap::new(),
                fifo: HashMap::new(),
                jitter: Jitter::new(params.seed, params.link_jitter_ns),
                completions: Vec::new(),
            },
        }
    }

    pub fn params(&self) -> &SimParams {
        &self.sched.params
    }

    pub fn now(&self) -> u64 {
        self.engine.now().ns()
    }

    pub fn stats(&self) -> RunStats {
        *self.engine.stats()
    }

    pub fn keep_trace(&mut self, keep: bool) {
        self.engine.tracer_mut().keep_lines(keep);
    }

    pub fn trace_lines(&self) -> &[String] {
        self.engine.tracer().lines()
    }

    pub fn trace_hash(&self) -> String {
        self.engine.tracer().hash_hex()
    }

    pub fn line_size(&self) -> usize {
        self.sched.params.dir.line_size
    }

    /// Open a device channel and put the CPU side in its quiescent state.
    pub fn open_channel(
        &mut self,
        variant: Variant,
        n: usize,
        compute: ComputeFunction,
    ) -> Result<usize> {
        let opened = self.world.device.open_channel(variant, n, compute)?;
        let line_size = self.line_size();
        for line in opened.cpu_exclusive {
            self.world.cpu_mut(NodeId::CPU0).cache.install(
                line,
                CacheLineState::Exclusive,
                LineData::zeroed(line_size),
            );
            self.world.device.dir.install_owner(line, NodeId::CPU0);
        }
        Ok(opened.id)
    }

    /// Place `line` in `state` at `node` without any messages, keeping the
    /// directory in agreement.
    pub fn install_line(
        &mut self,
        node: NodeId,
        line: LineAddr,
        state: CacheLineState,
        data: LineData,
    ) {
        self.world.device.dir.set_memory(&line, data.clone());
        self.world.cpu_mut(node).cache.install(line, state, data);
        match state {
            CacheLineState::Exclusive | CacheLineState::Modified => {
                self.world.device.dir.install_owner(line, node)
            }
            CacheLineState::Shared => self.world.device.dir.install_sharer(line, node),
            _ => {}
        }
    }

    pub fn hazard(&self, ch: usize) -> bool {
        self.world.device.channels[ch].hazard
    }

    /// A device-homed line outside any channel.
    pub fn plain_line(&mut self) -> LineAddr {
        self.world.device.alloc_lines(1)[0]
    }

    pub fn set_device_stall(&mut self, line: &LineAddr, ns: u64) {
        self.world.device.stall_once(line, ns);
    }

    /// Load `ops` into CPU `node` and run until nothing is left to do or the
    /// run limit is reached.
    pub fn execute(&mut self, node: NodeId, ops: Vec<CpuOp>) -> Result<Run> {
        self.execute_all(vec![(node, ops)], |_| Ok(()))
    }

    /// Start several CPU programs at the same instant and run them together.
    pub fn execute_all(
        &mut self,
        programs: Vec<(NodeId, Vec<CpuOp>)>,
        setup: impl FnOnce(&mut Self) -> Result<()>,
    ) -> Result<Run> {
        let start = self.now();
        let before = self.stats();
        let retries_before = self.world.device.retries_sent;
        let first_completion = self.sched.completions.len();
        setup(self)?;
        let mut fx = Vec::new();
        for (node, ops) in programs {
            let cpu = self.world.cpu_mut(node);
            cpu.load_program(ops);
            cpu.step(start, &mut fx);
        }
        self.sched.apply(&mut self.engine, fx)?;
        let limit = SimTime(start.saturating_add(self.sched.params.run_limit_ns));
        let Machine {
            world,
            engine,
            sched,
        } = self;
        let check = sched.params.check_swmr;
        let outcome = engine.run_until_quiescent(limit, |eng, ev| {
            let now = eng.now().ns();
            let mut fx = Vec::new();
            match ev.payload {
                Event::Deliver(env) => {
                    eng.tracer_mut().record(&env.trace_line(now));
                    let line = env.msg.line;
                    world.handle_message(now, env, &mut fx)?;
                    if check {
                        world.check_swmr(&line)?;
                    }
                }
                Event::Local(node, lev) => world.handle_local(now, node, lev, &mut fx)?,
                Event::Timer(key) => {
                    sched.timers.remove(&key);
                    world.fire_timer(now, key, &mut fx)?;
                }
            }
            sched.apply(eng, fx)
        })?;
        Ok(Run {
            start,
            stats: outcome.stats.since(&before),
            stalled: outcome.stalled,
            completions: self.sched.completions[first_completion..].to_vec(),
            retries: self.world.device.retries_sent - retries_before,
        })
    }

    fn completed(&self, run: &Run, node: NodeId, tag: u32) -> Result<u64> {
        if run.stalled {
            return Err(Error::Stalled(self.sched.params.run_limit_ns));
        }
        run.finished_at(node, tag)
            .ok_or_else(|| Error::protocol(format!("{node} never reached mark {tag}")))
    }

    fn read_lines(&self, lines: &[LineAddr]) -> Vec<u8> {
        let cpu = self.world.cpu(NodeId::CPU0);
        let mut out = Vec::with_capacity(lines.len() * self.line_size());
        for l in lines {
            match cpu.cache.data(l) {
                Some(d) => out.extend_from_slice(d.as_bytes()),
                None => out.extend(std::iter::repeat_n(0, self.line_size())),
            }
        }
        out
    }

    fn store_ops(lines: &[LineAddr], bytes: &[u8], line_size: usize) -> Vec<CpuOp> {
        bytes
            .chunks(line_size)
            .zip(lines)
            .map(|(chunk, line)| CpuOp::Store {
                line: *line,
                offset: 0,
                bytes: chunk.to_vec(),
            })
            .collect()
    }

    /// Send `request` through a bidirectional channel and read back the response.
    pub fn invoke(&mut self, ch: usize, request: &[u8]) -> Result<Transfer> {
        self.invoke_ordered(ch, request, false)
    }

    /// Like [`Machine::invoke`], optionally issuing the prefetches in reverse order.
    pub fn invoke_ordered(
        &mut self,
        ch: usize,
        request: &[u8],
        reversed: bool,
    ) -> Result<Transfer> {
        let line_size = self.line_size();
        let c = &self.world.device.channels[ch];
        if c.variant() != Variant::Bidirectional {
            return Err(Error::WrongVariant(ch));
        }
        let max = c.n() * line_size;
        if request.len() > max {
            return Err(Error::PayloadTooLarge {
                len: request.len(),
                max,
            });
        }
        let data_lines = c.data_lines();
        let req_lines = c.request_lines();
        let mut ops = vec![CpuOp::BeginEpoch];
        ops.extend(Self::store_ops(&data_lines, request, line_size));
        ops.push(CpuOp::Barrier);
        let mut order = req_lines.clone();
        if reversed {
            order.reverse();
        }
        ops.extend(order.into_iter().map(|line| CpuOp::Prefetch {
            line,
            want: Grant::Shared,
        }));
        ops.push(CpuOp::AwaitLines {
            lines: req_lines.clone(),
        });
        if !self.sched.params.device.exclusive_return {
            ops.push(CpuOp::Own {
                lines: req_lines.clone(),
            });
        }
        ops.push(CpuOp::Mark(MARK_DONE));
        let len = request.len();
        let run = self.execute_all(vec![(NodeId::CPU0, ops)], |m| {
            m.world.device.channels[ch].request_len = len;
            Ok(())
        })?;
        let end = self.completed(&run, NodeId::CPU0, MARK_DONE)?;
        let mut data = self.read_lines(&req_lines);
        data.truncate(self.world.device.channels[ch].last_response_len);
        Ok(Transfer {
            latency_ns: end - run.start,
            data,
            one_way_traversals: run.stats.one_way_traversals,
            messages: run.stats.messages_on_link,
            retries: run.retries,
        })
    }

    /// Invoke with a request of exactly `n` whole lines.
    pub fn invoke_multi(&mut self, ch: usize, lines: &[LineData]) -> Result<Transfer> {
        let n = self.world.device.channels[ch].n();
        if lines.len() != n {
            return Err(Error::InvalidArgument(format!(
                "request has {} lines, group has {n}",
                lines.len()
            )));
        }
        let bytes: Vec<u8> = lines.iter().flat_map(|l| l.as_bytes().to_vec()).collect();
        self.invoke(ch, &bytes)
    }

    fn frame_capacity(&self, ch: usize) -> usize {
        let line_size = self.line_size();
        let bank = self.world.device.channels[ch].bank().len();
        (bank * line_size).max(line_size - FRAME_HEADER)
    }

    /// Write a frame to a device-bound channel. Latency runs until the device
    /// has the frame on the wire.
    pub fn send(&mut self, ch: usize, frame: &[u8]) -> Result<Transfer> {
        let line_size = self.line_size();
        let c = &self.world.device.channels[ch];
        if c.variant() != Variant::WriteToDevice {
            return Err(Error::WrongVariant(ch));
        }
        let max = self.frame_capacity(ch);
        if frame.len() > max {
            return Err(Error::OversizedFrame {
                len: frame.len(),
                max,
            });
        }
        let c = &self.world.device.channels[ch];
        let k = frame_lines(frame.len(), line_size);
        let mut header = (frame.len() as u64).to_le_bytes().to_vec();
        if k == 0 {
            header.extend_from_slice(frame);
        }
        let mut ops = vec![CpuOp::BeginEpoch];
        ops.extend(Self::store_ops(&c.bank()[..k], frame, line_size));
        ops.push(CpuOp::Store {
            line: c.pair.data_line(),
            offset: 0,
            bytes: header,
        });
        ops.push(CpuOp::Barrier);
        ops.push(CpuOp::Load {
            line: c.pair.request_line(),
        });
        ops.push(CpuOp::Mark(MARK_DONE));
        let run = self.execute(NodeId::CPU0, ops)?;
        let end = self.completed(&run, NodeId::DEVICE, ch as u32)?;
        self.completed(&run, NodeId::CPU0, MARK_DONE)?;
        let data = self.world.device.channels[ch]
            .transmitted
            .last()
            .cloned()
            .unwrap_or_default();
        Ok(Transfer {
            latency_ns: end - run.start,
            data,
            one_way_traversals: run.stats.one_way_traversals,
            messages: run.stats.messages_on_link,
            retries: run.retries,
        })
    }

    /// Receive `frame` from a host-bound channel. The frame reaches the device
    /// `arrive_after_ns` after the CPU starts waiting; latency is measured
    /// from that arrival. The CPU knows the frame length in advance.
    pub fn recv(&mut self, ch: usize, frame: &[u8], arrive_after_ns: u64) -> Result<Transfer> {
        let line_size = self.line_size();
        let c = &self.world.device.channels[ch];
        if c.variant() != Variant::ReadFromDevice {
            return Err(Error::WrongVariant(ch));
        }
        let max = self.frame_capacity(ch);
        if frame.len() > max {
            return Err(Error::OversizedFrame {
                len: frame.len(),
                max,
            });
        }
        let c = &self.world.device.channels[ch];
        let k = frame_lines(frame.len(), line_size);
        let control = c.pair.request_line();
        let mut lines = vec![control];
        lines.extend_from_slice(&c.bank()[..k]);
        let mut ops = vec![CpuOp::BeginEpoch];
        ops.extend(lines.iter().map(|&line| CpuOp::Prefetch {
            line,
            want: Grant::Shared,
        }));
        ops.push(CpuOp::AwaitLines {
            lines: lines.clone(),
        });
        ops.push(CpuOp::Mark(MARK_DONE));
        let frame = frame.to_vec();
        let run = self.execute_all(vec![(NodeId::CPU0, ops)], |m| {
            m.world.device.channels[ch].incoming.push_back(frame);
            let fx = vec![Effect::Local {
                node: NodeId::DEVICE,
                ev: LocalEvent::FrameArrival { channel: ch },
                delay: arrive_after_ns,
            }];
            m.sched.apply(&mut m.engine, fx)
        })?;
        let end = self.completed(&run, NodeId::CPU0, MARK_DONE)?;
        let bytes = self.read_lines(&lines);
        let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let data = if k == 0 {
            bytes[FRAME_HEADER..FRAME_HEADER + len.min(line_size - FRAME_HEADER)].to_vec()
        } else {
            bytes[line_size..line_size + len.min(k * line_size)].to_vec()
        };
        Ok(Transfer {
            latency_ns: end - (run.start + arrive_after_ns),
            data,
            one_way_traversals: run.stats.one_way_traversals,
            messages: run.stats.messages_on_link,
            retries: run.retries,
        })
    }

    /// A single CPU load of `line`.
    pub fn load(&mut self, line: LineAddr) -> Result<Transfer> {
        let run = self.execute(
            NodeId::CPU0,
            vec![CpuOp::Load { line }, CpuOp::Mark(MARK_DONE)],
        )?;
        let end = self.completed(&run, NodeId::CPU0, MARK_DONE)?;
        let data = self.read_lines(&[line]);
        Ok(Transfer {
            latency_ns: end - run.start,
            data,
            one_way_traversals: run.stats.one_way_traversals,
            messages: run.stats.messages_on_link,
            retries: run.retries,
        })
    }

    pub fn check_quiescent(&self) -> Result<()> {
        self.world.check_all_swmr()?;
        self.world.check_agreement()
    }
}

/// The channel size needed for a payload of `size` bytes.
pub fn lines_for(size: usize, line_size: usize) -> usize {
    size.div_ceil(line_size).max(1)
}
