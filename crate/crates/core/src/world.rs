//! The set of nodes taking part in a run, independent of how time advances.
//! Both the event-driven machine and the exhaustive explorer drive a `World`.

use crate::coherence::{
    CacheLineState, CpuNode, Effects, Envelope, LineAddr, LocalEvent, NodeId, TimerKey,
};
use crate::device::DeviceNode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    /// One CPU on socket 0, the device (home of all lines) on socket 1.
    CpuDevice,
    /// Two CPUs on different sockets; the home sits next to CPU1.
    TwoCpu,
}

impl Topology {
    pub fn socket(self, node: NodeId) -> u8 {
        match (self, node) {
            (_, NodeId::CPU0) => 0,
            (Topology::CpuDevice, _) => 1,
            (Topology::TwoCpu, _) => 1,
        }
    }

    pub fn cpu_count(self) -> usize {
        match self {
            Topology::CpuDevice => 1,
            Topology::TwoCpu => 2,
        }
    }

    pub fn crosses(self, a: NodeId, b: NodeId) -> bool {
        self.socket(a) != self.socket(b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct World {
    pub cpus: Vec<CpuNode>,
    pub device: DeviceNode,
    pub topology: Topology,
}

impl World {
    pub fn cpu(&self, id: NodeId) -> &CpuNode {
        &self.cpus[id.0 as usize]
    }

    pub fn cpu_mut(&mut self, id: NodeId) -> &mut CpuNode {
        &mut self.cpus[id.0 as usize]
    }

    pub fn handle_message(&mut self, now: u64, env: Envelope, fx: &mut Effects) -> Result<()> {
        if env.dst == self.device.id() {
            self.device.on_message(now, env, fx)
        } else {
            let idx = env.dst.0 as usize;
            let cpu = self
                .cpus
                .get_mut(idx)
                .ok_or_else(|| Error::protocol(format!("no node {}", env.dst)))?;
            cpu.on_message(now, env, fx)
        }
    }

    pub fn handle_local(
        &mut self,
        now: u64,
        node: NodeId,
        ev: LocalEvent,
        fx: &mut Effects,
    ) -> Result<()> {
        if node == self.device.id() {
            self.device.on_local(now, ev, fx)
        } else {
            self.cpu_mut(node).on_wake(now, fx);
            Ok(())
        }
    }

    pub fn fire_timer(&mut self, now: u64, key: TimerKey, fx: &mut Effects) -> Result<()> {
        match key {
            TimerKey::Guard { txn } => self.device.on_guard(now, txn, fx),
            TimerKey::MachineCheck { node, line } => self.cpu(node).on_timeout(line),
        }
    }

    /// Run every CPU program until it blocks.
    pub fn step_cpus(&mut self, now: u64, fx: &mut Effects) {
        for cpu in &mut self.cpus {
            cpu.step(now, fx);
        }
    }

    /// Every node's current state for `line`, device last.
    pub fn states(&self, line: &LineAddr) -> Vec<(NodeId, CacheLineState)> {
        let mut v: Vec<_> = self
            .cpus
            .iter()
            .map(|c| (c.id, c.cache.state(line)))
            .collect();
        v.push((self.device.id(), self.device.local_state(line)));
        v
    }

    /// Single writer or multiple readers for `line` right now.
    pub fn check_swmr(&self, line: &LineAddr) -> Result<()> {
        let states = self.states(line);
        let writers: Vec<_> = states.iter().filter(|(_, s)| s.is_writable()).collect();
        let valid = states.iter().filter(|(_, s)| s.is_valid()).count();
        if writers.len() > 1 || (writers.len() == 1 && valid > 1) {
            let detail = states
                .iter()
                .map(|(n, s)| format!("{n}={}", s.letter()))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(Error::Swmr {
                line: line.index,
                detail,
            });
        }
        Ok(())
    }

    /// Every line any node knows about.
    pub fn known_lines(&self) -> Vec<LineAddr> {
        let mut v: Vec<LineAddr> = self.device.dir.entries().map(|e| e.line).collect();
        for cpu in &self.cpus {
            v.extend(cpu.cache.lines.keys().copied());
        }
        v.sort();
        v.dedup();
        v
    }

    pub fn check_all_swmr(&self) -> Result<()> {
        for line in self.known_lines() {
            self.check_swmr(&line)?;
        }
        Ok(())
    }

    /// At quiescence the directory's view matches every cache.
    pub fn check_agreement(&self) -> Result<()> {
        for line in self.known_lines() {
            let entry = self.device.dir.entry(&line);
            for cpu in &self.cpus {
                let state = cpu.cache.state(&line);
                let recorded = match entry {
                    None => CacheLineState::Invalid,
                    Some(e) if e.owner == Some(cpu.id) => {
                        if state == CacheLineState::Modified {
                            CacheLineState::Modified
                        } else {
                            CacheLineState::Exclusive
                        }
                    }
                    Some(e) if e.supplier == Some(cpu.id) => CacheLineState::Owned,
                    Some(e) if e.sharers.contains(&cpu.id) => CacheLineState::Shared,
                    Some(_) => CacheLineState::Invalid,
                };
                if recorded != state {
                    return Err(Error::protocol(format!(
                        "directory records {} for line {} at {} but cache holds {}",
                        recorded.letter(),
                        line.index,
                        cpu.id,
                        state.letter()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.cpus.iter().all(CpuNode::is_idle) && !self.device.is_busy()
    }
}
