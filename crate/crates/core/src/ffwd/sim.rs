use crate::coherence::{CacheLineState, CpuOp, LineAddr, LineData, NodeId};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::machine::{Machine, SimParams, MARK_DONE};
use crate::world::Topology;

/// Byte offset of the payload after the sequence word.
pub const PAYLOAD_OFFSET: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FfSimConfig {
    /// Delay between successive 8-byte stores of the sender.
    pub sender_gap_ns: u64,
    /// Receiver back-off after losing the line; 0 re-polls immediately.
    pub poll_interval_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FfSimMessage {
    pub seq: u64,
    pub latency_ns: u64,
    pub one_way_traversals: u64,
    pub payload: Vec<u8>,
}

impl FfSimMessage {
    pub fn round_trips(&self) -> u64 {
        self.one_way_traversals / 2
    }
}

/// A single-line channel from CPU0 (sender) to CPU1 (receiver). The line's
/// home sits on the receiver's socket.
#[derive(Debug)]
pub struct FfSim {
    machine: Machine,
    line: LineAddr,
    cfg: FfSimConfig,
    next_seq: u64,
}

impl FfSim {
    pub fn new(mut params: SimParams, cfg: FfSimConfig) -> Self {
        params.dir.keep_owned = true;
        params.cpu.owned_on_downgrade = true;
        params.cpu.poll_interval_ns = cfg.poll_interval_ns;
        let mut machine = Machine::new(params, Topology::TwoCpu);
        let line = machine.plain_line();
        let size = machine.line_size();
        machine.install_line(
            NodeId::CPU1,
            line,
            CacheLineState::Shared,
            LineData::zeroed(size),
        );
        FfSim {
            machine,
            line,
            cfg,
            next_seq: 1,
        }
    }

    pub fn from_config(cfg: &Config, sender_gap_ns: u64) -> Self {
        FfSim::new(
            cfg.sim_params(),
            FfSimConfig {
                sender_gap_ns,
                poll_interval_ns: cfg.u64("ffwd.poll_interval_ns"),
            },
        )
    }

    pub fn max_payload(&self) -> usize {
        self.machine.line_size() - PAYLOAD_OFFSET
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    /// Deliver one message; latency runs from the sender starting to the
    /// receiver seeing the new sequence number.
    pub fn send(&mut self, payload: &[u8]) -> Result<FfSimMessage> {
        if payload.len() > self.max_payload() {
            return Err(Error::PayloadTooLarge {
                len: payload.len(),
                max: self.max_payload(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let line = self.line;
        let mut sender = vec![CpuOp::Own { lines: vec![line] }];
        if self.cfg.sender_gap_ns == 0 {
            sender.push(CpuOp::Store {
                line,
                offset: PAYLOAD_OFFSET,
                bytes: payload.to_vec(),
            });
        } else {
            for (i, word) in payload.chunks(8).enumerate() {
                sender.push(CpuOp::Store {
                    line,
                    offset: PAYLOAD_OFFSET + 8 * i,
                    bytes: word.to_vec(),
                });
                sender.push(CpuOp::Delay(self.cfg.sender_gap_ns));
            }
        }
        sender.push(CpuOp::Store {
            line,
            offset: 0,
            bytes: seq.to_le_bytes().to_vec(),
        });
        let receiver = vec![
            CpuOp::Poll {
                line,
                at_least: seq,
            },
            CpuOp::Mark(MARK_DONE),
        ];
        let run = self.machine.execute_all(
            vec![(NodeId::CPU1, receiver), (NodeId::CPU0, sender)],
            |_| Ok(()),
        )?;
        if run.stalled {
            return Err(Error::Stalled(self.machine.params().run_limit_ns));
        }
        let end = run
            .finished_at(NodeId::CPU1, MARK_DONE)
            .ok_or_else(|| Error::protocol("receiver never saw the message"))?;
        let data = self
            .machine
            .world
            .cpu(NodeId::CPU1)
            .cache
            .data(&line)
            .cloned()
            .ok_or_else(|| Error::protocol("receiver lost the line"))?;
        Ok(FfSimMessage {
            seq: data.seq(),
            latency_ns: end - run.start,
            one_way_traversals: run.stats.one_way_traversals,
            payload: data.as_bytes()[PAYLOAD_OFFSET..PAYLOAD_OFFSET + payload.len()].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_path_is_two_round_trips() {
        let mut ff = FfSim::new(SimParams::default(), FfSimConfig::default());
        for i in 0..5u8 {
            let m = ff.send(&[i; 32]).unwrap();
            assert_eq!(m.round_trips(), 2, "message {i}");
            assert_eq!(m.one_way_traversals, 4);
            assert_eq!(m.payload, vec![i; 32]);
            assert_eq!(m.seq, u64::from(i) + 1);
        }
        ff.machine().check_quiescent().unwrap();
    }

    #[test]
    fn slow_sender_wastes_round_trips() {
        let mut ff = FfSim::new(
            SimParams::default(),
            FfSimConfig {
                sender_gap_ns: 2000,
                poll_interval_ns: 0,
            },
        );
        let m = ff.send(&[9; 64]).unwrap();
        assert!(m.round_trips() >= 3, "{m:?}");
        assert_eq!(m.payload, vec![9; 64]);
    }
}
