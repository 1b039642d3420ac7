use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u8);

impl NodeId {
    pub const CPU0: NodeId = NodeId(0);
    pub const CPU1: NodeId = NodeId(1);
    /// The device, which is also the home of every line in the simulated
    /// address space (in the two-CPU topology it acts as a plain home agent).
    pub const DEVICE: NodeId = NodeId(2);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NodeId::DEVICE => f.write_str("dev"),
            NodeId(n) => write!(f, "cpu{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CacheLineState {
    Invalid,
    Shared,
    Exclusive,
    Modified,
    Owned,
}

impl CacheLineState {
    pub fn is_valid(self) -> bool {
        self != CacheLineState::Invalid
    }

    pub fn is_writable(self) -> bool {
        matches!(self, CacheLineState::Exclusive | CacheLineState::Modified)
    }

    /// Holds data the home does not (must supply it on a snoop).
    pub fn is_dirty_supplier(self) -> bool {
        matches!(
            self,
            CacheLineState::Exclusive | CacheLineState::Modified | CacheLineState::Owned
        )
    }

    pub fn letter(self) -> char {
        match self {
            CacheLineState::Invalid => 'I',
            CacheLineState::Shared => 'S',
            CacheLineState::Exclusive => 'E',
            CacheLineState::Modified => 'M',
            CacheLineState::Owned => 'O',
        }
    }
}

/// A cache-line address. `tad` is derived from `index` at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LineAddr {
    pub index: u64,
    pub home: NodeId,
    pub tad: u16,
}

impl LineAddr {
    pub fn new(index: u64, home: NodeId, tad_count: u16) -> Self {
        let tad_count = tad_count.max(1);
        LineAddr {
            index,
            home,
            tad: (index % u64::from(tad_count)) as u16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LineData(Vec<u8>);

impl LineData {
    pub fn zeroed(line_size: usize) -> Self {
        LineData(vec![0; line_size])
    }

    /// Copy `bytes` into a zero-padded line.
    pub fn from_slice(bytes: &[u8], line_size: usize) -> Result<Self> {
        if bytes.len() > line_size {
            return Err(Error::PayloadTooLarge {
                len: bytes.len(),
                max: line_size,
            });
        }
        let mut v = vec![0; line_size];
        v[..bytes.len()].copy_from_slice(bytes);
        Ok(LineData(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn write(&mut self, offset: usize, bytes: &[u8]) {
        self.0[offset..offset + bytes.len()].copy_from_slice(bytes);
    }

    /// Sequence word stored little-endian in the first eight bytes.
    pub fn seq(&self) -> u64 {
        let mut b = [0u8; 8];
        let n = self.0.len().min(8);
        b[..n].copy_from_slice(&self.0[..n]);
        u64::from_le_bytes(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Grant {
    Shared,
    Exclusive,
}

impl From<Grant> for CacheLineState {
    fn from(g: Grant) -> Self {
        match g {
            Grant::Shared => CacheLineState::Shared,
            Grant::Exclusive => CacheLineState::Exclusive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsgKind {
    ReqShared,
    ReqExclusive,
    ReqUpgrade,
    InvalidateToInvalid,
    DowngradeToShared,
    RespData,
    RespAck,
    RetryLater,
    WriteBack,
}

impl MsgKind {
    pub fn is_request(self) -> bool {
        matches!(
            self,
            MsgKind::ReqShared | MsgKind::ReqExclusive | MsgKind::ReqUpgrade | MsgKind::WriteBack
        )
    }

    pub fn is_snoop(self) -> bool {
        matches!(
            self,
            MsgKind::InvalidateToInvalid | MsgKind::DowngradeToShared
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::ReqShared => "ReqShared",
            MsgKind::ReqExclusive => "ReqExclusive",
            MsgKind::ReqUpgrade => "ReqUpgrade",
            MsgKind::InvalidateToInvalid => "InvalidateToInvalid",
            MsgKind::DowngradeToShared => "DowngradeToShared",
            MsgKind::RespData => "RespData",
            MsgKind::RespAck => "RespAck",
            MsgKind::RetryLater => "RetryLater",
            MsgKind::WriteBack => "WriteBack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TxnId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CoherenceMessage {
    pub kind: MsgKind,
    pub line: LineAddr,
    pub granted_state: Option<Grant>,
    pub data: Option<LineData>,
    pub txn: TxnId,
}

impl CoherenceMessage {
    pub fn new(kind: MsgKind, line: LineAddr, txn: TxnId) -> Self {
        CoherenceMessage {
            kind,
            line,
            granted_state: None,
            data: None,
            txn,
        }
    }

    pub fn with_data(mut self, data: LineData) -> Self {
        self.data = Some(data);
        self
    }

    pub fn with_grant(mut self, grant: Grant) -> Self {
        self.granted_state = Some(grant);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::protocol(format!("{:?}: {why}", self.kind)));
        match self.kind {
            MsgKind::RespData if self.data.is_none() || self.granted_state.is_none() => {
                bad("response data needs payload and granted state")
            }
            MsgKind::ReqShared | MsgKind::ReqExclusive | MsgKind::ReqUpgrade
                if self.data.is_some() =>
            {
                bad("requests carry no data")
            }
            MsgKind::RetryLater if self.data.is_some() => bad("retry carries no data"),
            MsgKind::WriteBack if self.data.is_none() => bad("write-back needs data"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub src: NodeId,
    pub dst: NodeId,
    pub msg: CoherenceMessage,
}

impl Envelope {
    /// `time,src,dst,kind,line,state` with `-` for an absent granted state.
    pub fn trace_line(&self, time: u64) -> String {
        let state = match self.msg.granted_state {
            Some(Grant::Shared) => "S",
            Some(Grant::Exclusive) => "E",
            None => "-",
        };
        format!(
            "{time},{},{},{},{},{state}",
            self.src,
            self.dst,
            self.msg.kind.name(),
            self.msg.line.index
        )
    }
}

/// Self-addressed events a node schedules for itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LocalEvent {
    /// A CPU core's `Delay` or poll back-off elapsed.
    Wake,
    ComputeDone {
        channel: usize,
    },
    StageDone {
        channel: usize,
    },
    Egress {
        channel: usize,
    },
    FrameArrival {
        channel: usize,
    },
    StallDone {
        txn: TxnId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimerKey {
    /// Answer a deferred request with RetryLater before the requester times out.
    Guard { txn: TxnId },
    /// The requester's own timeout for an outstanding request.
    MachineCheck { node: NodeId, line: u64 },
}

/// Output of a node step; the driver turns these into scheduled events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send {
        env: Envelope,
        delay: u64,
    },
    Local {
        node: NodeId,
        ev: LocalEvent,
        delay: u64,
    },
    Arm {
        key: TimerKey,
        node: NodeId,
        delay: u64,
    },
    Disarm(TimerKey),
    Completed {
        node: NodeId,
        tag: u32,
    },
}

pub type Effects = Vec<Effect>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tad_mapping_alternates_for_consecutive_lines() {
        for tads in 2..=64u16 {
            for i in 0..500u64 {
                let a = LineAddr::new(i, NodeId::DEVICE, tads);
                let b = LineAddr::new(i + 1, NodeId::DEVICE, tads);
                assert_ne!(a.tad, b.tad);
            }
        }
    }

    #[test]
    fn message_shape_rules() {
        let line = LineAddr::new(0, NodeId::DEVICE, 4);
        let ok = CoherenceMessage::new(MsgKind::RespData, line, TxnId(1))
            .with_data(LineData::zeroed(128))
            .with_grant(Grant::Exclusive);
        assert!(ok.validate().is_ok());
        assert!(CoherenceMessage::new(MsgKind::RespData, line, TxnId(1))
            .validate()
            .is_err());
        assert!(CoherenceMessage::new(MsgKind::ReqUpgrade, line, TxnId(0))
            .with_data(LineData::zeroed(128))
            .validate()
            .is_err());
        assert!(CoherenceMessage::new(MsgKind::RetryLater, line, TxnId(0))
            .validate()
            .is_ok());
    }

    #[test]
    fn line_data_pads_and_rejects_oversize() {
        let d = LineData::from_slice(&[1, 2, 3], 8).unwrap();
        assert_eq!(d.as_bytes(), &[1, 2, 3, 0, 0, 0, 0, 0]);
        assert!(LineData::from_slice(&[0; 9], 8).is_err());
        let mut s = LineData::zeroed(128);
        s.write(0, &42u64.to_le_bytes());
        assert_eq!(s.seq(), 42);
    }
}
