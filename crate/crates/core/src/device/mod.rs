//! Device-side endpoint: channels built from device-homed lines and the node
//! that serves them.

pub mod channel;
pub mod node;

pub use channel::{
    frame_lines, Channel, ComputeFunction, DeferReason, DeviceAction, EpochState, LinePairChannel,
    MultiLineGroup, OverflowSet, TimeoutGuard, Variant, FRAME_HEADER,
};
pub use node::{DeviceNode, DeviceParams, NicTiming, OpenedChannel};
