//! Cache-line states, coherence messages, the CPU cache model and the home
//! directory.

pub mod cpu;
pub mod directory;
pub mod types;

pub use cpu::{CpuCacheModel, CpuNode, CpuOp, CpuParams, PendingStore};
pub use directory::{DirParams, Directory, DirectoryEntry, TadUnit, Txn, TxnKind};
pub use types::*;
