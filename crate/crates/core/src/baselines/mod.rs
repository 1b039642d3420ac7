//! Closed-form cost models for PCIe programmed I/O and descriptor-ring DMA.

pub mod dma;
pub mod pcie;
pub mod ring;

pub use dma::{DmaJitter, DmaMode, DmaParams};
pub use pcie::PcieParams;
pub use ring::{Descriptor, DescriptorRing};
