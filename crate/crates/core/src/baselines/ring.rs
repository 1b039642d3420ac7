use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub addr: u64,
    pub len: u32,
    pub flags: u16,
}

/// Fixed-capacity producer/consumer ring of descriptors.
#[derive(Debug, Clone)]
pub struct DescriptorRing {
    slots: Vec<Option<Descriptor>>,
    head: usize,
    tail: usize,
    len: usize,
}

impl DescriptorRing {
    pub fn new(capacity: usize) -> Self {
        DescriptorRing {
            slots: vec![None; capacity.max(1)],
            head: 0,
            tail: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.slots.len()
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn tail(&self) -> usize {
        self.tail
    }

    /// Returns the slot the descriptor was written to.
    pub fn push(&mut self, d: Descriptor) -> Result<usize> {
        if self.is_full() {
            return Err(Error::WouldBlock);
        }
        let slot = self.tail;
        self.slots[slot] = Some(d);
        self.tail = (self.tail + 1) % self.slots.len();
        self.len += 1;
        Ok(slot)
    }

    pub fn pop(&mut self) -> Result<Descriptor> {
        if self.is_empty() {
            return Err(Error::Empty);
        }
        let d = self.slots[self.head].take().expect("occupied slot");
        self.head = (self.head + 1) % self.slots.len();
        self.len -= 1;
        Ok(d)
    }

    /// Remaining descriptors in FIFO order.
    pub fn drain(&mut self) -> VecDeque<Descriptor> {
        std::iter::from_fn(|| self.pop().ok()).collect()
    }
}
