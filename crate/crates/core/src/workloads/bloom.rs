//! Byte-sequential shift/add/xor hashes, one independent lane per hash.

use crate::device::ComputeFunction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloomParams {
    pub k: usize,
    pub element_size: usize,
    pub cpu_per_element_ns: f64,
    pub dev_per_element_ns: f64,
}

impl Default for BloomParams {
    fn default() -> Self {
        BloomParams {
            k: 8,
            element_size: 128,
            cpu_per_element_ns: 2600.0,
            dev_per_element_ns: 1700.0,
        }
    }
}

const SHIFTS: [u32; 8] = [5, 6, 7, 9, 10, 11, 13, 14];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Odd starting state of lane `i`.
pub fn lane_seed(i: usize) -> u64 {
    splitmix64(0x5EED + i as u64) | 1
}

pub fn lane_shift(i: usize) -> u32 {
    SHIFTS[i % SHIFTS.len()]
}

/// One step of a lane: `((state << s) + state) ^ byte`.
pub fn lane_step(state: u64, shift: u32, byte: u8) -> u64 {
    (state << shift).wrapping_add(state) ^ u64::from(byte)
}

pub fn bloom_hashes(element: &[u8], params: &BloomParams) -> Result<Vec<u64>> {
    if element.len() != params.element_size {
        return Err(Error::ElementLength {
            expected: params.element_size,
            got: element.len(),
        });
    }
    Ok((0..params.k)
        .map(|i| {
            let s = lane_shift(i);
            element
                .iter()
                .fold(lane_seed(i), |h, &b| lane_step(h, s, b))
        })
        .collect())
}

/// Device function hashing a batch of concatenated elements into `k`
/// little-endian words per element.
pub fn bloom_compute(params: BloomParams) -> ComputeFunction {
    let per_byte = params.dev_per_element_ns / params.element_size.max(1) as f64;
    ComputeFunction::new("bloom", move |input: &[u8]| {
        input
            .chunks_exact(params.element_size)
            .flat_map(|e| {
                bloom_hashes(e, &params)
                    .expect("exact chunk")
                    .into_iter()
                    .flat_map(u64::to_le_bytes)
            })
            .collect()
    })
    .with_latency(0, per_byte)
}
