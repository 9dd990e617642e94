//! Scalar reference chunker, written from the format description only.
//!
//! Deliberately naive: the hash restarts at every chunk start and runs over
//! every byte, the gear table is rebuilt from SHA-256, and masks are built bit
//! by bit.

use sha2::{Digest, Sha256};

pub fn gear_table() -> Vec<u64> {
    (0..=255u8)
        .map(|i| {
            let mut h = Sha256::new();
            h.update(b"dsr-gear-v1");
            h.update([i]);
            let d = h.finalize();
            let mut v = 0u64;
            for b in &d[..8] {
                v = (v << 8) | *b as u64;
            }
            v
        })
        .collect()
}

fn high_mask(bits: u32) -> u64 {
    let mut m = 0u64;
    for k in 0..bits.min(64) {
        m |= 1u64 << (63 - k);
    }
    m
}

fn log2(mut n: usize) -> u32 {
    let mut k = 0;
    while n > 1 {
        n /= 2;
        k += 1;
    }
    k
}

/// `(offset, length)` pairs.
pub fn boundaries(data: &[u8], min: usize, avg: usize, max: usize) -> Vec<(usize, usize)> {
    let gear = gear_table();
    let small = high_mask(log2(avg) + 1);
    let large = high_mask(log2(avg).saturating_sub(1));
    let mut out = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let rest = data.len() - start;
        let mut len = rest.min(max);
        if rest > min {
            let mut h = 0u64;
            for i in 0..rest.min(max) {
                h = h.wrapping_mul(2).wrapping_add(gear[data[start + i] as usize]);
                let l = i + 1;
                if l < min {
                    continue;
                }
                let mask = if l <= avg { small } else { large };
                if h & mask == 0 {
                    len = l;
                    break;
                }
            }
        } else {
            len = rest;
        }
        out.push((start, len));
        start += len;
    }
    out
}
