//! Content-defined chunking with a gear rolling hash.
//!
//! A cut is declared after the byte at which the 64-bit gear hash, taken over
//! every byte since the chunk start, has all bits of the active mask clear.
//! Masks select the most significant bits, so a cut depends only on the last
//! 64 bytes and boundaries resynchronise shortly after an edit. Chunks shorter
//! than `avg` use a mask one bit wider than `log2(avg)` and longer chunks one
//! bit narrower, which pulls the length distribution towards `avg`.
//!
//! Entry `i` of [`GEAR`] is the first eight bytes, read big-endian, of
//! `SHA-256("dsr-gear-v1" || [i])`.

use std::io::{self, Read};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KIB: usize = 1024;
pub const MIB: usize = 1024 * KIB;

pub static GEAR: [u64; 256] = [
    0x55ab3e419e0f6421, 0x58bac9361ed63fa5, 0x4581299eae969429, 0x3e50ab2889289c75,
    0xe493d8a36b6a91d5, 0xa3aa444017d915e8, 0x96ff288398f1efb6, 0xeedcdc21d7d4c5c4,
    0x78a809f026f08413, 0x274d5940b97f8e6e, 0x2b03dadcbee03829, 0x24bb48c4af241d48,
    0xb54cc96c4ecf5d06, 0x61bf7c0de808b601, 0xf5da2cedd5082ba6, 0x7ad56a976a529c6c,
    0x69eeaa4a47153dea, 0x9ac1229b453e9599, 0x3d67c41b8a562139, 0x8c65f88f71d48cf8,
    0x4969ccbf04a9fd94, 0x6f3e0b7764c2e7e5, 0xed7eadee3319776d, 0x45629bfaf12e63ff,
    0xb17c41a042e8a793, 0xcf140652f675053c, 0x3e8ddcd478ebfc9f, 0x36773dc0f735a177,
    0x751bd2e40da28715, 0xf0b693495d09a7f1, 0xf64917b4263f92ea, 0xe52d6706427c919c,
    0x56a65da45f786f73, 0x91d92ffae1165020, 0x3378fc8e9357e985, 0x888c333f3a7d3191,
    0x735ee67debf286ac, 0xccacc72acd94b4b7, 0x1d606f23d3b5a1a1, 0x2c83bce3bb550711,
    0x5c50fc3f20e6f536, 0x63455e336a52143a, 0xe8620fb391858a1a, 0x23a5c48422bf78a9,
    0x1cc91cb667cf3108, 0xbd70f596b8ac3475, 0xacf1aae88da25d1f, 0x489815b5a9615748,
    0xf77a9e3ceb7a34eb, 0x3530319420cf4e19, 0xccc0e6ea512261ed, 0x5e713ae2342c0217,
    0xaff2c4081a5d8179, 0xac773375c156d710, 0x1cd66e59fd60aac7, 0x5fd0f05bd6eb2d39,
    0x9f4a2ba6ce664e75, 0x45cd9c371ff34432, 0xa19baf300eee8231, 0xb3d3e38145f3784c,
    0x6c2010ac6b048e79, 0x6200d9fbc22aed44, 0xed8ab7dee5c73d3d, 0x6c82bc2fb6449704,
    0x4f5da35d5eb6d797, 0x4e7791dda89e7342, 0x452680328a92017d, 0xd101e90b62a80616,
    0x5c2cbe876c0f4021, 0x1aadb745fe863b0c, 0x6db42b003483d72e, 0xefa499937bdda2a9,
    0x2a4edd186e65c227, 0x25ffb7890872cbd8, 0x6eb8d303158cc19e, 0x939b6fab35c4b1fd,
    0x5b226c97412c1d6c, 0xedb927fca7fb4c9a, 0x4ee5c6a778f47d8d, 0x69365b5c1874dd2e,
    0x20d2a527b3247399, 0x37deb56faa8739fe, 0xd1cb398f60739429, 0x9bfadb957afa6c26,
    0xbe868f9723d73074, 0x489b596f3813c73a, 0x2f09311e878600ca, 0xf218909df807bccf,
    0x04042f46063e9dfe, 0x99f5b948c6f7d95b, 0xf63e095d43ec22f8, 0xf871407a0518e9e2,
    0x08221e3268418474, 0x9e569a10e78ec073, 0x54b58b2f97f4c7e5, 0x1b587e18ad9c026c,
    0xfbc2a2c9825260a8, 0x7c88cd2ad46e361d, 0xc66eac5d1171ab81, 0x37c8114209baf9e3,
    0x0317d31a2c12078c, 0xc9f40543f1f4532f, 0x4536cbaaf53cca15, 0x07527a6f10c35b0a,
    0xe01bcadc9f126127, 0x12853e04d4ff89ea, 0xd124809c196a393f, 0xcaf4a97be4d03a12,
    0x416c5e2413ae00a1, 0xbf058c4207000a86, 0x51928cc99454e6c3, 0x650691120cfff543,
    0x3b31943bbfdb509f, 0x670d95c2ff7b4454, 0x326660b09926638f, 0xd7c8ea3f4beb2416,
    0x6ac972f953a47524, 0x69cf75dc1bd5cf8e, 0xd39eb74fb4309b52, 0x0a76c3186585f13e,
    0xbd2a9edc84eba7c6, 0x8901c7d3a97b9831, 0xa7b28ce7cd458c1d, 0xf55967f5f606a01a,
    0x0fad888a048738bb, 0xcda706f1506590d2, 0x9d62ebc8c160c9c3, 0xc26dd835af75bfa8,
    0xdb0c836289e6f2ae, 0xf6e54a626b8bd382, 0x924e6ce5704f078b, 0xe4f69f7b54bab162,
    0xc6b6e8c42f694b6c, 0x97720471f6668074, 0x0052cfd94616d582, 0x7e26dcd76839d947,
    0xc67f7f49543ab640, 0xf72be7d27bec0450, 0xb78848dfb450a11e, 0xaa2e039a74bf0bc4,
    0x9c41fea7abc67dbc, 0x9044c2b998e0da00, 0x911700b5f5c6bbf7, 0x26bbfe2fff8ab3dc,
    0x5e795beb5b44601b, 0x783b85f53fea16bc, 0x544d46ce0366db4d, 0x402d6b61b9d118ec,
    0xd618c701acc2157d, 0xbd817f65e9760205, 0xe149293d6b51cb8f, 0x64385c94fcb255f6,
    0xdbad2406992e2d60, 0x3516265eed3dafe3, 0xa0a54ad24f9256f5, 0x1c6caa22a89f818e,
    0xabf30f2a6b851497, 0x79b333ead7fcb153, 0xcd51eaf5f879bd45, 0x6030599b800d2b80,
    0x37a5e7eb792c0d21, 0x30d43a1920b3c8ec, 0xbcd01d6e37c19847, 0x8a301f9f1318df81,
    0x244b71caabd68468, 0x1795e3e11cd6c316, 0x32457586893d3054, 0x0e49f4afa1789e2f,
    0x7d50d71a91ca8f19, 0xc5ffa38fbcb5ac54, 0x5239f1592951037f, 0x3b2a4e8946a4a10d,
    0x0a7564676506a070, 0xdff17cc85d477525, 0xee9817ca564e26be, 0x5ad2dfebb243e968,
    0x8c400c94e99c0117, 0x1fedfb7d25fcf83f, 0xeba217c085fdc949, 0x4daa4da4f6d728fe,
    0x510fe0d5344ffcc1, 0x231a9d231d76428a, 0x5ffb14754d67c67a, 0xca0bf2f0d38f7827,
    0x0d31ef0b045d49d0, 0x997674264acfd9e8, 0x3338e41bd51b12ca, 0xf816f5a595629f3e,
    0x2de5498e876ea33d, 0x6ea2929ef208fd3e, 0x622a501369a52f73, 0x104c4c5c07962f29,
    0x919d7b792847900a, 0x719f2653998a4934, 0x077fa5bc647eabb6, 0xeb4dc1d0e6a5c642,
    0xa42676cf27087385, 0x7c85cadf24774a8d, 0x4f35c4e3c0f799d1, 0x66b590e0e332623e,
    0x86699946aa92e3e5, 0xa3904f3b4fd81215, 0x67afa2743aaacd41, 0x965f1e578ec00076,
    0x813e534d49d092d9, 0xc6fa828a22381021, 0x3f4aaab819f3e4a9, 0x7a59ad836cfda63a,
    0xd42009332847b017, 0xed383b8078e2a1c2, 0xbac288b446b8a05e, 0xf2f9957d0bbd6648,
    0x4c948efdb40c3c28, 0x956d976e8e00e9de, 0x2a4147c200598540, 0xab38cbfe2391f96d,
    0xb915d7b6afc1041e, 0x625475fdbd4a9ff2, 0x979d7cb940738f43, 0x0fb3f011be6fc152,
    0xc7fa602f58ccfc5e, 0xb11303295075f7be, 0xf4de5ab8e5ff905f, 0x8c870f5795d38a57,
    0xf8433f867d81a91d, 0x6efee2fd7ec3be8c, 0xbe6719599e66bc74, 0xcd2138dcf7f84d6e,
    0x0cd00be93d945800, 0x940d2ad8200b2308, 0xeeb0c44930ed12f7, 0x46d683b05ce9220d,
    0xfd44165720fa28cd, 0x3655e8a6f8e280b7, 0x27bc569eb981e634, 0x3462bacf489376e3,
    0x9f51a08b6cf14064, 0x4831c5f05402a2f3, 0xc3d87372c7718a47, 0x4f18d15251b5ccf8,
    0x592c887201ea617d, 0x9b6ad666ae6a0615, 0xaa52c2b014cc2f74, 0xe5ace1fcad6e0866,
    0xaf20f78ae7faeb6f, 0xab364aff014195d6, 0x3aa6ad4751a21f9c, 0x066931f9c3b354ab,
    0x198fe837454e7990, 0xd320afbea2f067a6, 0x980a13b7bb6a1bb7, 0xddd22536239f9346,
    0xa7f4a33209f53370, 0xd1419ce18732cae1, 0x98fce78f040cbc44, 0x9a46ec0558856a48,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub min: usize,
    pub avg: usize,
    pub max: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        ChunkParams {
            min: 256 * KIB,
            avg: MIB,
            max: 4 * MIB,
        }
    }
}

fn top_bits(n: u32) -> u64 {
    match n {
        0 => 0,
        n if n >= 64 => u64::MAX,
        n => u64::MAX << (64 - n),
    }
}

impl ChunkParams {
    pub fn new(min: usize, avg: usize, max: usize) -> Result<Self> {
        let p = ChunkParams { min, avg, max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min == 0 {
            return Err(Error::ChunkParams("min must be positive".into()));
        }
        if !(self.min <= self.avg && self.avg <= self.max) {
            return Err(Error::ChunkParams(format!(
                "need min <= avg <= max, got {}/{}/{}",
                self.min, self.avg, self.max
            )));
        }
        if !self.avg.is_power_of_two() {
            return Err(Error::ChunkParams(format!(
                "avg must be a power of two, got {}",
                self.avg
            )));
        }
        Ok(())
    }

    fn masks(&self) -> (u64, u64) {
        let bits = self.avg.trailing_zeros();
        (top_bits(bits + 1), top_bits(bits.saturating_sub(1)))
    }

    /// Length of the first chunk of `data`. When `data` is shorter than `max`
    /// it is treated as the end of the stream.
    pub fn cut_point(&self, data: &[u8]) -> usize {
        let n = data.len();
        if n <= self.min {
            return n;
        }
        let end = n.min(self.max);
        let (mask_small, mask_large) = self.masks();
        let mut hash = 0u64;
        // Bytes more than 64 positions back are shifted out of the hash.
        let warm = self.min.saturating_sub(64);
        for &b in &data[warm..self.min - 1] {
            hash = (hash << 1).wrapping_add(GEAR[b as usize]);
        }
        for (i, &b) in data.iter().enumerate().take(end).skip(self.min - 1) {
            hash = (hash << 1).wrapping_add(GEAR[b as usize]);
            let len = i + 1;
            let mask = if len <= self.avg { mask_small } else { mask_large };
            if hash & mask == 0 {
                return len;
            }
        }
        end
    }
}

/// Partitions `data` into `(offset, length)` chunks.
pub fn chunk_boundaries(data: &[u8], params: &ChunkParams) -> Result<Vec<(usize, usize)>> {
    params.validate()?;
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < data.len() {
        let len = params.cut_point(&data[offset..]);
        out.push((offset, len));
        offset += len;
    }
    Ok(out)
}

/// Splits a byte stream into chunks without holding more than about
/// `2 * max` bytes in memory.
pub struct StreamChunker<R> {
    reader: R,
    params: ChunkParams,
    buf: Vec<u8>,
    start: usize,
    eof: bool,
}

impl<R: Read> StreamChunker<R> {
    pub fn new(reader: R, params: ChunkParams) -> Result<Self> {
        params.validate()?;
        Ok(StreamChunker {
            reader,
            params,
            buf: Vec::new(),
            start: 0,
            eof: false,
        })
    }

    fn fill(&mut self) -> io::Result<()> {
        if self.start > 0 && self.start >= self.buf.len() / 2 {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        let pending = self.buf.len() - self.start;
        if !self.eof && pending < self.params.max {
            // read_to_end grows the buffer as data arrives, so a small file
            // never pays for a max-sized buffer.
            let need = (self.params.max - pending) as u64;
            let got = (&mut self.reader).take(need).read_to_end(&mut self.buf)?;
            if (got as u64) < need {
                self.eof = true;
            }
        }
        Ok(())
    }
}

impl<R: Read> Iterator for StreamChunker<R> {
    type Item = io::Result<Vec<u8>>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Err(e) = self.fill() {
            return Some(Err(e));
        }
        let pending = &self.buf[self.start..];
        if pending.is_empty() {
            return None;
        }
        let len = self.params.cut_point(pending);
        let chunk = pending[..len].to_vec();
        self.start += len;
        Some(Ok(chunk))
    }
}
