//! Small shared utilities: CRC32, bit-level IO, and a stable 64-bit hash.
//!
//! The hash must be identical across processes, platforms, and releases
//! because segmentation (data placement) is derived from it. Never swap it
//! for `std`'s `DefaultHasher`.

/// CRC-32 (IEEE 802.3 polynomial, reflected). Table-driven, byte at a time.
pub fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc = (crc >> 8) ^ CRC_TABLE[((crc ^ b as u32) & 0xff) as usize];
    }
    !crc
}

static CRC_TABLE: [u32; 256] = build_crc_table();

const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

/// SplitMix64 finalizer; the building block for all stable hashing.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Accumulating stable hasher. Feed words; fold order matters.
#[derive(Clone, Copy)]
pub struct StableHasher(u64);

impl StableHasher {
    pub fn new() -> Self {
        StableHasher(0x5157_11D5_C11A_B1E5)
    }

    pub fn write_u64(&mut self, v: u64) {
        self.0 = splitmix64(self.0 ^ v);
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(word));
        }
        self.write_u64(bytes.len() as u64);
    }

    pub fn finish(&self) -> u64 {
        splitmix64(self.0)
    }
}

impl Default for StableHasher {
    fn default() -> Self {
        Self::new()
    }
}

/// MSB-first bit writer used by the bit-packed and prefix-coded encodings.
pub struct BitWriter {
    buf: Vec<u8>,
    nbits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter { buf: Vec::new(), nbits: 0 }
    }

    /// Writes the low `n` bits of `v`, most significant first. `n <= 64`.
    pub fn write_bits(&mut self, v: u64, n: u32) {
        debug_assert!(n <= 64);
        if n == 0 {
            return;
        }
        let v = if n == 64 { v } else { v & ((1u64 << n) - 1) };
        let mut left = n;
        while left > 0 {
            let room = (8 - self.nbits % 8) as u32;
            let take = left.min(room);
            let shift = left - take;
            let bits = (v >> shift) & ((1u64 << take) - 1);
            if self.nbits % 8 == 0 {
                self.buf.push(0);
            }
            let byte = self.buf.last_mut().unwrap();
            *byte |= (bits as u8) << (room - take);
            self.nbits += take as u64;
            left -= take;
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.nbits
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

impl Default for BitWriter {
    fn default() -> Self {
        Self::new()
    }
}

/// MSB-first bit reader matching [`BitWriter`].
pub struct BitReader<'a> {
    data: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        BitReader { data, pos: 0 }
    }

    /// Reads `n` bits; `None` when the stream is exhausted.
    pub fn read_bits(&mut self, n: u32) -> Option<u64> {
        debug_assert!(n <= 64);
        if n == 0 {
            return Some(0);
        }
        if self.pos + n as u64 > self.data.len() as u64 * 8 {
            return None;
        }
        let mut out = 0u64;
        let mut left = n;
        while left > 0 {
            let byte = self.data[(self.pos / 8) as usize];
            let bit_in_byte = (self.pos % 8) as u32;
            let avail = 8 - bit_in_byte;
            let take = left.min(avail);
            let bits = (byte >> (avail - take)) & ((1u16 << take) - 1) as u8;
            out = (out << take) | bits as u64;
            self.pos += take as u64;
            left -= take;
        }
        Some(out)
    }

    pub fn read_bit(&mut self) -> Option<u64> {
        self.read_bits(1)
    }
}

/// Bits needed to represent `v` (0 for v == 0).
pub fn bit_width(v: u64) -> u32 {
    64 - v.leading_zeros()
}

/// Zigzag-encodes a signed delta so small magnitudes pack into few bits.
pub fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

pub fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}
