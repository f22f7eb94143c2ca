//! Canonical prefix coding for the delta-dictionary codec.
//!
//! Only code *lengths* are stored on disk; codes are reassigned canonically
//! (shorter first, ties by symbol index) so encoder and decoder agree without
//! shipping the tree.

use crate::error::{Error, Result};
use crate::util::{BitReader, BitWriter};

/// Optimal code lengths for the given symbol frequencies (all > 0).
/// A single symbol gets length 0: its runs carry no bits at all.
pub fn code_lengths(freqs: &[u64]) -> Vec<u8> {
    let n = freqs.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }
    // Two-queue Huffman; leaves sorted by (freq, symbol) for determinism.
    // Node ids: 0..n are sorted leaves, n.. are internal nodes in creation
    // order. Both queues are consumed front to back and stay sorted.
    let mut leaves: Vec<usize> = (0..n).collect();
    leaves.sort_by_key(|&i| (freqs[i], i));
    let mut weight: Vec<u64> = leaves.iter().map(|&i| freqs[i]).collect();
    let mut children: Vec<(usize, usize)> = Vec::new();
    let mut leaf_pos = 0usize;
    let mut int_pos = n;
    while (n - leaf_pos) + (weight.len() - int_pos) > 1 {
        let take = |weight: &[u64], leaf_pos: &mut usize, int_pos: &mut usize| -> usize {
            let prefer_leaf = *leaf_pos < n
                && (*int_pos >= weight.len() || weight[*leaf_pos] <= weight[*int_pos]);
            if prefer_leaf {
                *leaf_pos += 1;
                *leaf_pos - 1
            } else {
                *int_pos += 1;
                *int_pos - 1
            }
        };
        let a = take(&weight, &mut leaf_pos, &mut int_pos);
        let b = take(&weight, &mut leaf_pos, &mut int_pos);
        weight.push(weight[a] + weight[b]);
        children.push((a, b));
    }
    // Depth assignment from the root (the last node built; n >= 2 guarantees
    // it is internal).
    let mut lengths = vec![0u8; n];
    let root = weight.len() - 1;
    let mut stack = vec![(root, 0u8)];
    while let Some((node, depth)) = stack.pop() {
        if node < n {
            lengths[leaves[node]] = depth;
        } else {
            let (a, b) = children[node - n];
            stack.push((a, depth + 1));
            stack.push((b, depth + 1));
        }
    }
    lengths
}

/// Canonical code table: symbol -> (code, length).
pub struct Encoder {
    codes: Vec<(u32, u8)>,
}

impl Encoder {
    pub fn new(lengths: &[u8]) -> Encoder {
        let codes = assign_codes(lengths);
        Encoder { codes }
    }

    pub fn write(&self, w: &mut BitWriter, symbol: usize) {
        let (code, len) = self.codes[symbol];
        w.write_bits(code as u64, len as u32);
    }

    pub fn code_len(&self, symbol: usize) -> u8 {
        self.codes[symbol].1
    }
}

fn assign_codes(lengths: &[u8]) -> Vec<(u32, u8)> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut codes = vec![(0u32, 0u8); lengths.len()];
    let mut code = 0u32;
    let mut prev_len = 0u8;
    for &sym in &order {
        let len = lengths[sym];
        if len == 0 {
            continue;
        }
        code <<= (len - prev_len) as u32;
        codes[sym] = (code, len);
        code += 1;
        prev_len = len;
    }
    codes
}

/// Canonical decoder over the same length table.
pub struct Decoder {
    // Per length L (1-indexed): first canonical code, count, and offset into
    // the length-sorted symbol array.
    first_code: Vec<u32>,
    count: Vec<u32>,
    offset: Vec<u32>,
    symbols: Vec<u32>,
    max_len: u8,
    single: Option<u32>,
}

impl Decoder {
    pub fn new(lengths: &[u8]) -> Result<Decoder> {
        let n = lengths.len();
        if n == 1 || lengths.iter().all(|&l| l == 0) {
            return Ok(Decoder {
                first_code: Vec::new(),
                count: Vec::new(),
                offset: Vec::new(),
                symbols: Vec::new(),
                max_len: 0,
                single: Some(0),
            });
        }
        let max_len = *lengths.iter().max().unwrap();
        if max_len > 58 {
            return Err(Error::Corrupt("prefix code length out of range".into()));
        }
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by_key(|&i| (lengths[i as usize], i));
        let mut count = vec![0u32; max_len as usize + 1];
        for &l in lengths {
            if l == 0 {
                return Err(Error::Corrupt("zero code length with multiple symbols".into()));
            }
            count[l as usize] += 1;
        }
        // Kraft check: overfull tables would read garbage.
        let mut kraft: u64 = 0;
        for l in 1..=max_len as usize {
            kraft += (count[l] as u64) << (max_len as usize - l);
        }
        if kraft != 1u64 << max_len {
            return Err(Error::Corrupt("invalid prefix code table".into()));
        }
        let mut first_code = vec![0u32; max_len as usize + 1];
        let mut offset = vec![0u32; max_len as usize + 1];
        let mut code = 0u32;
        let mut off = 0u32;
        for l in 1..=max_len as usize {
            code <<= 1;
            first_code[l] = code;
            offset[l] = off;
            code += count[l];
            off += count[l];
        }
        Ok(Decoder { first_code, count, offset, symbols: order, max_len, single: None })
    }

    pub fn read(&self, r: &mut BitReader<'_>) -> Result<u32> {
        if let Some(s) = self.single {
            return Ok(s);
        }
        let mut code = 0u32;
        for len in 1..=self.max_len as usize {
            let bit = r
                .read_bit()
                .ok_or_else(|| Error::Corrupt("truncated prefix-coded stream".into()))?;
            code = (code << 1) | bit as u32;
            let idx = code.wrapping_sub(self.first_code[len]);
            if idx < self.count[len] {
                return Ok(self.symbols[(self.offset[len] + idx) as usize]);
            }
        }
        Err(Error::Corrupt("invalid prefix code".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(freqs: &[u64], stream: &[usize]) {
        let lengths = code_lengths(freqs);
        let enc = Encoder::new(&lengths);
        let mut w = BitWriter::new();
        for &s in stream {
            enc.write(&mut w, s);
        }
        let buf = w.finish();
        let dec = Decoder::new(&lengths).unwrap();
        let mut r = BitReader::new(&buf);
        for &s in stream {
            assert_eq!(dec.read(&mut r).unwrap(), s as u32);
        }
    }

    #[test]
    fn lengths_are_optimal_for_known_distribution() {
        // Classic example: freqs 1,1,2,4 -> lengths 3,3,2,1.
        let lengths = code_lengths(&[1, 1, 2, 4]);
        assert_eq!(lengths, vec![3, 3, 2, 1]);
    }

    #[test]
    fn skewed_and_uniform_roundtrip() {
        roundtrip(&[1000, 10, 5, 1], &[0, 0, 1, 0, 2, 3, 0, 0, 1]);
        roundtrip(&[7, 7, 7, 7], &[3, 2, 1, 0, 0, 1, 2, 3]);
        roundtrip(&[1], &[0, 0, 0, 0]);
        roundtrip(&[5, 3], &[0, 1, 0, 1, 1]);
    }

    #[test]
    fn expected_bits_beat_fixed_width_on_skew() {
        let freqs = [100_000u64, 50, 30, 3];
        let lengths = code_lengths(&freqs);
        let total_bits: u64 =
            freqs.iter().zip(&lengths).map(|(&f, &l)| f * l as u64).sum();
        let fixed_bits: u64 = freqs.iter().sum::<u64>() * 2;
        assert!(total_bits < fixed_bits, "{total_bits} !< {fixed_bits}");
    }

    #[test]
    fn kraft_violation_rejected() {
        // Lengths 1,1,1 overfill the code space.
        assert!(Decoder::new(&[1, 1, 1]).is_err());
        // 1,2 underfills.
        assert!(Decoder::new(&[1, 2]).is_err());
        // 1,2,2 is exactly full.
        assert!(Decoder::new(&[1, 2, 2]).is_ok());
    }

    #[test]
    fn deterministic_lengths() {
        let freqs: Vec<u64> = (1..=300).map(|i| (i * 2654435761u64) % 1000 + 1).collect();
        let a = code_lengths(&freqs);
        let b = code_lengths(&freqs);
        assert_eq!(a, b);
        // Kraft equality: the table is exactly full.
        let max = *a.iter().max().unwrap() as u32;
        let kraft: u64 = a.iter().map(|&l| 1u64 << (max - l as u32)).sum();
        assert_eq!(kraft, 1u64 << max);
    }
}
