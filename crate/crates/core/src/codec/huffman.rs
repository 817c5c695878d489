//! Canonical Huffman coding of quantization codes.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use super::CodecError;
use crate::bitio::{BitReader, BitWriter};

/// Longest code the encoder will emit.
pub const MAX_CODE_LEN: u8 = 30;

/// Canonical code lengths per symbol, sorted by symbol.
///
/// A table with a single symbol uses a zero-length code: the stream carries
/// no bits and the decoder emits `n` copies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    entries: Vec<(u32, u8)>,
}

impl HuffmanTable {
    pub fn from_counts(counts: &BTreeMap<u32, u64>) -> Self {
        let symbols: Vec<(u32, u64)> =
            counts.iter().filter(|(_, &c)| c > 0).map(|(&s, &c)| (s, c)).collect();
        match symbols.len() {
            0 => return HuffmanTable { entries: Vec::new() },
            1 => return HuffmanTable { entries: vec![(symbols[0].0, 0)] },
            _ => {}
        }
        let mut weights: Vec<u64> = symbols.iter().map(|&(_, c)| c).collect();
        loop {
            let lengths = code_lengths(&weights);
            if lengths.iter().all(|&l| l <= MAX_CODE_LEN) {
                let entries = symbols.iter().zip(lengths).map(|(&(s, _), l)| (s, l)).collect();
                return HuffmanTable { entries };
            }
            // Flatten the distribution until the tree fits the length cap.
            for w in &mut weights {
                *w = (*w >> 1).max(1);
            }
        }
    }

    pub fn from_symbols(symbols: &[u32]) -> Self {
        let mut counts = BTreeMap::new();
        for &s in symbols {
            *counts.entry(s).or_insert(0u64) += 1;
        }
        Self::from_counts(&counts)
    }

    /// `(symbol, length)` pairs sorted by symbol.
    pub fn entries(&self) -> &[(u32, u8)] {
        &self.entries
    }

    pub fn length_of(&self, symbol: u32) -> Option<u8> {
        self.entries
            .binary_search_by_key(&symbol, |&(s, _)| s)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn kraft_sum(&self) -> f64 {
        self.entries.iter().map(|&(_, l)| 0.5f64.powi(l as i32)).sum()
    }

    /// Symbols in canonical order with their codes.
    fn canonical(&self) -> Vec<(u32, u8, u32)> {
        let mut order: Vec<(u32, u8)> = self.entries.clone();
        order.sort_by_key(|&(s, l)| (l, s));
        let mut out = Vec::with_capacity(order.len());
        let mut code: u32 = 0;
        let mut prev_len = order.first().map_or(0, |e| e.1);
        for (i, &(s, l)) in order.iter().enumerate() {
            if i > 0 {
                code = (code + 1) << (l - prev_len);
            }
            prev_len = l;
            out.push((s, l, code));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 5 * self.entries.len());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for &(s, l) in &self.entries {
            out.extend_from_slice(&s.to_le_bytes());
            out.push(l);
        }
        out
    }

    /// Parses a table from the front of `bytes`; returns it with the number
    /// of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize), CodecError> {
        let corrupt = |m: &str| CodecError::CorruptPayload(format!("huffman table: {m}"));
        let n = u32::from_le_bytes(bytes.get(..4).ok_or_else(|| corrupt("truncated"))?.try_into().unwrap())
            as usize;
        let end = 4 + 5 * n;
        let body = bytes.get(4..end).ok_or_else(|| corrupt("truncated"))?;
        let entries: Vec<(u32, u8)> = body
            .chunks_exact(5)
            .map(|c| (u32::from_le_bytes(c[..4].try_into().unwrap()), c[4]))
            .collect();
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(corrupt("symbols not strictly increasing"));
        }
        let table = HuffmanTable { entries };
        if table.entries.iter().any(|&(_, l)| l > MAX_CODE_LEN)
            || (table.entries.len() > 1 && table.entries.iter().any(|&(_, l)| l == 0))
            || table.kraft_sum() > 1.0
        {
            return Err(corrupt("invalid code lengths"));
        }
        Ok((table, end))
    }
}

/// Huffman code lengths for `weights` (at least two entries). Ties are
/// broken by node creation order, so the result is deterministic.
fn code_lengths(weights: &[u64]) -> Vec<u8> {
    let n = weights.len();
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
        weights.iter().enumerate().map(|(i, &w)| Reverse((w, i))).collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa + wb, next)));
        next += 1;
    }
    // Parents always have larger ids, so one backward sweep sets depths.
    let mut depth = vec![0u32; 2 * n - 1];
    for node in (0..2 * n - 2).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    depth[..n].iter().map(|&d| d.min(255) as u8).collect()
}

/// Encodes `codes`, returning the packed stream, the table, and the number
/// of meaningful bits in the stream.
pub fn huffman_encode(codes: &[u32]) -> (Vec<u8>, HuffmanTable, u64) {
    let table = HuffmanTable::from_symbols(codes);
    let (bytes, bits) = encode_with(&table, codes);
    (bytes, table, bits)
}

fn encode_with(table: &HuffmanTable, codes: &[u32]) -> (Vec<u8>, u64) {
    let canon = table.canonical();
    let max_sym = canon.iter().map(|e| e.0).max().unwrap_or(0) as usize;
    let mut lut = vec![(0u32, 0u8); max_sym + 1];
    for &(s, l, c) in &canon {
        lut[s as usize] = (c, l);
    }
    let mut w = BitWriter::new();
    for &s in codes {
        let (c, l) = lut[s as usize];
        w.write(c as u64, l as u32);
    }
    let bits = w.bits_written();
    (w.finish(), bits)
}

/// Decodes exactly `n` symbols.
pub fn huffman_decode(bytes: &[u8], table: &HuffmanTable, n: usize) -> Result<Vec<u32>, CodecError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let canon = table.canonical();
    match canon.len() {
        0 => return Err(CodecError::CorruptPayload("empty huffman table".into())),
        1 if canon[0].1 == 0 => return Ok(vec![canon[0].0; n]),
        _ => {}
    }
    let max_len = canon.iter().map(|e| e.1).max().unwrap() as usize;
    let mut count = vec![0u32; max_len + 1];
    for &(_, l, _) in &canon {
        count[l as usize] += 1;
    }
    let mut first = vec![0u32; max_len + 2];
    let mut offset = vec![0u32; max_len + 2];
    let mut code = 0u32;
    let mut idx = 0u32;
    for l in 1..=max_len {
        code = (code + count[l - 1]) << 1;
        first[l] = code;
        offset[l] = idx;
        idx += count[l];
    }
    let sorted: Vec<u32> = canon.iter().map(|e| e.0).collect();

    let mut reader = BitReader::new(bytes);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut code = 0u32;
        let mut len = 0usize;
        loop {
            let bit = reader
                .read_bit()
                .ok_or_else(|| CodecError::CorruptPayload("huffman stream truncated".into()))?;
            code = (code << 1) | bit;
            len += 1;
            if len > max_len {
                return Err(CodecError::CorruptPayload("invalid huffman code".into()));
            }
            let delta = code.wrapping_sub(first[len]);
            if code >= first[len] && delta < count[len] {
                out.push(sorted[(offset[len] + delta) as usize]);
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hand_built_lengths() {
        // a,a,b,c: merge b+c, then a with (bc) -> a:1, b:2, c:2
        let table = HuffmanTable::from_symbols(&[0, 0, 1, 2]);
        assert_eq!(table.entries(), &[(0, 1), (1, 2), (2, 2)]);
        assert_eq!(table.kraft_sum(), 1.0);
    }

    #[test]
    fn single_symbol_costs_no_bits() {
        let codes = vec![7u32; 1000];
        let (bytes, table, bits) = huffman_encode(&codes);
        assert_eq!(bits, 0);
        assert!(bytes.is_empty());
        assert_eq!(table.to_bytes().len(), 9);
        assert_eq!(huffman_decode(&bytes, &table, 1000).unwrap(), codes);
    }

    #[test]
    fn truncated_stream_is_corrupt() {
        let codes: Vec<u32> = (0..100).map(|i| i % 7).collect();
        let (bytes, table, _) = huffman_encode(&codes);
        let err = huffman_decode(&bytes[..bytes.len() / 2], &table, codes.len()).unwrap_err();
        assert!(matches!(err, CodecError::CorruptPayload(_)));
    }

    #[test]
    fn million_random_codes_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let codes: Vec<u32> = (0..1_000_000).map(|_| rng.random_range(0..256)).collect();
        let (bytes, table, bits) = huffman_encode(&codes);
        assert!(bits <= 8 * codes.len() as u64);
        assert_eq!(huffman_decode(&bytes, &table, codes.len()).unwrap(), codes);
    }

    #[test]
    fn length_cap_holds_for_fibonacci_weights() {
        let mut counts = BTreeMap::new();
        let (mut a, mut b) = (1u64, 1u64);
        for s in 0..45u32 {
            counts.insert(s, a);
            (a, b) = (b, a + b);
        }
        let table = HuffmanTable::from_counts(&counts);
        assert!(table.entries().iter().all(|&(_, l)| l <= MAX_CODE_LEN));
        assert!(table.kraft_sum() <= 1.0);
        let syms: Vec<u32> = (0..45).chain(0..45).collect();
        let (bytes, _) = encode_with(&table, &syms);
        assert_eq!(huffman_decode(&bytes, &table, syms.len()).unwrap(), syms);
    }

    #[test]
    fn table_bytes_round_trip() {
        let table = HuffmanTable::from_symbols(&[3, 3, 3, 9, 9, 65_000, 1]);
        let bytes = table.to_bytes();
        let (back, used) = HuffmanTable::from_bytes(&bytes).unwrap();
        assert_eq!(back, table);
        assert_eq!(used, bytes.len());
        assert!(HuffmanTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_kraft(codes in prop::collection::vec(0u32..300, 1..2000)) {
            let (bytes, table, bits) = huffman_encode(&codes);
            prop_assert!(table.kraft_sum() <= 1.0);
            let distinct = table.entries().len();
            if distinct > 1 {
                let fixed = (distinct as f64).log2().ceil() as u64;
                prop_assert!(bits <= codes.len() as u64 * fixed);
            }
            prop_assert_eq!(huffman_decode(&bytes, &table, codes.len()).unwrap(), codes);
        }
    }
}
