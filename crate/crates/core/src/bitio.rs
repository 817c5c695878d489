//! MSB-first bit packing shared by the Huffman stream and outlier blobs.

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    nbits: u32,
    total: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `width` bits of `value`, most significant first.
    #[inline]
    pub fn write(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 57);
        if width == 0 {
            return;
        }
        debug_assert!(width == 64 || value >> width == 0);
        self.acc = (self.acc << width) | value;
        self.nbits += width;
        self.total += width as u64;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.bytes.push((self.acc >> self.nbits) as u8);
        }
        self.acc &= (1u64 << self.nbits) - 1;
    }

    pub fn bits_written(&self) -> u64 {
        self.total
    }

    /// Flushes, zero-padding the last byte.
    pub fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.bytes.push((self.acc << (8 - self.nbits)) as u8);
        }
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> u64 {
        self.bytes.len() as u64 * 8 - self.pos
    }

    #[inline]
    pub fn read_bit(&mut self) -> Option<u32> {
        let byte = *self.bytes.get((self.pos >> 3) as usize)?;
        let bit = (byte >> (7 - (self.pos & 7))) & 1;
        self.pos += 1;
        Some(bit as u32)
    }

    pub fn read(&mut self, width: u32) -> Option<u64> {
        if (width as u64) > self.remaining() {
            return None;
        }
        let mut v = 0u64;
        for _ in 0..width {
            v = (v << 1) | self.read_bit()? as u64;
        }
        Some(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_widths_round_trip() {
        let items = [(1u64, 1u32), (0, 3), (0x1ff, 9), (5, 3), (0xabcdef, 24), (0, 0), (1, 2)];
        let mut w = BitWriter::new();
        for &(v, n) in &items {
            w.write(v, n);
        }
        assert_eq!(w.bits_written(), 42);
        let bytes = w.finish();
        assert_eq!(bytes.len(), 6);
        let mut r = BitReader::new(&bytes);
        for &(v, n) in &items {
            assert_eq!(r.read(n), Some(v));
        }
        assert_eq!(r.remaining(), 6);
        assert_eq!(r.read(7), None);
    }

    #[test]
    fn msb_first_layout() {
        let mut w = BitWriter::new();
        w.write(0b101, 3);
        assert_eq!(w.finish(), vec![0b1010_0000]);
    }
}
