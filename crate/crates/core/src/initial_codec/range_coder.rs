//! Adaptive binary range coder (LZMA-style carry-less encoder with 11-bit
//! probabilities) plus the integer binarizations used by the block coder.

const TOP: u32 = 1 << 24;
const PROB_BITS: u32 = 11;
const PROB_ONE: u16 = 1 << PROB_BITS;
const MOVE_BITS: u32 = 5;
const UNARY_CONTEXTS: usize = 20;

#[derive(Clone, Copy, Debug)]
pub struct Prob(u16);

impl Default for Prob {
    fn default() -> Self {
        Prob(PROB_ONE / 2)
    }
}

/// Contexts for an Exp-Golomb style unsigned integer: adaptive unary prefix
/// and an adaptive leading mantissa bit per prefix length.
#[derive(Clone, Debug, Default)]
pub struct UintModel {
    unary: [Prob; UNARY_CONTEXTS],
    mantissa: [Prob; UNARY_CONTEXTS],
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_bit(&mut self, prob: &mut Prob, bit: bool) {
        let bound = (self.range >> PROB_BITS) * prob.0 as u32;
        if bit {
            self.low += bound as u64;
            self.range -= bound;
            prob.0 -= prob.0 >> MOVE_BITS;
        } else {
            self.range = bound;
            prob.0 += (PROB_ONE - prob.0) >> MOVE_BITS;
        }
        self.normalize();
    }

    pub fn encode_direct(&mut self, bit: bool) {
        self.range >>= 1;
        if bit {
            self.low += self.range as u64;
        }
        self.normalize();
    }

    pub fn encode_uint(&mut self, model: &mut UintModel, value: u32) {
        let v = value as u64 + 1;
        let n = 64 - v.leading_zeros() as usize;
        for i in 0..n - 1 {
            self.encode_bit(&mut model.unary[i.min(UNARY_CONTEXTS - 1)], true);
        }
        self.encode_bit(&mut model.unary[(n - 1).min(UNARY_CONTEXTS - 1)], false);
        if n > 1 {
            let ctx = (n - 1).min(UNARY_CONTEXTS - 1);
            self.encode_bit(&mut model.mantissa[ctx], (v >> (n - 2)) & 1 == 1);
            for b in (0..n.saturating_sub(2)).rev() {
                self.encode_direct((v >> b) & 1 == 1);
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    overrun: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            input,
            pos: 0,
            code: 0,
            range: u32::MAX,
            overrun: false,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        match self.input.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.overrun = true;
                0
            }
        }
    }

    /// True once the decoder has asked for bytes past the end of its input.
    pub fn overrun(&self) -> bool {
        self.overrun
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
    }

    pub fn decode_bit(&mut self, prob: &mut Prob) -> bool {
        let bound = (self.range >> PROB_BITS) * prob.0 as u32;
        let bit = if self.code < bound {
            self.range = bound;
            prob.0 += (PROB_ONE - prob.0) >> MOVE_BITS;
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            prob.0 -= prob.0 >> MOVE_BITS;
            true
        };
        self.normalize();
        bit
    }

    pub fn decode_direct(&mut self) -> bool {
        self.range >>= 1;
        let bit = if self.code >= self.range {
            self.code -= self.range;
            true
        } else {
            false
        };
        self.normalize();
        bit
    }

    /// Returns `None` when the prefix is longer than any value the encoder
    /// can produce (corrupt input).
    pub fn decode_uint(&mut self, model: &mut UintModel) -> Option<u32> {
        let mut n = 1usize;
        while self.decode_bit(&mut model.unary[(n - 1).min(UNARY_CONTEXTS - 1)]) {
            n += 1;
            if n > 33 || self.overrun {
                return None;
            }
        }
        let mut v: u64 = 1;
        if n > 1 {
            let ctx = (n - 1).min(UNARY_CONTEXTS - 1);
            v = (v << 1) | self.decode_bit(&mut model.mantissa[ctx]) as u64;
            for _ in 0..n - 2 {
                v = (v << 1) | self.decode_direct() as u64;
            }
        }
        u32::try_from(v - 1).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn bits_and_uints_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let values: Vec<u32> = (0..2000)
            .map(|i| if i % 7 == 0 { rng.random_range(0..100_000) } else { rng.random_range(0..4) })
            .collect();
        let bits: Vec<bool> = (0..2000).map(|_| rng.random_bool(0.2)).collect();

        let mut enc = RangeEncoder::new();
        let (mut m, mut p) = (UintModel::default(), Prob::default());
        for (&v, &b) in values.iter().zip(&bits) {
            enc.encode_uint(&mut m, v);
            enc.encode_bit(&mut p, b);
            enc.encode_direct(!b);
        }
        let bytes = enc.finish();

        let mut dec = RangeDecoder::new(&bytes);
        let (mut m, mut p) = (UintModel::default(), Prob::default());
        for (&v, &b) in values.iter().zip(&bits) {
            assert_eq!(dec.decode_uint(&mut m), Some(v));
            assert_eq!(dec.decode_bit(&mut p), b);
            assert_eq!(dec.decode_direct(), !b);
        }
        assert!(!dec.overrun());
        assert_eq!(dec.consumed(), bytes.len());
    }

    #[test]
    fn skewed_bits_compress() {
        let mut enc = RangeEncoder::new();
        let mut p = Prob::default();
        for i in 0..10_000 {
            enc.encode_bit(&mut p, i % 50 == 0);
        }
        assert!(enc.finish().len() < 250);
    }
}
