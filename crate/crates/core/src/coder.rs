//! 32-bit binary arithmetic coder with carry-free pending-bit output.
//!
//! Binary symbols use a 16-bit probability of a one. Multi-symbol alphabets
//! share the same engine through cumulative frequency intervals.

use crate::error::{Error, Result};

/// Precision of binary probabilities.
pub const PROB_BITS: u32 = 16;
const PROB_ONE: u64 = 1 << PROB_BITS;
const HALF: u64 = 1 << 31;
const QUARTER: u64 = 1 << 30;
const TOP: u64 = (1 << 32) - 1;
/// Largest frequency precision the engine accepts (range stays above 2^30).
pub const MAX_FREQ_BITS: u32 = 24;
// Decoders may look ahead up to 32 bits past the flushed data.
const MAX_OVERREAD: usize = 32;

/// Maps `P(bit = 1)` to `[1, 2^16 - 1]`.
pub fn quantize_prob(p1: f64) -> u32 {
    let p = if p1.is_finite() { p1.clamp(0.0, 1.0) } else { 0.5 };
    ((p * PROB_ONE as f64).round() as u64).clamp(1, PROB_ONE - 1) as u32
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    cur: u8,
    used: u8,
}

impl BitWriter {
    fn put(&mut self, bit: bool) {
        self.cur = (self.cur << 1) | bit as u8;
        self.used += 1;
        if self.used == 8 {
            self.bytes.push(self.cur);
            self.cur = 0;
            self.used = 0;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.bytes.push(self.cur << (8 - self.used));
        }
        self.bytes
    }
}

pub struct Encoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            high: TOP,
            pending: 0,
            out: BitWriter::default(),
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.put(bit);
        while self.pending > 0 {
            self.out.put(!bit);
            self.pending -= 1;
        }
    }

    fn narrow(&mut self, lo: u64, hi: u64, bits: u32) {
        let range = self.high - self.low + 1;
        self.high = self.low + ((range * hi) >> bits) - 1;
        self.low += (range * lo) >> bits;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    /// Codes one bit with `p1 = P(bit = 1)` in units of `2^-16`.
    pub fn encode_bit(&mut self, bit: bool, p1: u32) {
        let p0 = PROB_ONE - p1 as u64;
        if bit {
            self.narrow(p0, PROB_ONE, PROB_BITS);
        } else {
            self.narrow(0, p0, PROB_BITS);
        }
    }

    /// Codes the interval `[lo, hi)` out of `2^bits`.
    pub fn encode_range(&mut self, lo: u32, hi: u32, bits: u32) {
        debug_assert!(lo < hi && (hi as u64) <= 1 << bits && bits <= MAX_FREQ_BITS);
        self.narrow(lo as u64, hi as u64, bits);
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out.finish()
    }
}

pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    low: u64,
    high: u64,
    value: u64,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            data,
            pos: 0,
            low: 0,
            high: TOP,
            value: 0,
        };
        for _ in 0..32 {
            d.value = (d.value << 1) | d.next_bit()?;
        }
        Ok(d)
    }

    fn next_bit(&mut self) -> Result<u64> {
        let byte = self.pos / 8;
        let bit = if byte < self.data.len() {
            ((self.data[byte] >> (7 - self.pos % 8)) & 1) as u64
        } else if self.pos >= self.data.len() * 8 + MAX_OVERREAD {
            return Err(Error::Truncated(byte));
        } else {
            0
        };
        self.pos += 1;
        Ok(bit)
    }

    /// Bits consumed so far, including look-ahead.
    pub fn position(&self) -> usize {
        self.pos
    }

    fn target(&self, bits: u32) -> u64 {
        let range = self.high - self.low + 1;
        (((self.value - self.low + 1) << bits) - 1) / range
    }

    fn narrow(&mut self, lo: u64, hi: u64, bits: u32) -> Result<()> {
        let range = self.high - self.low + 1;
        self.high = self.low + ((range * hi) >> bits) - 1;
        self.low += (range * lo) >> bits;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.next_bit()?;
        }
        Ok(())
    }

    pub fn decode_bit(&mut self, p1: u32) -> Result<bool> {
        let p0 = PROB_ONE - p1 as u64;
        let bit = self.target(PROB_BITS) >= p0;
        if bit {
            self.narrow(p0, PROB_ONE, PROB_BITS)?;
        } else {
            self.narrow(0, p0, PROB_BITS)?;
        }
        Ok(bit)
    }

    /// Decodes one symbol of a frequency table.
    pub fn decode_symbol(&mut self, table: &FreqTable) -> Result<usize> {
        let t = self.target(table.bits);
        if t >= table.total() as u64 {
            return Err(Error::Corrupt(format!("symbol target out of range at bit {}", self.pos)));
        }
        let s = table.lookup(t as u32);
        self.narrow(table.cum[s] as u64, table.cum[s + 1] as u64, table.bits)?;
        Ok(s)
    }
}

/// Codes `bits` with per-bit probabilities of a one.
pub fn encode_bits(bits: &[u8], probs: &[f64]) -> Vec<u8> {
    let mut enc = Encoder::new();
    for (&b, &p) in bits.iter().zip(probs) {
        enc.encode_bit(b != 0, quantize_prob(p));
    }
    enc.finish()
}

/// Inverse of [`encode_bits`].
pub fn decode_bits(data: &[u8], probs: &[f64]) -> Result<Vec<u8>> {
    let mut dec = Decoder::new(data)?;
    probs
        .iter()
        .map(|&p| dec.decode_bit(quantize_prob(p)).map(|b| b as u8))
        .collect()
}

/// Cumulative frequencies summing to `2^bits`, every symbol at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    bits: u32,
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantizes a pmf: `f = 1 + floor(p / sum * (2^bits - n))`, remainder to the first mode.
    pub fn from_pmf(pmf: &[f64], bits: u32) -> Result<Self> {
        let n = pmf.len();
        let total = 1u64 << bits;
        if n == 0 || n as u64 > total || bits > MAX_FREQ_BITS {
            return Err(Error::InvalidArgument(format!("cannot fit {n} symbols in {bits} bits")));
        }
        let sum: f64 = pmf.iter().sum();
        if sum.is_nan() || sum <= 0.0 || !sum.is_finite() {
            return Err(Error::InvalidArgument("pmf must have positive finite mass".into()));
        }
        let spare = (total - n as u64) as f64;
        let mut freq: Vec<u64> = pmf.iter().map(|&p| 1 + (p.max(0.0) / sum * spare).floor() as u64).collect();
        let used: u64 = freq.iter().sum();
        let mode = pmf
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > pmf[best] { i } else { best });
        freq[mode] += total - used;
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in freq {
            acc += f as u32;
            cum.push(acc);
        }
        Ok(Self { bits, cum })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn total(&self) -> u32 {
        self.cum[self.cum.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    fn lookup(&self, t: u32) -> usize {
        self.cum.partition_point(|&c| c <= t) - 1
    }

    pub fn encode(&self, enc: &mut Encoder, s: usize) {
        enc.encode_range(self.cum[s], self.cum[s + 1], self.bits);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cross_entropy(bits: &[u8], probs: &[f64]) -> f64 {
        bits.iter()
            .zip(probs)
            .map(|(&b, &p)| {
                let q = quantize_prob(p) as f64 / PROB_ONE as f64;
                if b != 0 {
                    -q.log2()
                } else {
                    -(1.0 - q).log2()
                }
            })
            .sum()
    }

    #[test]
    fn three_fair_bits() {
        let bits = [1, 0, 1];
        let probs = [0.5; 3];
        let data = encode_bits(&bits, &probs);
        assert!(data.len() * 8 <= 3 + 32);
        assert_eq!(decode_bits(&data, &probs).unwrap(), bits);
    }

    #[test]
    fn empty_stream() {
        let data = encode_bits(&[], &[]);
        assert_eq!(data.len(), 1);
        assert!(decode_bits(&data, &[]).unwrap().is_empty());
    }

    #[test]
    fn random_bits_near_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let bits: Vec<u8> = probs.iter().map(|&p| (rng.random::<f64>() < p) as u8).collect();
        let data = encode_bits(&bits, &probs);
        let ce = cross_entropy(&bits, &probs);
        let measured = (data.len() * 8) as f64;
        assert!(measured <= ce * 1.01 + 64.0, "{measured} vs {ce}");
        assert_eq!(decode_bits(&data, &probs).unwrap(), bits);
    }

    #[test]
    fn extreme_probabilities_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs: Vec<f64> = (0..5000).map(|i| if i % 3 == 0 { 1e-12 } else { 1.0 - 1e-12 }).collect();
        let bits: Vec<u8> = (0..5000).map(|_| rng.random_range(0..2)).collect();
        let data = encode_bits(&bits, &probs);
        assert_eq!(decode_bits(&data, &probs).unwrap(), bits);
    }

    #[test]
    fn truncated_stream_is_detected() {
        let probs = vec![0.5; 400];
        let bits: Vec<u8> = (0..400).map(|i| (i % 7 == 0) as u8).collect();
        let data = encode_bits(&bits, &probs);
        assert!(matches!(decode_bits(&data[..10], &probs), Err(Error::Truncated(_))));
    }

    #[test]
    fn freq_table_properties() {
        let pmf = [0.0, 0.7, 0.2, 0.1, 1e-12];
        let t = FreqTable::from_pmf(&pmf, 16).unwrap();
        assert_eq!(t.total(), 1 << 16);
        assert!((0..t.len()).all(|s| t.freq(s) >= 1));
        assert!(t.freq(1) > t.freq(2));
        for s in 0..t.len() {
            assert_eq!(t.lookup(t.cum[s]), s);
            assert_eq!(t.lookup(t.cum[s + 1] - 1), s);
        }
        assert!(FreqTable::from_pmf(&[1.0; 5], 2).is_err());
    }

    #[test]
    fn mixed_symbols_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pmf: Vec<f64> = (0..37).map(|i| (-(i as f64 - 18.0).abs() / 3.0).exp()).collect();
        let table = FreqTable::from_pmf(&pmf, 16).unwrap();
        let syms: Vec<usize> = (0..3000).map(|_| rng.random_range(10..27)).collect();
        let flags: Vec<u8> = (0..3000).map(|_| rng.random_range(0..2)).collect();
        let mut enc = Encoder::new();
        for (&s, &f) in syms.iter().zip(&flags) {
            table.encode(&mut enc, s);
            enc.encode_bit(f != 0, 20000);
        }
        let data = enc.finish();
        let mut dec = Decoder::new(&data).unwrap();
        for (&s, &f) in syms.iter().zip(&flags) {
            assert_eq!(dec.decode_symbol(&table).unwrap(), s);
            assert_eq!(dec.decode_bit(20000).unwrap(), f != 0);
        }
    }
}
