//! Byte-oriented range coder over static frequency tables.
//!
//! The encoder keeps a 33-bit `low` with a pending-byte cache so carries
//! propagate into bytes already produced; the decoder mirrors it with a
//! 32-bit code register.

use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
/// Upper bound on a table's total frequency.
pub const MAX_TOTAL: u32 = 1 << 16;

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
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
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
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total && total <= MAX_TOTAL);
        let r = self.range / total;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
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
    code: u32,
    range: u32,
    buf: &'a [u8],
    pos: usize,
    r: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = Self { code: 0, range: u32::MAX, buf, pos: 0, r: 0 };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| Error::bitstream(self.pos, "range-coded payload truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative frequency the next symbol falls in.
    pub fn target(&mut self, total: u32) -> u32 {
        self.r = self.range / total;
        (self.code / self.r).min(total - 1)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.code -= cum * self.r;
        self.range = self.r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }
}

/// Static symbol statistics of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    /// Sorted distinct symbols with nonzero frequency.
    pub symbols: Vec<i32>,
    pub freqs: Vec<u32>,
    cum: Vec<u32>,
    /// Flat over `symbols`, stored as a range instead of counts.
    uniform: bool,
}

const MODE_SINGLE: u8 = 0;
const MODE_SPARSE: u8 = 1;
const MODE_DENSE: u8 = 2;
const MODE_UNIFORM: u8 = 3;

impl FreqTable {
    fn from_parts(symbols: Vec<i32>, freqs: Vec<u32>) -> Self {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Self { symbols, freqs, cum, uniform: false }
    }

    fn flat(lo: i32, span: u32) -> Self {
        let mut t = Self::from_parts((lo..lo + span as i32).collect(), vec![1; span as usize]);
        t.uniform = true;
        t
    }

    /// The cheaper (table plus ideal payload) of the scaled histogram and a
    /// flat distribution over the value range.
    pub fn from_values(values: &[i32]) -> Self {
        let hist = Self::histogram(values);
        if hist.is_single() {
            return hist;
        }
        let (lo, hi) = (hist.symbols[0], *hist.symbols.last().unwrap());
        let span = (hi as i64 - lo as i64 + 1) as u64;
        if span > MAX_TOTAL as u64 {
            return hist;
        }
        let flat = Self::flat(lo, span as u32);
        let cost = |t: &Self| t.table_len() as f64 * 8.0 + t.cost_bits(values);
        if cost(&flat) < cost(&hist) {
            flat
        } else {
            hist
        }
    }

    /// Histogram of `values`, scaled so the total fits [`MAX_TOTAL`] while
    /// every occurring symbol keeps a nonzero frequency.
    pub fn histogram(values: &[i32]) -> Self {
        let mut hist = std::collections::BTreeMap::<i32, u64>::new();
        for &v in values {
            *hist.entry(v).or_default() += 1;
        }
        let n = values.len() as u64;
        let symbols: Vec<i32> = hist.keys().copied().collect();
        let counts: Vec<u64> = hist.values().copied().collect();
        let limit = (MAX_TOTAL - 1) as u64;
        let freqs = if n <= limit { counts.iter().map(|&c| c as u32).collect() } else { scale_counts(&counts, limit as u32) };
        Self::from_parts(symbols, freqs)
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn is_single(&self) -> bool {
        self.symbols.len() <= 1
    }

    fn index_of(&self, v: i32) -> usize {
        self.symbols.binary_search(&v).expect("symbol present in table")
    }

    /// Ideal code length of `values` under this table, in bits.
    pub fn cost_bits(&self, values: &[i32]) -> f64 {
        let t = self.total() as f64;
        values.iter().map(|&v| -(self.freqs[self.index_of(v)] as f64 / t).log2()).sum()
    }

    fn sparse_len(&self) -> usize {
        let narrow = self.symbols.iter().all(|&s| i16::try_from(s).is_ok());
        if narrow {
            1 + 4 + self.symbols.len() * 4
        } else {
            usize::MAX
        }
    }

    fn dense_len(&self) -> usize {
        let span = (*self.symbols.last().unwrap() as i64 - self.symbols[0] as i64 + 1) as usize;
        1 + 4 + 4 + span * 2
    }

    /// Serialized size in bytes.
    pub fn table_len(&self) -> usize {
        if self.is_single() {
            5
        } else if self.uniform {
            9
        } else {
            self.sparse_len().min(self.dense_len())
        }
    }

    pub fn write(&self, w: &mut Writer) {
        if self.is_single() {
            w.u8(MODE_SINGLE);
            w.i32(self.symbols.first().copied().unwrap_or(0));
            return;
        }
        let lo = self.symbols[0];
        let hi = *self.symbols.last().unwrap();
        if self.uniform {
            w.u8(MODE_UNIFORM);
            w.i32(lo);
            w.u32((hi - lo + 1) as u32);
            return;
        }
        if self.sparse_len() <= self.dense_len() {
            w.u8(MODE_SPARSE);
            w.u32(self.symbols.len() as u32);
            for (&s, &f) in self.symbols.iter().zip(&self.freqs) {
                w.i16(s as i16);
                w.u16(f as u16);
            }
        } else {
            w.u8(MODE_DENSE);
            w.i32(lo);
            w.u32((hi - lo + 1) as u32);
            let mut k = 0;
            for s in lo..=hi {
                if self.symbols[k] == s {
                    w.u16(self.freqs[k] as u16);
                    k += 1;
                } else {
                    w.u16(0);
                }
            }
        }
    }

    pub fn read(r: &mut Reader) -> Result<Self> {
        let at = r.pos();
        let t = match r.u8("table mode")? {
            MODE_SINGLE => Self::from_parts(vec![r.i32("symbol")?], vec![1]),
            MODE_SPARSE => {
                let k = r.u32("symbol count")? as usize;
                if k > r.remaining() / 4 {
                    return Err(Error::bitstream(at, format!("table claims {k} symbols")));
                }
                let mut syms = Vec::with_capacity(k);
                let mut freqs = Vec::with_capacity(k);
                for _ in 0..k {
                    syms.push(r.i16("symbol")? as i32);
                    freqs.push(r.u16("frequency")? as u32);
                }
                if syms.windows(2).any(|p| p[0] >= p[1]) || freqs.iter().any(|&f| f == 0) {
                    return Err(Error::bitstream(at, "malformed sparse table"));
                }
                Self::from_parts(syms, freqs)
            }
            MODE_DENSE => {
                let lo = r.i32("table origin")?;
                let span = r.u32("table span")? as usize;
                if span > r.remaining() / 2 {
                    return Err(Error::bitstream(at, format!("table claims span {span}")));
                }
                let mut syms = Vec::new();
                let mut freqs = Vec::new();
                for i in 0..span {
                    let f = r.u16("frequency")? as u32;
                    if f > 0 {
                        syms.push(lo + i as i32);
                        freqs.push(f);
                    }
                }
                if syms.is_empty() {
                    return Err(Error::bitstream(at, "empty dense table"));
                }
                Self::from_parts(syms, freqs)
            }
            MODE_UNIFORM => {
                let lo = r.i32("table origin")?;
                let span = r.u32("table span")?;
                if span < 2 || span > MAX_TOTAL || lo.checked_add(span as i32).is_none() {
                    return Err(Error::bitstream(at, format!("bad uniform span {span}")));
                }
                Self::flat(lo, span)
            }
            m => return Err(Error::bitstream(at, format!("unknown table mode {m}"))),
        };
        if t.total() > MAX_TOTAL {
            return Err(Error::bitstream(at, format!("table total {} exceeds {MAX_TOTAL}", t.total())));
        }
        Ok(t)
    }
}

/// Frequencies summing to `total` that keep every count nonzero and minimize
/// the coded size of the histogram `counts`: a floor allocation, then each
/// remaining unit goes to the symbol whose code length it shortens the most.
fn scale_counts(counts: &[u64], total: u32) -> Vec<u32> {
    let n: u64 = counts.iter().sum();
    let budget = (total as u64 - counts.len() as u64) as f64;
    let mut freqs: Vec<u32> = counts.iter().map(|&c| ((c as f64 * budget / n as f64).floor() as u32).max(1)).collect();
    let gain = |c: u64, f: u32| c as f64 * ((f + 1) as f64 / f as f64).log2();
    let mut heap: std::collections::BinaryHeap<(Gain, usize)> =
        counts.iter().zip(&freqs).enumerate().map(|(i, (&c, &f))| (Gain(gain(c, f)), i)).collect();
    let mut left = total - freqs.iter().sum::<u32>();
    while left > 0 {
        let Some((_, i)) = heap.pop() else { break };
        freqs[i] += 1;
        left -= 1;
        heap.push((Gain(gain(counts[i], freqs[i])), i));
    }
    freqs
}

#[derive(PartialEq, PartialOrd)]
struct Gain(f64);

impl Eq for Gain {}

impl Ord for Gain {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Range-code `values`; a single-symbol table needs no payload at all.
pub fn encode_values(table: &FreqTable, values: &[i32]) -> Vec<u8> {
    if table.is_single() {
        return Vec::new();
    }
    let total = table.total();
    let mut enc = RangeEncoder::new();
    for &v in values {
        let i = table.index_of(v);
        enc.encode(table.cum[i], table.freqs[i], total);
    }
    enc.finish()
}

pub fn decode_values(table: &FreqTable, payload: &[u8], n: usize) -> Result<Vec<i32>> {
    if table.is_single() {
        if !payload.is_empty() {
            return Err(Error::bitstream(0, "payload present for a single-symbol table"));
        }
        return Ok(vec![table.symbols[0]; n]);
    }
    let total = table.total();
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = dec.target(total);
        let i = table.cum.partition_point(|&c| c <= target) - 1;
        dec.consume(table.cum[i], table.freqs[i])?;
        out.push(table.symbols[i]);
    }
    Ok(out)
}

/// Empirical (histogram) entropy of `values` in bits per symbol.
pub fn empirical_entropy(values: &[i32]) -> f64 {
    let mut hist = std::collections::BTreeMap::<i32, usize>::new();
    for &v in values {
        *hist.entry(v).or_default() += 1;
    }
    let n = values.len() as f64;
    hist.values().map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn roundtrip(values: &[i32]) -> usize {
        let t = FreqTable::from_values(values);
        let bytes = encode_values(&t, values);
        assert_eq!(decode_values(&t, &bytes, values.len()).unwrap(), values);
        bytes.len()
    }

    #[test]
    fn roundtrips_skewed_and_uniform() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let skew: Vec<i32> = (0..50_000).map(|_| if rng.gen_bool(0.97) { 0 } else { rng.gen_range(-3..4) }).collect();
        roundtrip(&skew);
        let uni: Vec<i32> = (0..20_000).map(|_| rng.gen_range(-128..128)).collect();
        roundtrip(&uni);
        roundtrip(&[5, -5]);
    }

    #[test]
    fn constant_stream_is_empty() {
        assert_eq!(roundtrip(&vec![7; 10_000]), 0);
    }

    #[test]
    fn table_serialization_roundtrips() {
        let skew: Vec<i32> = (0..3000).map(|i| if i % 10 == 0 { i % 200 - 100 } else { 0 }).collect();
        for vals in [vec![1, 1, 1], vec![-100, 3, 3, 900], (-20..20).collect::<Vec<_>>(), skew] {
            let t = FreqTable::from_values(&vals);
            let mut w = Writer::new();
            t.write(&mut w);
            let mut r = Reader::new(&w.buf);
            let back = FreqTable::read(&mut r).unwrap();
            assert_eq!(back.symbols, t.symbols);
            assert_eq!(w.len(), t.table_len());
            if !t.is_single() {
                assert_eq!(back.freqs, t.freqs);
            }
        }
    }

    #[test]
    fn truncated_payload_errors() {
        let vals: Vec<i32> = (0..5000).map(|i| (i * 7919 % 61) - 30).collect();
        let t = FreqTable::from_values(&vals);
        let bytes = encode_values(&t, &vals);
        assert!(decode_values(&t, &bytes[..bytes.len() / 2], vals.len()).is_err());
    }
}
