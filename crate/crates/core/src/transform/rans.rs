//! rANS with a 128-bit state, 31-bit probabilities and 64-bit I/O words.
//!
//! Decoding is total: any byte string decodes to the requested number of
//! symbols, reading zero words once the input is exhausted. Decoding
//! uniformly random input yields symbols distributed as `freq / 2^31`; the
//! state never drops below `2^63`, so `state mod 2^31` stays uniform to
//! within about `2^-32`. A 64-bit state is not enough for that: its slots
//! skew measurably towards low values.

pub const PROB_BITS: u32 = 31;
pub const PROB_SCALE: u64 = 1 << PROB_BITS;
const LOWER: u128 = 1 << 63;

/// Encoder; symbols must be pushed in reverse order.
pub struct Encoder {
    words: Vec<u64>,
    x: u128,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { words: Vec::new(), x: LOWER }
    }

    pub fn put(&mut self, start: u64, freq: u64) {
        debug_assert!(freq > 0 && start + freq <= PROB_SCALE);
        let (start, freq) = (start as u128, freq as u128);
        let x_max = ((LOWER >> PROB_BITS) << 64) * freq;
        if self.x >= x_max {
            self.words.push(self.x as u64);
            self.x >>= 64;
        }
        self.x = ((self.x / freq) << PROB_BITS) + (self.x % freq) + start;
    }

    /// State first (low word, then high), then renormalisation words in
    /// read order.
    pub fn finish(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.words.len() * 8 + 16);
        out.extend_from_slice(&(self.x as u64).to_le_bytes());
        out.extend_from_slice(&((self.x >> 64) as u64).to_le_bytes());
        for w in self.words.iter().rev() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    x: u128,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Decoder { bytes, pos: 0, x: 0 };
        let lo = d.word() as u128;
        let hi = d.word() as u128;
        d.x = (hi << 64) | lo;
        d
    }

    fn word(&mut self) -> u64 {
        let mut w = [0u8; 8];
        if let Some(rest) = self.bytes.get(self.pos..) {
            let n = rest.len().min(8);
            w[..n].copy_from_slice(&rest[..n]);
        }
        self.pos += 8;
        u64::from_le_bytes(w)
    }

    /// Slot of the next symbol, in `[0, PROB_SCALE)`.
    pub fn slot(&self) -> u64 {
        (self.x & (PROB_SCALE as u128 - 1)) as u64
    }

    /// Consumes the symbol whose interval `[start, start+freq)` holds `slot()`.
    pub fn advance(&mut self, start: u64, freq: u64) {
        let slot = self.slot();
        // wrapping only matters for garbage input whose first state exceeds 2^127
        self.x = (freq as u128).wrapping_mul(self.x >> PROB_BITS).wrapping_add((slot - start) as u128);
        if self.x < LOWER {
            self.x = (self.x << 64) | self.word() as u128;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Table {
        starts: Vec<u64>,
    }

    impl Table {
        fn from_freqs(freqs: &[u64]) -> Self {
            assert_eq!(freqs.iter().sum::<u64>(), PROB_SCALE);
            let mut starts = vec![0];
            for f in freqs {
                starts.push(starts.last().unwrap() + f);
            }
            Table { starts }
        }

        fn interval(&self, s: usize) -> (u64, u64) {
            (self.starts[s], self.starts[s + 1] - self.starts[s])
        }

        fn encode(&self, syms: &[usize]) -> Vec<u8> {
            let mut e = Encoder::new();
            for &s in syms.iter().rev() {
                let (st, f) = self.interval(s);
                e.put(st, f);
            }
            e.finish()
        }

        fn decode(&self, bytes: &[u8], n: usize) -> Vec<usize> {
            let mut d = Decoder::new(bytes);
            (0..n)
                .map(|_| {
                    let s = self.starts.partition_point(|&v| v <= d.slot()) - 1;
                    let (st, f) = self.interval(s);
                    d.advance(st, f);
                    s
                })
                .collect()
        }
    }

    fn skewed() -> Table {
        // 4 symbols: one tiny, one dominant
        Table::from_freqs(&[1, PROB_SCALE / 2 - 1, PROB_SCALE / 4, PROB_SCALE / 4])
    }

    #[test]
    fn round_trip() {
        let t = skewed();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [0usize, 1, 2, 17, 1000] {
            let syms: Vec<usize> = (0..len).map(|i| if i == 3 { 0 } else { rng.gen_range(1..4) }).collect();
            assert_eq!(t.decode(&t.encode(&syms), len), syms);
        }
    }

    #[test]
    fn output_near_entropy() {
        let t = skewed();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let syms: Vec<usize> = (0..100_000)
            .map(|_| if rng.gen_bool(0.5) { 1 } else { rng.gen_range(2..4) })
            .collect();
        // entropy 1.5 bits/symbol
        let bytes = t.encode(&syms);
        let ideal = 100_000.0 * 1.5 / 8.0;
        assert!((bytes.len() as f64) < ideal * 1.01 + 16.0, "{} vs {ideal}", bytes.len());
    }

    #[test]
    fn random_input_decodes_to_model_distribution() {
        let t = skewed();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bytes: Vec<u8> = (0..2_000_000).map(|_| rng.gen()).collect();
        let out = t.decode(&bytes, 2_000_000);
        let n = out.len() as f64;
        let frac = |s| out.iter().filter(|&&v| v == s).count() as f64 / n;
        // sd is about 3.5e-4; a 64-bit state is off by ~5e-3 here
        assert!((frac(1) - 0.5).abs() < 0.002, "{}", frac(1));
        assert!((frac(2) - 0.25).abs() < 0.002);
        assert!((frac(3) - 0.25).abs() < 0.002);
        assert!(frac(0) < 1e-4);
    }

    #[test]
    fn raw_bits_cost_their_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<u64> = (0..10_000).map(|_| rng.gen_range(0..1 << 16)).collect();
        let mut e = Encoder::new();
        for &v in vals.iter().rev() {
            e.put(v << 15, 1 << 15);
        }
        let bytes = e.finish();
        assert!(bytes.len() <= 20_000 + 24);
        let mut d = Decoder::new(&bytes);
        for &v in &vals {
            assert_eq!(d.slot() >> 15, v);
            d.advance(v << 15, 1 << 15);
        }
    }
}
