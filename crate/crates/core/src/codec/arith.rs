//! Carry-less binary arithmetic coder with 32-bit range and 16-bit probabilities.

/// Probability scale: `p = 65536` would mean certainty.
const ONE: u32 = 1 << 16;
const P_MIN: u32 = 32;
const P_MAX: u32 = ONE - 32;
const MAX_SHIFT: u8 = 7;
const MIN_SHIFT: u8 = 1;

/// Adaptive estimate of `P(bit = 1)`.
///
/// Starts at ½ and moves toward each observed bit by `1/2^shift` of the gap,
/// with `shift` growing from 1 to 7 as observations accumulate, so early bits
/// adapt fast and later estimates settle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitModel {
    p: u32,
    shift: u8,
}

impl Default for BitModel {
    fn default() -> Self {
        Self {
            p: ONE / 2,
            shift: MIN_SHIFT,
        }
    }
}

impl BitModel {
    pub fn p1(&self) -> u32 {
        self.p
    }

    pub fn update(&mut self, bit: bool) {
        if bit {
            self.p += (ONE - self.p) >> self.shift;
        } else {
            self.p -= self.p >> self.shift;
        }
        self.p = self.p.clamp(P_MIN, P_MAX);
        if self.shift < MAX_SHIFT {
            self.shift += 1;
        }
    }
}

fn split(x1: u32, x2: u32, p1: u32) -> u32 {
    x1 + (((x2 - x1) as u64 * p1 as u64) >> 16) as u32
}

#[derive(Debug)]
pub struct Encoder {
    x1: u32,
    x2: u32,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            x1: 0,
            x2: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Codes `bit` with `P(1) = p1 / 65536`.
    pub fn encode(&mut self, bit: bool, p1: u32) {
        let xmid = split(self.x1, self.x2, p1);
        if bit {
            self.x2 = xmid;
        } else {
            self.x1 = xmid + 1;
        }
        while (self.x1 ^ self.x2) & 0xff00_0000 == 0 {
            self.out.push((self.x2 >> 24) as u8);
            self.x1 <<= 8;
            self.x2 = (self.x2 << 8) | 0xff;
        }
    }

    /// Codes `bit` with `model` and updates it.
    pub fn encode_with(&mut self, bit: bool, model: &mut BitModel) {
        self.encode(bit, model.p1());
        model.update(bit);
    }

    /// Emits one byte that, followed by implicit zeros, lies in the final interval.
    pub fn finish(mut self) -> Vec<u8> {
        // the top bytes of x1 and x2 differ, so x1's top byte is at most 254
        self.out.push((self.x1 >> 24) as u8 + 1);
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    x1: u32,
    x2: u32,
    x: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            x1: 0,
            x2: u32::MAX,
            x: 0,
            data,
            pos: 0,
        };
        for _ in 0..4 {
            d.x = (d.x << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes consumed so far, counting implicit zeros past the end.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn decode(&mut self, p1: u32) -> bool {
        let xmid = split(self.x1, self.x2, p1);
        let bit = self.x <= xmid;
        if bit {
            self.x2 = xmid;
        } else {
            self.x1 = xmid + 1;
        }
        while (self.x1 ^ self.x2) & 0xff00_0000 == 0 {
            self.x1 <<= 8;
            self.x2 = (self.x2 << 8) | 0xff;
            self.x = (self.x << 8) | self.next_byte() as u32;
        }
        bit
    }

    pub fn decode_with(&mut self, model: &mut BitModel) -> bool {
        let bit = self.decode(model.p1());
        model.update(bit);
        bit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empirical_bound(bits: &[bool]) -> f64 {
        let n = bits.len() as f64;
        let ones = bits.iter().filter(|&&b| b).count() as f64;
        let h = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -p * p.log2() - (1.0 - p) * (1.0 - p).log2() };
        n * h(ones / n)
    }

    #[test]
    fn skewed_source_is_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bits: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.99)).collect();
        let mut enc = Encoder::new();
        let mut m = BitModel::default();
        for &b in &bits {
            enc.encode_with(b, &mut m);
        }
        let out = enc.finish();
        let bound = empirical_bound(&bits);
        let used = 8.0 * out.len() as f64;
        assert!(used <= 1.25 * bound + 64.0, "{used} bits vs bound {bound}");
        let mut dec = Decoder::new(&out);
        let mut m = BitModel::default();
        for &b in &bits {
            assert_eq!(dec.decode_with(&mut m), b);
        }
    }

    #[test]
    fn empty_message_is_one_byte() {
        assert_eq!(Encoder::new().finish().len(), 1);
    }

    #[test]
    fn model_adapts() {
        let mut m = BitModel::default();
        for _ in 0..2000 {
            m.update(true);
        }
        // settles within one update step of certainty
        assert!(m.p1() > ONE - (ONE >> MAX_SHIFT) && m.p1() <= P_MAX);
        for _ in 0..2000 {
            m.update(false);
        }
        assert!(m.p1() < ONE >> MAX_SHIFT && m.p1() >= P_MIN);
    }

    proptest! {
        #[test]
        fn round_trip_any_context_sequence(
            bits in proptest::collection::vec((any::<bool>(), 0usize..4), 0..2000),
            fixed in proptest::collection::vec(1u32..65535, 4),
        ) {
            let mut enc = Encoder::new();
            let mut models = [BitModel::default(); 4];
            for (i, &(b, c)) in bits.iter().enumerate() {
                if i % 3 == 0 {
                    enc.encode(b, fixed[c]);
                } else {
                    enc.encode_with(b, &mut models[c]);
                }
            }
            let out = enc.finish();
            let mut dec = Decoder::new(&out);
            let mut models = [BitModel::default(); 4];
            for (i, &(b, c)) in bits.iter().enumerate() {
                let got = if i % 3 == 0 { dec.decode(fixed[c]) } else { dec.decode_with(&mut models[c]) };
                prop_assert_eq!(got, b);
            }
        }
    }
}
