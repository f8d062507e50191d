//! Seeded MurmurHash3 (x86, 32-bit) and the ordered pair-key hashing that
//! maps token pairs onto embedding-table slots.
//!
//! Key format: the decimal ASCII rendering of the first token id, a `'-'`
//! byte (0x2D), then the decimal rendering of the second id. The seed of the
//! table for `(layer, head)` is `murmur3_32("L{layer}H{head}", global_seed)`.
//! Both rules are part of the checkpoint format and must not change.

use crate::error::{Error, Result};
use crate::numerics::Rng;

const C1: u32 = 0xcc9e_2d51;
const C2: u32 = 0x1b87_3593;

/// MurmurHash3 x86_32.
pub fn murmur3_32(bytes: &[u8], seed: u32) -> u32 {
    let mut h = seed;
    let mut chunks = bytes.chunks_exact(4);
    for chunk in &mut chunks {
        let mut k = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        k = k.wrapping_mul(C1).rotate_left(15).wrapping_mul(C2);
        h ^= k;
        h = h.rotate_left(13).wrapping_mul(5).wrapping_add(0xe654_6b64);
    }
    let tail = chunks.remainder();
    if !tail.is_empty() {
        let mut k = 0u32;
        for (i, &b) in tail.iter().enumerate() {
            k ^= (b as u32) << (8 * i);
        }
        k = k.wrapping_mul(C1).rotate_left(15).wrapping_mul(C2);
        h ^= k;
    }
    h ^= bytes.len() as u32;
    fmix32(h)
}

fn fmix32(mut h: u32) -> u32 {
    h ^= h >> 16;
    h = h.wrapping_mul(0x85eb_ca6b);
    h ^= h >> 13;
    h = h.wrapping_mul(0xc2b2_ae35);
    h ^= h >> 16;
    h
}

/// Appends the decimal ASCII rendering of `v`.
fn push_decimal(buf: &mut Vec<u8>, mut v: u32) {
    let mut digits = [0u8; 10];
    let mut n = 0;
    loop {
        digits[n] = b'0' + (v % 10) as u8;
        n += 1;
        v /= 10;
        if v == 0 {
            break;
        }
    }
    buf.extend(digits[..n].iter().rev());
}

/// Key bytes for the ordered pair `(first, second)`.
pub fn pair_key(first: u32, second: u32) -> Vec<u8> {
    let mut buf = Vec::with_capacity(21);
    push_decimal(&mut buf, first);
    buf.push(b'-');
    push_decimal(&mut buf, second);
    buf
}

/// Seed of the table for `(layer, head)`.
pub fn table_seed(global_seed: u32, layer: usize, head: usize) -> u32 {
    murmur3_32(format!("L{layer}H{head}").as_bytes(), global_seed)
}

/// Maps ordered token pairs into `[0, table_size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairHasher {
    seed: u32,
    table_size: usize,
}

impl PairHasher {
    pub fn new(seed: u32, table_size: usize) -> Result<Self> {
        if table_size == 0 || table_size as u64 > u32::MAX as u64 + 1 {
            return Err(Error::Config(format!("table size {table_size} out of range")));
        }
        Ok(PairHasher { seed, table_size })
    }

    pub fn for_table(global_seed: u32, layer: usize, head: usize, table_size: usize) -> Result<Self> {
        Self::new(table_seed(global_seed, layer, head), table_size)
    }

    pub fn seed(&self) -> u32 {
        self.seed
    }

    pub fn table_size(&self) -> usize {
        self.table_size
    }

    pub fn slot_of_key(&self, key: &[u8]) -> usize {
        (murmur3_32(key, self.seed) as u64 % self.table_size as u64) as usize
    }

    pub fn pair_index(&self, first: u32, second: u32) -> usize {
        self.slot_of_key(&pair_key(first, second))
    }
}

/// Convenience form of [`PairHasher::pair_index`].
pub fn pair_index(first: u32, second: u32, hasher: &PairHasher) -> usize {
    hasher.pair_index(first, second)
}

/// Key bytes of every ordered pair of a token sequence, built once and hashed
/// under as many table seeds as needed.
#[derive(Clone, Debug)]
pub struct PairKeys {
    len: usize,
    bytes: Vec<u8>,
    offsets: Vec<usize>,
}

impl PairKeys {
    pub fn new(tokens: &[u32]) -> Self {
        let len = tokens.len();
        let mut bytes = Vec::with_capacity(len * len * 8);
        let mut offsets = Vec::with_capacity(len * len + 1);
        offsets.push(0);
        let mut rendered: Vec<Vec<u8>> = Vec::with_capacity(len);
        for &t in tokens {
            let mut b = Vec::new();
            push_decimal(&mut b, t);
            rendered.push(b);
        }
        for a in &rendered {
            for b in &rendered {
                bytes.extend_from_slice(a);
                bytes.push(b'-');
                bytes.extend_from_slice(b);
                offsets.push(bytes.len());
            }
        }
        PairKeys { len, bytes, offsets }
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn key(&self, i: usize, j: usize) -> &[u8] {
        let p = i * self.len + j;
        &self.bytes[self.offsets[p]..self.offsets[p + 1]]
    }

    /// Slots in row-major `(i, j)` order, `m * m` entries.
    pub fn slots(&self, hasher: &PairHasher) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len * self.len);
        for w in self.offsets.windows(2) {
            out.push(hasher.slot_of_key(&self.bytes[w[0]..w[1]]));
        }
        out
    }

    /// Slots of the `m - 1` non-self pairs of each position, `m * (m - 1)` entries.
    pub fn slots_without_self(&self, hasher: &PairHasher) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len * self.len.saturating_sub(1));
        for i in 0..self.len {
            for j in 0..self.len {
                if i != j {
                    out.push(hasher.slot_of_key(self.key(i, j)));
                }
            }
        }
        out
    }
}

/// Empirical rate with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateEstimate {
    pub hits: u64,
    pub samples: u64,
    pub rate: f64,
    pub std_error: f64,
}

impl RateEstimate {
    fn new(hits: u64, samples: u64) -> Self {
        let rate = hits as f64 / samples as f64;
        RateEstimate {
            hits,
            samples,
            rate,
            std_error: (rate * (1.0 - rate) / samples as f64).sqrt(),
        }
    }

    /// Standard error of a rate `p` over this many samples.
    pub fn expected_std_error(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.samples as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionStats {
    pub table_size: usize,
    pub per_head: Vec<RateEstimate>,
    /// All heads colliding on the same pair of pairs.
    pub simultaneous: RateEstimate,
}

/// Id range random word pairs are drawn from.
const SAMPLE_VOCAB: u64 = 1 << 20;

/// Draws `sample_pairs` couples of distinct ordered word pairs and counts how
/// often they land in the same slot, per head and on all heads at once. Head
/// tables use independent seeds derived from one random global seed.
pub fn estimate_collision_rate(
    table_size: usize,
    heads: usize,
    sample_pairs: usize,
    rng: &mut Rng,
) -> Result<CollisionStats> {
    if table_size < 2 {
        return Err(Error::Config(format!("table size {table_size} must be at least 2")));
    }
    if heads == 0 {
        return Err(Error::Config("collision estimate needs at least one head".into()));
    }
    if sample_pairs < 1000 {
        return Err(Error::Config(format!("{sample_pairs} samples is below the minimum of 1000")));
    }
    let global = rng.next_u32();
    let hashers = (0..heads)
        .map(|h| PairHasher::for_table(global, 0, h, table_size))
        .collect::<Result<Vec<_>>>()?;

    let mut per_head = vec![0u64; heads];
    let mut all = 0u64;
    let draw = |rng: &mut Rng| (rng.below(SAMPLE_VOCAB) as u32, rng.below(SAMPLE_VOCAB) as u32);
    for _ in 0..sample_pairs {
        let p = draw(rng);
        let q = loop {
            let q = draw(rng);
            if q != p {
                break q;
            }
        };
        let (kp, kq) = (pair_key(p.0, p.1), pair_key(q.0, q.1));
        let mut every = true;
        for (h, hasher) in hashers.iter().enumerate() {
            if hasher.slot_of_key(&kp) == hasher.slot_of_key(&kq) {
                per_head[h] += 1;
            } else {
                every = false;
            }
        }
        if every {
            all += 1;
        }
    }
    let n = sample_pairs as u64;
    Ok(CollisionStats {
        table_size,
        per_head: per_head.into_iter().map(|c| RateEstimate::new(c, n)).collect(),
        simultaneous: RateEstimate::new(all, n),
    })
}
