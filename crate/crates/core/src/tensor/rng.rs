//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream_id, index)`, computed with
//! the Philox4x32-10 block cipher. There is no hidden state to advance, so a
//! device and the server that only knows the device's seed produce the same
//! perturbation vectors, and parallel workers can read any index without
//! coordinating.

use rand::{RngCore, SeedableRng};

/// Normal pairs are addressed below this bound; higher block bits count
/// rejection attempts.
const PAIR_LIMIT: u64 = 1 << 48;

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// One application of Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = ctr;
    let mut k = key;
    for round in 0..10 {
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
        if round < 9 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
    }
    c
}

/// SplitMix64 finalizer, used to hash labels into seeds and stream ids.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes an ordered list of labels into one 64-bit value.
pub fn hash_labels(labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &l| mix64(acc ^ mix64(l)))
}

/// Handle to one independent random stream.
///
/// Identical `(seed, stream_id)` pairs yield identical sequences on every
/// platform and under every thread schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeededRng {
    pub seed: u64,
    pub stream_id: u64,
}

impl SeededRng {
    pub const fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Child stream keyed by an ordered list of labels, e.g. `(device, round, sample)`.
    /// The seed is kept; only the stream id changes.
    pub fn derive(&self, labels: &[u64]) -> SeededRng {
        let mut all = Vec::with_capacity(labels.len() + 1);
        all.push(self.stream_id);
        all.extend_from_slice(labels);
        SeededRng {
            seed: self.seed,
            stream_id: hash_labels(&all),
        }
    }

    /// Fresh 64-bit seed keyed by labels. Used where a value has to travel as a
    /// bare seed (the seed-trick upload).
    pub fn derive_seed(&self, labels: &[u64]) -> u64 {
        let mut all = Vec::with_capacity(labels.len() + 2);
        all.push(self.seed);
        all.push(self.stream_id);
        all.extend_from_slice(labels);
        hash_labels(&all)
    }

    /// Raw 128-bit block `index` of this stream.
    #[inline]
    pub fn block(&self, index: u64) -> [u32; 4] {
        let ctr = [
            index as u32,
            (index >> 32) as u32,
            self.stream_id as u32,
            (self.stream_id >> 32) as u32,
        ];
        let key = [self.seed as u32, (self.seed >> 32) as u32];
        philox4x32_10(ctr, key)
    }

    /// Uniform draw in (0, 1] with 53 bits of resolution, at position `index`.
    #[inline]
    pub fn uniform_at(&self, index: u64) -> f64 {
        let b = self.block(index);
        open_unit(u64::from(b[0]) | (u64::from(b[1]) << 32))
    }

    /// Standard normal at position `index`.
    ///
    /// Positions `2p` and `2p + 1` come from one polar (Marsaglia) transform
    /// of pair `p`; see [`SeededRng::normal_pair`].
    #[inline]
    pub fn normal_at(&self, index: u64) -> f64 {
        let (z0, z1) = self.normal_pair(index / 2);
        if index.is_multiple_of(2) {
            z0
        } else {
            z1
        }
    }

    /// The normal pair at positions `2·pair` and `2·pair + 1`.
    ///
    /// Attempt `a` reads block `pair + a·2^48`; the first point strictly
    /// inside the unit disc is accepted. The attempt counter lives in the high
    /// bits so every pair stays addressable without touching its neighbours.
    #[inline]
    pub fn normal_pair(&self, pair: u64) -> (f64, f64) {
        debug_assert!(pair < PAIR_LIMIT);
        let mut attempt = 0u64;
        loop {
            let b = self.block(pair.wrapping_add(attempt << 48));
            let u = 2.0 * open_unit(u64::from(b[0]) | (u64::from(b[1]) << 32)) - 1.0;
            let v = 2.0 * open_unit(u64::from(b[2]) | (u64::from(b[3]) << 32)) - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                return (u * f, v * f);
            }
            attempt += 1;
        }
    }

    /// Fills `out` with standard normals `0..out.len()` of this stream.
    pub fn fill_standard_normal(&self, out: &mut [f64]) {
        let idx = out.len().saturating_sub(1) as u64;
        let mut chunks = out.chunks_exact_mut(2);
        for (block, pair) in (0u64..).zip(&mut chunks) {
            let (z0, z1) = self.normal_pair(block);
            pair[0] = z0;
            pair[1] = z1;
        }
        let rem = chunks.into_remainder();
        if let Some(last) = rem.first_mut() {
            *last = self.normal_at(idx);
        }
    }

    /// `amount` distinct indices from `0..length`, ascending.
    pub fn sample_indices(&self, length: usize, amount: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.stream(), length, amount).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Sequential adapter for APIs that want a `rand::RngCore`.
    pub fn stream(&self) -> RngStream {
        RngStream {
            rng: *self,
            next_block: 0,
            buf: [0; 4],
            buf_pos: 4,
        }
    }
}

#[inline]
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `length` i.i.d. draws from N(0, sigma^2).
///
/// The output is `sigma` times a fixed standard-normal stream, so scaling
/// `sigma` scales the vector exactly.
pub fn seeded_gaussian(rng: &SeededRng, length: usize, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; length];
    rng.fill_standard_normal(&mut out);
    if sigma != 1.0 {
        for v in &mut out {
            *v *= sigma;
        }
    }
    out
}

/// Sequential reader over a [`SeededRng`] stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: SeededRng,
    next_block: u64,
    buf: [u32; 4],
    buf_pos: usize,
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        if self.buf_pos == 4 {
            self.buf = self.rng.block(self.next_block);
            self.next_block += 1;
            self.buf_pos = 0;
        }
        let v = self.buf[self.buf_pos];
        self.buf_pos += 1;
        v
    }

    fn next_u64(&mut self) -> u64 {
        let lo = u64::from(self.next_u32());
        let hi = u64::from(self.next_u32());
        lo | (hi << 32)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(4) {
            let v = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

impl SeedableRng for RngStream {
    type Seed = [u8; 16];

    fn from_seed(seed: Self::Seed) -> Self {
        let s = u64::from_le_bytes(seed[..8].try_into().unwrap());
        let id = u64::from_le_bytes(seed[8..].try_into().unwrap());
        SeededRng::new(s, id).stream()
    }
}
