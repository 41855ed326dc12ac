//! Deterministic randomness.
//!
//! Two independent sources live here:
//!
//! * A stateless, counter-based standard-normal generator keyed by
//!   `(base_seed, index, coordinate)`. Server and clients expand the same
//!   perturbation vector from a seed alone, so the algorithm is fixed and
//!   bit-exact:
//!
//!   1. `key    = mix64(base_seed + 0x9E3779B97F4A7C15)`
//!   2. `stream = mix64(key ^ (index * 0xD1B54A32D192ED03))`
//!   3. `word(c) = mix64(stream + (c + 1) * 0x9E3779B97F4A7C15)` (wrapping)
//!   4. coordinate `j` uses pair `p = j / 2`: `u1, u2` are built from
//!      `word(2p)` and `word(2p + 1)` as `((w >> 11) + 0.5) * 2^-53`
//!   5. Box-Muller: `r = sqrt(-2 ln u1)`; even `j` takes `r cos(2 pi u2)`,
//!      odd `j` takes `r sin(2 pi u2)`.
//!
//!   `mix64` is the SplitMix64 finalizer; transcendental functions come
//!   from `libm` so results do not depend on the platform libm.
//!
//! * Sub-seed derivation for everything else (initialization, shuffles,
//!   minibatches): SHA-256 over a domain tag, the master seed and any
//!   numeric parts, truncated to 64 bits. Each consumer then seeds a
//!   ChaCha8 generator from its sub-seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const INDEX_MUL: u64 = 0xD1B5_4A32_D192_ED03;
const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn unit_open(w: u64) -> f64 {
    ((w >> 11) as f64 + 0.5) * TWO_POW_NEG_53
}

/// Counter-based normal stream for one `(base_seed, index)` pair.
#[derive(Debug, Clone, Copy)]
pub struct NormalStream {
    stream: u64,
}

impl NormalStream {
    pub fn new(base_seed: u64, index: u64) -> Self {
        let key = mix64(base_seed.wrapping_add(GOLDEN));
        NormalStream {
            stream: mix64(key ^ index.wrapping_mul(INDEX_MUL)),
        }
    }

    #[inline]
    fn word(&self, counter: u64) -> u64 {
        mix64(
            self.stream
                .wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)),
        )
    }

    #[inline]
    fn pair(&self, pair: u64) -> (f64, f64) {
        let u1 = unit_open(self.word(2 * pair));
        let u2 = unit_open(self.word(2 * pair + 1));
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let (s, c) = libm::sincos(2.0 * std::f64::consts::PI * u2);
        (r * c, r * s)
    }

    /// Value at a single coordinate.
    pub fn at(&self, coordinate: usize) -> f64 {
        let (c, s) = self.pair((coordinate / 2) as u64);
        if coordinate.is_multiple_of(2) {
            c
        } else {
            s
        }
    }

    /// Fills `out` with coordinates `0..out.len()`.
    pub fn fill(&self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        let mut pair = 0u64;
        for chunk in &mut chunks {
            let (c, s) = self.pair(pair);
            chunk[0] = c;
            chunk[1] = s;
            pair += 1;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.pair(pair).0;
        }
    }
}

/// Derives a 64-bit sub-seed from a master seed, a domain tag and numeric parts.
pub fn derive_seed(master: u64, domain: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(master.to_le_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// ChaCha8 generator seeded from a derived sub-seed.
pub fn seeded_rng(master: u64, domain: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, parts))
}
