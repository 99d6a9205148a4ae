//! Deterministic random streams.
//!
//! Every stochastic component draws from a ChaCha stream keyed by a run seed
//! and a short tag, so independent consumers (data generation, noise,
//! minibatch selection, attacks) never share state and any run is exactly
//! reproducible from its seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a, used only to fold stream tags into the RNG key.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A dedicated stream for (seed, tag). Extra counters distinguish e.g.
/// (epoch, sample) so per-item noise is independent of iteration order.
pub fn stream(seed: u64, tag: &str, counters: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let t = fnv1a(tag.as_bytes());
    let mut c = 0x9e3779b97f4a7c15u64;
    for &k in counters {
        c = c.wrapping_mul(0x100000001b3).wrapping_add(k.rotate_left(17));
    }
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&t.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&(seed ^ t ^ c).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform double in [0, 1) with 53 bits of precision.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform double in [lo, hi).
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal via Box-Muller; platform-stable given the stream.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // u in (0,1] to keep the logarithm finite.
    let u = 1.0 - uniform(rng);
    let v = uniform(rng);
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Fills `out` with iid standard normals.
pub fn gaussian_vec(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = gaussian(rng);
    }
}

/// A gaussian vector of length n.
pub fn gaussian_vec_new(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    gaussian_vec(rng, &mut v);
    v
}

/// Uniform point in the closed Euclidean ball of radius `eps`.
pub fn uniform_in_ball(rng: &mut ChaCha8Rng, n: usize, eps: f64) -> Vec<f64> {
    if eps == 0.0 || n == 0 {
        return vec![0.0; n];
    }
    let mut d = gaussian_vec_new(rng, n);
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-300 {
        return vec![0.0; n];
    }
    let r = eps * uniform(rng).powf(1.0 / n as f64);
    for x in d.iter_mut() {
        *x *= r / norm;
    }
    d
}

/// 64-bit content fingerprint for reports (FNV-1a over raw float bits).
pub fn fingerprint(data: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &x in data {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
