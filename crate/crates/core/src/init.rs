//! Parameter initializers. Word token vectors are derived deterministically
//! from the word string itself, so the same word always maps to the same
//! vector regardless of vocabulary order or run seed.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Pseudo-random unit vector seeded by the word string.
pub fn word_unit_vector(word: &str, dim: usize, salt: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(word) ^ salt);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    v
}

pub fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| { let z: f64 = StandardNormal.sample(rng); z * std }).collect()
}

/// Fan-in scaled init for a `rows x cols` matrix applied as `x * W`.
pub fn linear_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    normal_vec(rng, rows * cols, 1.0 / (rows as f64).sqrt())
}

pub fn uniform_seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
