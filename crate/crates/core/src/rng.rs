//! Hierarchical, order-independent random streams.
//!
//! A stream is addressed by a master seed plus a path of integers
//! (for example `[purpose, step, particle]`). The ChaCha key is derived
//! from the whole address, so a substream's draws never depend on which
//! other substreams were consumed first or on which thread consumed them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Substream one level deeper.
    pub fn child(&self, id: u64) -> Self {
        let mut path = self.path.clone();
        path.push(id);
        Self {
            seed: self.seed,
            path,
        }
    }

    /// Substream several levels deeper.
    pub fn descend(&self, ids: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(ids);
        Self {
            seed: self.seed,
            path,
        }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut h = splitmix64(self.seed);
        // length first so that [a] and [a, 0] differ
        h = splitmix64(h ^ self.path.len() as u64);
        for &p in &self.path {
            h = splitmix64(h ^ splitmix64(p));
        }
        for chunk in key.chunks_mut(8) {
            h = splitmix64(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

/// Uniform draw in the open interval (0, 1).
#[inline]
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard Gumbel draw `-ln(-ln U)`.
#[inline]
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(-open_unit(rng).ln()).ln()
}

/// Inverse-CDF categorical draw over nonnegative weights.
///
/// Index `i` owns the half-open interval `[c_{i-1}, c_i)` of the
/// cumulative sum, so zero-weight entries are never returned.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "categorical with zero total mass");
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Cumulative table for repeated categorical draws by binary search.
/// Draws follow the same interval convention as [`sample_categorical`].
#[derive(Debug, Clone, PartialEq)]
pub struct Cumulative {
    cum: Vec<f64>,
    last_positive: usize,
}

impl Cumulative {
    pub fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut last_positive = 0;
        let cum = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if w > 0.0 {
                    acc += w;
                    last_positive = i;
                }
                acc
            })
            .collect();
        Self { cum, last_positive }
    }

    pub fn total(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.gen::<f64>() * self.total();
        let i = self.cum.partition_point(|&c| c <= u);
        i.min(self.last_positive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_draws() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(7).descend(&[1, 2, 3]).rng();
            (0..16).map(|_| r.gen()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(7).child(1).child(2).child(3).rng();
            (0..16).map(|_| r.gen()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_addresses_differ() {
        let draw = |s: RngStream| s.rng().gen::<u64>();
        let base = RngStream::new(7);
        assert_ne!(draw(base.child(0)), draw(base.child(1)));
        assert_ne!(draw(base.child(0)), draw(base.descend(&[0, 0])));
        assert_ne!(draw(RngStream::new(7)), draw(RngStream::new(8)));
    }

    #[test]
    fn order_independence() {
        let base = RngStream::new(99);
        let forward: Vec<u64> = (0..8).map(|i| base.child(i).rng().gen()).collect();
        let backward: Vec<u64> = (0..8).rev().map(|i| base.child(i).rng().gen()).collect();
        let mut b = backward;
        b.reverse();
        assert_eq!(forward, b);
    }

    #[test]
    fn categorical_skips_zero_mass() {
        let mut rng = RngStream::new(1).rng();
        for _ in 0..1000 {
            let i = sample_categorical(&[0.0, 0.3, 0.0, 0.7, 0.0], &mut rng);
            assert!(i == 1 || i == 3);
        }
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = RngStream::new(3).rng();
        let w = [0.2, 0.5, 0.3];
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_categorical(&w, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(w) {
            let f = *c as f64 / n as f64;
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() < 4.0 * sd, "freq {f} vs {p}");
        }
    }

    #[test]
    fn cumulative_matches_linear_scan() {
        let w = [0.0, 0.3, 0.0, 0.0, 0.5, 0.2, 0.0];
        let table = Cumulative::new(&w);
        let mut a = RngStream::new(11).rng();
        let mut b = RngStream::new(11).rng();
        for _ in 0..10_000 {
            assert_eq!(table.sample(&mut a), sample_categorical(&w, &mut b));
        }
    }

    #[test]
    fn gumbel_mean() {
        let mut rng = RngStream::new(5).rng();
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| gumbel(&mut rng)).sum::<f64>() / n as f64;
        // Euler-Mascheroni constant, sd = pi/sqrt(6)
        let sd = std::f64::consts::PI / 6f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 0.577_215_664_9).abs() < 4.0 * sd);
    }
}
