//! Seeding, sampling, and deterministic parallelism helpers.
//!
//! All randomness in the crate flows through seeded [`ChaCha12Rng`] streams.
//! Independent units of work (rollouts, planner candidates, trials) get their
//! own stream derived from a master seed with [`substream`], so results do not
//! depend on scheduling or on how work is split across threads.

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The RNG used throughout the crate. ChaCha has a stable, portable stream
/// definition, unlike `StdRng` whose algorithm may change between releases.
pub type Stream = ChaCha12Rng;

/// splitmix64 finalizer; good avalanche for seed derivation.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a master seed and a tag path.
///
/// `substream(seed, &[a, b])` and `substream(seed, &[a, c])` are unrelated
/// streams for `b != c`.
pub fn substream(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ 0x5851_f42d_4c95_7f2d);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Seeded stream for a tag path under a master seed.
pub fn stream(master: u64, tags: &[u64]) -> Stream {
    Stream::seed_from_u64(substream(master, tags))
}

/// Standard normal variate via the polar (Marsaglia) method.
///
/// Stateless per call: the second variate of each accepted pair is discarded,
/// so a draw sequence depends only on the RNG state, never on call history.
pub fn standard_normal<R: RngExt>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Numerically stable softplus, `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on (0, inf).
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv requires positive input");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Runs `f` over `0..n` in fixed-size chunks, in parallel when `parallel` is
/// set, and combines per-chunk outputs strictly in chunk order.
///
/// Because every chunk is an independent unit with a fixed boundary, the
/// combined result is bitwise identical whether run sequentially or on any
/// number of threads.
pub fn chunked_map_reduce<T, F, C>(n: usize, chunk: usize, parallel: bool, f: F, mut combine: C)
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    C: FnMut(T),
{
    assert!(chunk > 0);
    let ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(n))
        .collect();
    if parallel {
        use rayon::prelude::*;
        let outs: Vec<T> = ranges.into_par_iter().map(f).collect();
        for o in outs {
            combine(o);
        }
    } else {
        for r in ranges {
            combine(f(r));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ() {
        let a = substream(7, &[1, 2]);
        let b = substream(7, &[1, 3]);
        let c = substream(8, &[1, 2]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, substream(7, &[1, 2]));
    }

    #[test]
    fn normal_moments() {
        let mut rng = stream(0, &[42]);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = standard_normal(&mut rng);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn softplus_roundtrip() {
        for &x in &[-5.0, -0.3, 0.0, 0.55, 4.0, 40.0] {
            let y = softplus(x);
            assert!((softplus_inv(y) - x).abs() < 1e-9);
        }
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn chunked_reduce_matches_sequential() {
        let f = |r: std::ops::Range<usize>| -> f64 { r.map(|i| (i as f64).sin()).sum() };
        let mut seq = Vec::new();
        chunked_map_reduce(1000, 64, false, f, |v| seq.push(v));
        let mut par = Vec::new();
        chunked_map_reduce(1000, 64, true, f, |v| par.push(v));
        assert_eq!(seq.len(), par.len());
        for (a, b) in seq.iter().zip(par.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
