//! Reproducible random streams and reductions.
//!
//! Every path owns its own ChaCha stream keyed by `(seed, domain)` with the path
//! index as the stream id, so adding paths or changing the worker count never
//! perturbs the draws of existing paths. Reductions use a pairwise tree whose
//! shape depends only on the input length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream domains; distinct domains never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    Noise = 0,
    Action = 1,
    Probe = 2,
    Restart = 3,
}

pub type PathRng = ChaCha8Rng;

/// Counter-based stream for `(seed, domain, index)`.
pub fn path_stream(seed: u64, domain: StreamDomain, index: u64) -> PathRng {
    let key = splitmix64(seed ^ splitmix64(0x7eab_5f1d_0000_0000 | domain as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn std_normal(rng: &mut PathRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_std_normal(rng: &mut PathRng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// Pairwise summation with a fixed tree shape.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate { value: f64::NAN, stderr: f64::NAN };
        }
        let mean = pairwise_sum(xs) / n as f64;
        if n == 1 {
            return Estimate { value: mean, stderr: 0.0 };
        }
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = pairwise_sum(&sq) / (n as f64 - 1.0);
        Estimate { value: mean, stderr: (var / n as f64).sqrt() }
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined_stderr(&self, other: &Estimate) -> f64 {
        (self.stderr * self.stderr + other.stderr * other.stderr).sqrt()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `log` of the standard multivariate normal density.
pub fn log_std_normal(z: &[f64]) -> f64 {
    let k = z.len() as f64;
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * k * (2.0 * std::f64::consts::PI).ln()
}

/// Deterministic parallel reduction of `f(i)` over `0..n`: fixed-size chunks are
/// summed sequentially, then combined in chunk order.
pub fn chunked_sum_vec<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    const CHUNK: usize = 1024;
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_of_order() {
        let mut a = path_stream(7, StreamDomain::Noise, 3);
        let _ = path_stream(7, StreamDomain::Noise, 2).random::<u64>();
        let mut b = path_stream(7, StreamDomain::Noise, 3);
        assert_eq!(a.random::<u64>(), b.random::<u64>());
        let mut c = path_stream(7, StreamDomain::Action, 3);
        let mut d = path_stream(7, StreamDomain::Noise, 3);
        assert_ne!(c.random::<u64>(), d.random::<u64>());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn estimate_of_constant_has_zero_stderr() {
        let e = Estimate::from_samples(&[2.0; 10]);
        assert_eq!(e.value, 2.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn normal_cdf_values() {
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((std_normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
    }
}
