//! Seeded randomness and the samplers built on it.
//!
//! Every stream is a ChaCha8 generator whose 256-bit key is the literal tuple
//! `(seed, client, epoch, purpose)`, so two distinct tuples can never share a
//! stream. Gamma variates use Marsaglia and Tsang's squeeze method (with the
//! `u^(1/a)` boost for shapes below one); Dirichlet and Beta draws are built
//! from normalized Gamma variates.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// What a derived stream is used for. Separate purposes keep, say, batch
/// sampling identical between variants that differ only in hallucination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    Batches,
    Hallucination,
    Data,
    Demo,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Batches => 2,
            Purpose::Hallucination => 3,
            Purpose::Data => 4,
            Purpose::Demo => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub client: u32,
    pub epoch: u32,
    pub purpose: Purpose,
}

#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng::from_words([seed, 0, 0, 0])
    }

    pub fn derive(key: StreamKey) -> Self {
        Rng::from_words([
            key.seed,
            u64::from(key.client),
            u64::from(key.epoch),
            key.purpose.tag(),
        ])
    }

    fn from_words(words: [u64; 4]) -> Self {
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        Rng(ChaCha8Rng::from_seed(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform on `(0, 1)`; safe to take a logarithm of.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.0.random_range(0..n)
    }

    /// Picks `k` distinct elements of `pool` uniformly (partial Fisher-Yates).
    pub fn choose_distinct<T: Copy>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        assert!(k <= pool.len());
        let mut scratch = pool.to_vec();
        for i in 0..k {
            let j = i + self.below(scratch.len() - i);
            scratch.swap(i, j);
        }
        scratch.truncate(k);
        scratch
    }
}

/// Draws `mean + sqrt(variance) * eps` with `eps ~ N(0, I)`.
pub fn sample_gaussian(mean: &[f64], variance: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    if mean.len() != variance.len() {
        return Err(Error::Dimension(format!(
            "mean has {} entries, variance {}",
            mean.len(),
            variance.len()
        )));
    }
    if let Some((i, v)) = variance
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
    {
        return Err(Error::Domain(format!("variance[{i}] = {v}")));
    }
    Ok(mean
        .iter()
        .zip(variance)
        .map(|(&m, &v)| {
            let eps = rng.normal();
            if v == 0.0 {
                m
            } else {
                m + v.sqrt() * eps
            }
        })
        .collect())
}

/// Natural log of a `Gamma(shape, 1)` variate.
///
/// Working in log space keeps Dirichlet draws with tiny concentrations from
/// underflowing to an all-zero vector.
fn sample_log_gamma(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        let boosted = sample_log_gamma(shape + 1.0, rng);
        return boosted + rng.uniform_open().ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.uniform_open();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

pub fn sample_gamma(shape: f64, rng: &mut Rng) -> Result<f64> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(Error::Domain(format!("gamma shape {shape}")));
    }
    Ok(sample_log_gamma(shape, rng).exp())
}

/// Draws a probability vector from `Dir(alpha)`.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::Domain("empty concentration vector".into()));
    }
    if let Some((i, a)) = alpha
        .iter()
        .enumerate()
        .find(|(_, a)| !(**a > 0.0) || !a.is_finite())
    {
        return Err(Error::Domain(format!("alpha[{i}] = {a}")));
    }
    let logs: Vec<f64> = alpha.iter().map(|&a| sample_log_gamma(a, rng)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    Ok(w)
}

/// Draws from `Beta(a, b)` as `X / (X + Y)` with `X ~ Gamma(a)`, `Y ~ Gamma(b)`.
pub fn sample_beta(a: f64, b: f64, rng: &mut Rng) -> Result<f64> {
    let w = sample_dirichlet(&[a, b], rng)?;
    Ok(w[0])
}
