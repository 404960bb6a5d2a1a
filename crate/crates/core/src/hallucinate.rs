//! Feature hallucination (re-styling normalized features with another domain's
//! mean and variance), domain hallucination (Dirichlet-weighted mixing of
//! sampled domain statistics), and the two feature-mixup baselines.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{sample_beta, sample_dirichlet, Rng};
use crate::stats::{sample_domain_vectors, DomainStats, DomainVectors};

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(w: &[f64]) -> Result<()> {
    if w.iter().any(|&x| !x.is_finite() || x < -SIMPLEX_TOL) {
        return Err(Error::Domain(format!("weights {w:?} leave the simplex")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!("weights sum to {s}")));
    }
    Ok(())
}

/// `mu + sigma ⊙ x` applied to every row of the batch-normalized input.
pub fn feature_hallucinate(bn_features: &Matrix, target: &DomainVectors) -> Result<Matrix> {
    let d = bn_features.cols();
    if target.mu.len() != d || target.sigma_sq.len() != d {
        return Err(Error::Dimension(format!(
            "features have {d} dims, target domain {}",
            target.mu.len()
        )));
    }
    let sigma = target.std();
    let mut out = bn_features.clone();
    for r in 0..out.rows() {
        for ((x, m), s) in out.row_mut(r).iter_mut().zip(&target.mu).zip(&sigma) {
            *x = m + s * *x;
        }
    }
    Ok(out)
}

/// Gradient with respect to the normalized input: `sigma ⊙ upstream`.
pub fn feature_hallucinate_backward(target: &DomainVectors, upstream: &Matrix) -> Result<Matrix> {
    if upstream.cols() != target.dim() {
        return Err(Error::Dimension("upstream width differs from target domain".into()));
    }
    let sigma = target.std();
    let mut out = upstream.clone();
    for r in 0..out.rows() {
        for (g, s) in out.row_mut(r).iter_mut().zip(&sigma) {
            *g *= s;
        }
    }
    Ok(out)
}

/// Convex combination of domain means and of domain variances under `w`.
pub fn domain_hallucinate(domains: &[DomainVectors], w: &[f64]) -> Result<DomainVectors> {
    if domains.is_empty() || domains.len() != w.len() {
        return Err(Error::Dimension(format!(
            "{} domains but {} weights",
            domains.len(),
            w.len()
        )));
    }
    check_simplex(w)?;
    let d = domains[0].dim();
    if domains.iter().any(|v| v.mu.len() != d || v.sigma_sq.len() != d) {
        return Err(Error::Dimension("domain vectors differ in length".into()));
    }
    let mut mu = vec![0.0; d];
    let mut sigma_sq = vec![0.0; d];
    for (dom, &wi) in domains.iter().zip(w) {
        for j in 0..d {
            mu[j] += wi * dom.mu[j];
            sigma_sq[j] += wi * dom.sigma_sq[j];
        }
    }
    Ok(DomainVectors { mu, sigma_sq })
}

/// `Σ_k w_k · batches[k]`, elementwise.
pub fn dirichlet_feature_mixup(batches: &[Matrix], w: &[f64]) -> Result<Matrix> {
    if batches.is_empty() || batches.len() != w.len() {
        return Err(Error::Dimension(format!(
            "{} batches but {} weights",
            batches.len(),
            w.len()
        )));
    }
    check_simplex(w)?;
    let (n, d) = batches[0].shape();
    let mut out = Matrix::zeros(n, d);
    for (b, &wk) in batches.iter().zip(w) {
        b.ensure_shape(n, d, "mixup batch")?;
        out.axpy(wk, b)?;
    }
    Ok(out)
}

/// `lambda · a + (1 - lambda) · b`.
pub fn mix_pair(a: &Matrix, b: &Matrix, lambda: f64) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "mixup of {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("mix weight {lambda}")));
    }
    let mut out = a.scaled(lambda);
    out.axpy(1.0 - lambda, b)?;
    Ok(out)
}

/// Two-batch mixup with `lambda ~ Beta(1, 1)`. Returns the mixed batch and
/// the weight that produced it.
pub fn beta_feature_mixup(a: &Matrix, b: &Matrix, rng: &mut Rng) -> Result<(Matrix, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension("mixup batches differ in shape".into()));
    }
    let lambda = sample_beta(1.0, 1.0, rng)?;
    Ok((mix_pair(a, b, lambda)?, lambda))
}

/// Sampled statistics for one local round: a domain-vector draw for every
/// client (indexed like the DFS list it came from), the Dirichlet weights, and
/// the novel domain they produce.
#[derive(Clone, Debug, PartialEq)]
pub struct HallucinationPlan {
    pub targets: Vec<DomainVectors>,
    pub weights: Vec<f64>,
    pub novel: DomainVectors,
}

impl HallucinationPlan {
    pub fn draw(dfs_all: &[DomainStats], alpha: &[f64], rng: &mut Rng) -> Result<Self> {
        if dfs_all.len() != alpha.len() {
            return Err(Error::Dimension(format!(
                "{} domains but alpha has {} entries",
                dfs_all.len(),
                alpha.len()
            )));
        }
        let targets = dfs_all
            .iter()
            .map(|dfs| sample_domain_vectors(dfs, rng))
            .collect::<Result<Vec<_>>>()?;
        let weights = sample_dirichlet(alpha, rng)?;
        let novel = domain_hallucinate(&targets, &weights)?;
        Ok(HallucinationPlan {
            targets,
            weights,
            novel,
        })
    }
}
