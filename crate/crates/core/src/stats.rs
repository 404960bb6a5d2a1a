//! Identity-level and domain-level feature statistics.
//!
//! A client summarizes its features per identity (mean and variance rows),
//! then collapses those rows into four `d`-vectors: the mean and spread of
//! identity means, and the mean and spread of identity variances. Only those
//! four vectors ever leave the client.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{sample_gaussian, Rng};
use crate::wire::{put_f64s, put_u32, Reader};

/// Lower bound applied to sampled domain variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct IdStats {
    /// One row per identity, ordered by ascending label.
    pub means: Matrix,
    pub variances: Matrix,
    /// Row `r` describes identity `labels[r]`.
    pub labels: Vec<u32>,
}

impl IdStats {
    pub fn row_of(&self, label: u32) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn identity_count(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStats {
    pub mu_hat: Vec<f64>,
    pub sigma_hat_sq: Vec<f64>,
    pub mu_tilde: Vec<f64>,
    pub sigma_tilde_sq: Vec<f64>,
    pub client_id: u32,
    pub epoch_stamp: u32,
}

impl DomainStats {
    pub fn dim(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn with_stamp(mut self, client_id: u32, epoch_stamp: u32) -> Self {
        self.client_id = client_id;
        self.epoch_stamp = epoch_stamp;
        self
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.sigma_hat_sq.len() != d || self.mu_tilde.len() != d || self.sigma_tilde_sq.len() != d
        {
            return Err(Error::Dimension("domain statistics vectors differ in length".into()));
        }
        let all = self
            .mu_hat
            .iter()
            .chain(&self.sigma_hat_sq)
            .chain(&self.mu_tilde)
            .chain(&self.sigma_tilde_sq);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite domain statistic".into()));
        }
        let nonneg = self
            .sigma_hat_sq
            .iter()
            .chain(&self.mu_tilde)
            .chain(&self.sigma_tilde_sq)
            .all(|&v| v >= 0.0);
        if !nonneg {
            return Err(Error::Domain("negative variance statistic".into()));
        }
        Ok(())
    }
}

/// A sampled domain: the mean and variance used to re-style features.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainVectors {
    pub mu: Vec<f64>,
    pub sigma_sq: Vec<f64>,
}

impl DomainVectors {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.sigma_sq.iter().map(|v| v.sqrt()).collect()
    }
}

/// Per-identity mean and population variance of `features`.
pub fn compute_ifs(features: &Matrix, labels: &[u32]) -> Result<IdStats> {
    if features.rows() == 0 {
        return Err(Error::Data("no samples to summarize".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    let d = features.cols();
    let mut means = Matrix::zeros(groups.len(), d);
    let mut variances = Matrix::zeros(groups.len(), d);
    for (r, rows) in groups.values().enumerate() {
        let members = features.select_rows(rows);
        let mu = members.col_means();
        let var = members.col_variances(&mu);
        means.row_mut(r).copy_from_slice(&mu);
        variances.row_mut(r).copy_from_slice(&var);
    }
    Ok(IdStats {
        means,
        variances,
        labels: groups.into_keys().collect(),
    })
}

/// Collapses identity statistics into the four shared domain vectors.
pub fn estimate_dfs(ifs: &IdStats) -> Result<DomainStats> {
    let n = ifs.means.rows();
    if n < 2 {
        return Err(Error::InsufficientIdentities(n));
    }
    let mu_hat = ifs.means.col_means();
    let sigma_hat_sq = ifs.means.col_variances(&mu_hat);
    let mu_tilde = ifs.variances.col_means();
    let sigma_tilde_sq = ifs.variances.col_variances(&mu_tilde);
    Ok(DomainStats {
        mu_hat,
        sigma_hat_sq,
        mu_tilde,
        sigma_tilde_sq,
        client_id: 0,
        epoch_stamp: 0,
    })
}

/// Samples a domain mean from `N(mu_hat, sigma_hat_sq)` and a domain variance
/// from `N(mu_tilde, sigma_tilde_sq)`, flooring the variance at
/// [`VARIANCE_FLOOR`].
pub fn sample_domain_vectors(dfs: &DomainStats, rng: &mut Rng) -> Result<DomainVectors> {
    dfs.validate()?;
    let mu = sample_gaussian(&dfs.mu_hat, &dfs.sigma_hat_sq, rng)?;
    let sigma_sq = sample_gaussian(&dfs.mu_tilde, &dfs.sigma_tilde_sq, rng)?
        .into_iter()
        .map(|v| v.max(VARIANCE_FLOOR))
        .collect();
    Ok(DomainVectors { mu, sigma_sq })
}

pub const DFS_MAGIC: &[u8; 3] = b"DFS";
pub const DFS_VERSION: u8 = b'1';

/// `DFS1`, client id, epoch, d (all `u32` LE), then `4·d` LE `f64` in the
/// order mu_hat, sigma_hat_sq, mu_tilde, sigma_tilde_sq.
pub fn serialize_dfs(dfs: &DomainStats) -> Vec<u8> {
    let d = dfs.dim();
    let mut out = Vec::with_capacity(16 + 32 * d);
    out.extend_from_slice(DFS_MAGIC);
    out.push(DFS_VERSION);
    put_u32(&mut out, dfs.client_id);
    put_u32(&mut out, dfs.epoch_stamp);
    put_u32(&mut out, d as u32);
    for v in [&dfs.mu_hat, &dfs.sigma_hat_sq, &dfs.mu_tilde, &dfs.sigma_tilde_sq] {
        put_f64s(&mut out, v);
    }
    out
}

pub fn parse_dfs(bytes: &[u8]) -> Result<DomainStats> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if &magic[..3] != DFS_MAGIC {
        return Err(Error::parse(0, format!("bad magic {magic:?}")));
    }
    if magic[3] != DFS_VERSION {
        return Err(Error::UnsupportedVersion {
            found: u32::from(magic[3].wrapping_sub(b'0')),
            expected: 1,
        });
    }
    let client_id = r.u32("client id")?;
    let epoch_stamp = r.u32("epoch")?;
    let d = r.u32("dimension")? as usize;
    let start = r.offset();
    let mu_hat = r.f64s(d, "mu_hat")?;
    let sigma_hat_sq = r.f64s(d, "sigma_hat_sq")?;
    let mu_tilde = r.f64s(d, "mu_tilde")?;
    let sigma_tilde_sq = r.f64s(d, "sigma_tilde_sq")?;
    r.finish()?;
    let dfs = DomainStats {
        mu_hat,
        sigma_hat_sq,
        mu_tilde,
        sigma_tilde_sq,
        client_id,
        epoch_stamp,
    };
    dfs.validate().map_err(|e| Error::parse(start, e.to_string()))?;
    Ok(dfs)
}
