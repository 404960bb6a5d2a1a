//! Synthetic multi-domain identity data and PK batch sampling.
//!
//! Every identity has a latent prototype. A shared linear map lifts latents to
//! input space, and each domain then applies its own random affine distortion
//! (identity plus a scaled random matrix, plus an offset), so identities look
//! different in every domain while label spaces stay disjoint. Isotropic
//! sample noise is added last, in input space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{Purpose, Rng, StreamKey};
use crate::wire::{put_f64s, put_u32, Reader};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Number of source domains (clients). One extra target domain is always
    /// generated on top.
    pub num_domains: usize,
    pub ids_per_domain: usize,
    pub samples_per_id: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub domain_shift_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_domains: 3,
            ids_per_domain: 20,
            samples_per_id: 12,
            latent_dim: 8,
            input_dim: 32,
            domain_shift_scale: 1.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_domains", self.num_domains),
            ("ids_per_domain", self.ids_per_domain),
            ("samples_per_id", self.samples_per_id),
            ("latent_dim", self.latent_dim),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in counts {
            if v < 2 {
                return Err(Error::Config(format!("synthetic.{name} must be at least 2, got {v}")));
            }
        }
        for (name, v) in [
            ("domain_shift_scale", self.domain_shift_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("synthetic.{name} must be finite and >= 0, got {v}")));
            }
        }
        let total_ids = (self.num_domains + 1)
            .checked_mul(self.ids_per_domain)
            .filter(|&n| n <= u32::MAX as usize);
        if total_ids.is_none() {
            return Err(Error::Config("too many identities".into()));
        }
        Ok(())
    }
}

/// One domain's samples. Labels are dense in `0..identity_count`; the global
/// identity of label `y` is `identity_offset + y`, which keeps label spaces
/// disjoint across domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: u32,
    pub samples: Matrix,
    pub labels: Vec<u32>,
    pub identity_count: usize,
    pub identity_offset: u32,
    by_identity: Vec<Vec<usize>>,
}

impl DomainDataset {
    pub fn new(domain_id: u32, samples: Matrix, labels: Vec<u32>, identity_offset: u32) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        let identity_count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut by_identity = vec![Vec::new(); identity_count];
        for (i, &y) in labels.iter().enumerate() {
            by_identity[y as usize].push(i);
        }
        if let Some(missing) = by_identity.iter().position(|v| v.is_empty()) {
            return Err(Error::Data(format!("labels are not dense: identity {missing} has no samples")));
        }
        Ok(DomainDataset {
            domain_id,
            samples,
            labels,
            identity_count,
            identity_offset,
            by_identity,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices_of(&self, label: u32) -> &[usize] {
        &self.by_identity[label as usize]
    }

    pub fn min_samples_per_identity(&self) -> usize {
        self.by_identity.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn global_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.labels.iter().map(move |&y| self.identity_offset + y)
    }

    /// Rows and labels for `indices`; labels stay as stored.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<u32>) {
        (
            self.samples.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    fn subset(&self, indices: &[usize]) -> Result<DomainDataset> {
        let (samples, labels) = self.gather(indices);
        DomainDataset::new(self.domain_id, samples, labels, self.identity_offset)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSplit {
    pub query: DomainDataset,
    pub gallery: DomainDataset,
}

/// Source domains for the clients, and the unseen target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
    pub split: RetrievalSplit,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = std * rng.normal();
    }
    m
}

pub fn generate_domains(cfg: &SyntheticConfig) -> Result<World> {
    cfg.validate()?;
    let key = |client: u32| StreamKey {
        seed: cfg.seed,
        client,
        epoch: 0,
        purpose: Purpose::Data,
    };
    let mut shared = Rng::derive(key(u32::MAX));
    let lift = gaussian_matrix(
        cfg.latent_dim,
        cfg.input_dim,
        (1.0 / cfg.latent_dim as f64).sqrt(),
        &mut shared,
    );

    let mut domains = Vec::with_capacity(cfg.num_domains + 1);
    for j in 0..=cfg.num_domains {
        let mut rng = Rng::derive(key(j as u32));
        let s = cfg.domain_shift_scale;
        let mut distort = gaussian_matrix(
            cfg.input_dim,
            cfg.input_dim,
            s / (cfg.input_dim as f64).sqrt(),
            &mut rng,
        );
        for i in 0..cfg.input_dim {
            distort[(i, i)] += 1.0;
        }
        let offset: Vec<f64> = (0..cfg.input_dim).map(|_| s * rng.normal()).collect();
        let map = lift.matmul(&distort)?;

        let n = cfg.ids_per_domain * cfg.samples_per_id;
        let mut latents = Matrix::zeros(n, cfg.latent_dim);
        let mut labels = Vec::with_capacity(n);
        for id in 0..cfg.ids_per_domain {
            let proto: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.normal()).collect();
            for k in 0..cfg.samples_per_id {
                let row = latents.row_mut(id * cfg.samples_per_id + k);
                row.copy_from_slice(&proto);
                labels.push(id as u32);
            }
        }
        let mut samples = latents.matmul(&map)?;
        samples.add_row_vector(&offset)?;
        for v in samples.as_mut_slice() {
            *v += cfg.noise_scale * rng.normal();
        }
        let offset_id = (j * cfg.ids_per_domain) as u32;
        domains.push(DomainDataset::new(j as u32, samples, labels, offset_id)?);
    }

    let target = domains.pop().expect("at least one domain");
    let split = split_query_gallery(&target)?;
    Ok(World {
        sources: domains,
        target,
        split,
    })
}

/// First sample of every identity becomes the query; the rest form the gallery.
pub fn split_query_gallery(ds: &DomainDataset) -> Result<RetrievalSplit> {
    if ds.min_samples_per_identity() < 2 {
        return Err(Error::Data(
            "every identity needs a query and at least one gallery sample".into(),
        ));
    }
    let mut query = Vec::with_capacity(ds.identity_count);
    let mut gallery = Vec::with_capacity(ds.len() - ds.identity_count);
    for ids in &ds.by_identity {
        query.push(ids[0]);
        gallery.extend_from_slice(&ids[1..]);
    }
    gallery.sort_unstable();
    Ok(RetrievalSplit {
        query: ds.subset(&query)?,
        gallery: ds.subset(&gallery)?,
    })
}

/// `p` distinct identities, `k` distinct samples of each, grouped by identity.
pub fn pk_sample_batch(ds: &DomainDataset, p: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if p < 2 || k < 2 {
        return Err(Error::Sampling(format!("P={p}, K={k}; both must be at least 2")));
    }
    if p > ds.identity_count {
        return Err(Error::Sampling(format!(
            "P={p} exceeds the {} identities available",
            ds.identity_count
        )));
    }
    let ids: Vec<usize> = (0..ds.identity_count).collect();
    let chosen = rng.choose_distinct(&ids, p);
    let mut batch = Vec::with_capacity(p * k);
    for id in chosen {
        let pool = &ds.by_identity[id];
        if pool.len() < k {
            return Err(Error::Sampling(format!(
                "identity {id} has {} samples, K={k}",
                pool.len()
            )));
        }
        batch.extend(rng.choose_distinct(pool, k));
    }
    Ok(batch)
}

pub const DATASET_MAGIC: &[u8; 4] = b"FDAT";
pub const DATASET_VERSION: u32 = 1;

/// `FDAT`, then `u32` LE version, domain id, identity offset, rows, cols and
/// identity count, then row-major LE `f64` values and one `u32` label per row.
pub fn encode_dataset(ds: &DomainDataset) -> Vec<u8> {
    let (rows, cols) = ds.samples.shape();
    let mut out = Vec::with_capacity(28 + rows * cols * 8 + rows * 4);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [
        DATASET_VERSION,
        ds.domain_id,
        ds.identity_offset,
        rows as u32,
        cols as u32,
        ds.identity_count as u32,
    ] {
        put_u32(&mut out, v);
    }
    put_f64s(&mut out, ds.samples.as_slice());
    for &y in &ds.labels {
        put_u32(&mut out, y);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DomainDataset> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::parse(0, format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let domain_id = r.u32("domain id")?;
    let identity_offset = r.u32("identity offset")?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let identity_count = r.u32("identity count")? as usize;
    let values = r.f64s(rows * cols, "samples")?;
    let label_offset = r.offset();
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(r.u32("label")?);
    }
    r.finish()?;
    let ds = DomainDataset::new(domain_id, Matrix::from_vec(rows, cols, values)?, labels, identity_offset)
        .map_err(|e| Error::parse(label_offset, e.to_string()))?;
    if ds.identity_count != identity_count {
        return Err(Error::parse(
            label_offset,
            format!("header says {identity_count} identities, labels have {}", ds.identity_count),
        ));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::squared_distance;
    use std::collections::HashSet;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_domains: 3,
            ids_per_domain: 5,
            samples_per_id: 4,
            latent_dim: 3,
            input_dim: 6,
            domain_shift_scale: 1.0,
            noise_scale: 0.3,
            seed: 9,
        }
    }

    #[test]
    fn degenerate_generator_reproduces_prototypes() {
        let cfg = SyntheticConfig {
            domain_shift_scale: 0.0,
            noise_scale: 0.0,
            ..small()
        };
        let world = generate_domains(&cfg).unwrap();
        for ds in world.sources.iter().chain([&world.target]) {
            for id in 0..ds.identity_count as u32 {
                let idx = ds.indices_of(id);
                for &i in idx {
                    assert_eq!(ds.samples.row(i), ds.samples.row(idx[0]));
                }
            }
        }
    }

    #[test]
    fn label_spaces_are_disjoint() {
        let world = generate_domains(&small()).unwrap();
        let mut seen = HashSet::new();
        for ds in world.sources.iter().chain([&world.target]) {
            let ids: HashSet<u32> = ds.global_ids().collect();
            assert_eq!(ids.len(), ds.identity_count);
            assert!(seen.is_disjoint(&ids));
            seen.extend(ids);
        }
    }

    #[test]
    fn noiseless_domains_are_separable() {
        let cfg = SyntheticConfig {
            noise_scale: 0.0,
            ..small()
        };
        let world = generate_domains(&cfg).unwrap();
        for ds in &world.sources {
            for i in 0..ds.len() {
                for j in 0..ds.len() {
                    let d = squared_distance(ds.samples.row(i), ds.samples.row(j));
                    if ds.labels[i] == ds.labels[j] {
                        assert_eq!(d, 0.0);
                    } else {
                        assert!(d > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_domains(&small()).unwrap();
        let b = generate_domains(&small()).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.sources.iter().zip(&b.sources) {
            assert_eq!(encode_dataset(x), encode_dataset(y));
        }
        let c = generate_domains(&SyntheticConfig { seed: 10, ..small() }).unwrap();
        assert_ne!(a.target.samples, c.target.samples);
    }

    #[test]
    fn split_has_one_query_per_identity() {
        let world = generate_domains(&small()).unwrap();
        let s = &world.split;
        assert_eq!(s.query.len(), 5);
        assert_eq!(s.gallery.len(), 15);
        let q: HashSet<u32> = s.query.labels.iter().copied().collect();
        let g: HashSet<u32> = s.gallery.labels.iter().copied().collect();
        assert!(q.is_subset(&g));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SyntheticConfig {
            ids_per_domain: 1,
            ..small()
        };
        assert!(matches!(generate_domains(&cfg), Err(Error::Config(_))));
        let cfg = SyntheticConfig {
            noise_scale: -1.0,
            ..small()
        };
        assert!(matches!(generate_domains(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn pk_batch_structure() {
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let ds = DomainDataset::new(0, Matrix::zeros(9, 1), labels, 0).unwrap();
        let mut rng = Rng::new(1);
        let batch = pk_sample_batch(&ds, 2, 2, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        let picked: Vec<u32> = batch.iter().map(|&i| ds.labels[i]).collect();
        assert_eq!(picked[0], picked[1]);
        assert_eq!(picked[2], picked[3]);
        assert_ne!(picked[0], picked[2]);
        assert_ne!(batch[0], batch[1]);

        let all = pk_sample_batch(&ds, 3, 3, &mut rng).unwrap();
        let ids: HashSet<u32> = all.iter().map(|&i| ds.labels[i]).collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn pk_infeasible() {
        let ds = DomainDataset::new(0, Matrix::zeros(4, 1), vec![0, 0, 1, 1], 0).unwrap();
        let mut rng = Rng::new(1);
        assert!(matches!(pk_sample_batch(&ds, 3, 2, &mut rng), Err(Error::Sampling(_))));
        assert!(matches!(pk_sample_batch(&ds, 2, 3, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn pk_selection_is_fair() {
        // Each identity is picked with probability P/N per batch; the count
        // over B batches is Binomial(B, P/N).
        let n_ids = 10;
        let labels: Vec<u32> = (0..n_ids).flat_map(|y| [y; 4]).collect();
        let ds = DomainDataset::new(0, Matrix::zeros(labels.len(), 1), labels, 0).unwrap();
        let (p, k, batches) = (4, 2, 10_000);
        let mut counts = vec![0usize; n_ids as usize];
        let mut rng = Rng::new(77);
        for _ in 0..batches {
            let b = pk_sample_batch(&ds, p, k, &mut rng).unwrap();
            for chunk in b.chunks(k) {
                counts[ds.labels[chunk[0]] as usize] += 1;
            }
        }
        let q = p as f64 / n_ids as f64;
        let mean = batches as f64 * q;
        let sd = (batches as f64 * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{c} vs {mean}±{sd}");
        }
    }

    #[test]
    fn dataset_codec() {
        let world = generate_domains(&small()).unwrap();
        let bytes = encode_dataset(&world.sources[1]);
        assert_eq!(&bytes[..4], b"FDAT");
        assert_eq!(decode_dataset(&bytes).unwrap(), world.sources[1]);
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 2]), Err(Error::Parse { .. })));
        let mut bumped = bytes.clone();
        bumped[4] = 9;
        assert!(matches!(decode_dataset(&bumped), Err(Error::UnsupportedVersion { .. })));
    }

    #[test]
    fn non_dense_labels_are_rejected() {
        assert!(matches!(
            DomainDataset::new(0, Matrix::zeros(2, 1), vec![0, 2], 0),
            Err(Error::Data(_))
        ));
    }
}
