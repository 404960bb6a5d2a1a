// Shared by several integration test targets; each uses a different subset.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fedhal::federation::{training_step, NovelSource, StepHallucination};
use fedhal::losses::HallucinatedObjective;
use fedhal::matrix::Matrix;
use fedhal::model::{ClassifierHead, ModelDims, ModelParams};
use fedhal::numerics::{sample_dirichlet, Rng};
use fedhal::stats::{DomainStats, DomainVectors};

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn uniform_in(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// `p` identities with `k` rows each, labels grouped.
pub fn pk_labels(p: usize, k: usize) -> Vec<u32> {
    (0..p).flat_map(|id| std::iter::repeat(id as u32).take(k)).collect()
}

pub fn random_vectors(d: usize, rng: &mut Rng) -> DomainVectors {
    DomainVectors {
        mu: (0..d).map(|_| rng.normal()).collect(),
        sigma_sq: (0..d).map(|_| uniform_in(0.05, 3.0, rng)).collect(),
    }
}

// Oracles, written from the definitions with plain loops.

pub fn oracle_dfs(features: &Matrix, labels: &[u32]) -> [Vec<f64>; 4] {
    let d = features.cols();
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for rows in groups.values() {
        let n = rows.len() as f64;
        let mut m = vec![0.0; d];
        for &r in rows {
            for c in 0..d {
                m[c] += features[(r, c)];
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        let mut v = vec![0.0; d];
        for &r in rows {
            for c in 0..d {
                v[c] += (features[(r, c)] - m[c]).powi(2);
            }
        }
        v.iter_mut().for_each(|x| *x /= n);
        means.push(m);
        vars.push(v);
    }
    let col_mean_var = |rows: &[Vec<f64>]| {
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let var: Vec<f64> = (0..d)
            .map(|c| rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n)
            .collect();
        (mean, var)
    };
    let (mu_hat, sigma_hat_sq) = col_mean_var(&means);
    let (mu_tilde, sigma_tilde_sq) = col_mean_var(&vars);
    [mu_hat, sigma_hat_sq, mu_tilde, sigma_tilde_sq]
}

pub fn oracle_dh(domains: &[DomainVectors], w: &[f64]) -> DomainVectors {
    let d = domains[0].mu.len();
    let mut mu = vec![0.0; d];
    let mut sigma_sq = vec![0.0; d];
    for (dom, &wk) in domains.iter().zip(w) {
        for c in 0..d {
            mu[c] += wk * dom.mu[c];
            sigma_sq[c] += wk * dom.sigma_sq[c];
        }
    }
    DomainVectors { mu, sigma_sq }
}

pub fn oracle_aggregate(models: &[ModelParams], counts: &[usize]) -> Vec<Vec<f64>> {
    let total: usize = counts.iter().sum();
    let n_tensors = models[0].tensors().len();
    (0..n_tensors)
        .map(|t| {
            let len = models[0].tensors()[t].1.len();
            (0..len)
                .map(|i| {
                    models
                        .iter()
                        .zip(counts)
                        .map(|(m, &n)| n as f64 / total as f64 * m.tensors()[t].1[i])
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Enumerates every (query, gallery) pair, sorts by distance then index and
/// applies the AP definition: mean over relevant ranks `r` of hits-within-`r`
/// divided by `r`.
pub fn oracle_map(q: &Matrix, ql: &[u32], g: &Matrix, gl: &[u32]) -> (f64, f64) {
    let mut ap_sum = 0.0;
    let mut top1 = 0usize;
    for i in 0..q.rows() {
        let mut pairs: Vec<(f64, usize)> = (0..g.rows())
            .map(|j| {
                let mut s = 0.0;
                for c in 0..q.cols() {
                    s += (q[(i, c)] - g[(j, c)]).powi(2);
                }
                (s.sqrt(), j)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let relevant_ranks: Vec<usize> = pairs
            .iter()
            .enumerate()
            .filter(|(_, (_, j))| gl[*j] == ql[i])
            .map(|(r, _)| r + 1)
            .collect();
        let mut ap = 0.0;
        for &r in &relevant_ranks {
            let hits = pairs[..r].iter().filter(|(_, j)| gl[*j] == ql[i]).count();
            ap += hits as f64 / r as f64;
        }
        ap_sum += ap / relevant_ranks.len() as f64;
        if gl[pairs[0].1] == ql[i] {
            top1 += 1;
        }
    }
    (ap_sum / q.rows() as f64, top1 as f64 / q.rows() as f64)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Gradient checking of the whole local step.

pub struct GradInstance {
    pub params: ModelParams,
    pub head: ClassifierHead,
    pub batch: Matrix,
    pub labels: Vec<u32>,
    pub targets: Vec<DomainVectors>,
    pub own: usize,
    pub novel: Option<NovelSource>,
    pub lambda: f64,
    pub margin: f64,
    pub objective: HallucinatedObjective,
}

impl GradInstance {
    /// Small random instance: `d <= 8`, `N_b <= 8`. The novel-batch recipe
    /// and objective cycle with `case`.
    pub fn random(case: usize, rng: &mut Rng) -> Self {
        let (p, k) = [(2, 2), (2, 3), (2, 4), (3, 2), (4, 2)][case % 5];
        let d = 2 + rng.below(7);
        let input = 2 + rng.below(5);
        let hidden = 3 + rng.below(6);
        let dims = ModelDims { input, hidden, output: d };
        let mut params = ModelParams::init(dims, rng);
        for b in params.b1.iter_mut().chain(params.b2.iter_mut()) {
            *b = 0.1 * rng.normal();
        }
        let head = ClassifierHead::init(d, p + rng.below(3), 0, rng);
        let n_domains = 2 + rng.below(3);
        let targets: Vec<DomainVectors> = (0..n_domains).map(|_| random_vectors(d, rng)).collect();
        let own = rng.below(n_domains);
        let novel = match case % 6 {
            0 => None,
            1 => Some(NovelSource::None),
            2 | 5 => {
                let w = sample_dirichlet(&vec![1.0; n_domains], rng).unwrap();
                let mixed = fedhal::hallucinate::domain_hallucinate(&targets, &w).unwrap();
                Some(NovelSource::Domain(mixed))
            }
            3 => Some(NovelSource::DirichletMix(
                sample_dirichlet(&vec![1.0; n_domains], rng).unwrap(),
            )),
            _ => {
                let pick = rng.choose_distinct(&(0..n_domains).collect::<Vec<_>>(), 2);
                Some(NovelSource::PairMix {
                    a: pick[0],
                    b: pick[1],
                    lambda: rng.uniform(),
                })
            }
        };
        let objective = if case % 4 == 3 {
            HallucinatedObjective::CrossEntropy
        } else {
            HallucinatedObjective::Triplet
        };
        GradInstance {
            params,
            head,
            batch: random_matrix(p * k, input, 1.0, rng),
            labels: pk_labels(p, k),
            targets,
            own,
            novel,
            lambda: uniform_in(0.5, 5.0, rng),
            margin: uniform_in(0.1, 1.0, rng),
            objective,
        }
    }

    pub fn loss(&self, params: &ModelParams, head: &ClassifierHead) -> (f64, fedhal::model::GradientSet) {
        let mut p = params.clone();
        let hal = self.novel.clone().map(|novel| StepHallucination {
            own: self.own,
            targets: &self.targets,
            novel,
        });
        let out = training_step(
            &mut p,
            head,
            &self.batch,
            &self.labels,
            hal.as_ref(),
            self.lambda,
            self.margin,
            self.objective,
        )
        .unwrap();
        (out.loss.value, out.grads)
    }
}

/// Largest entry-wise |analytic - numeric| over all trunk and head
/// parameters, divided by the largest numeric magnitude.
pub fn gradient_relative_error(inst: &GradInstance) -> f64 {
    let h = 1e-6;
    let (_, grads) = inst.loss(&inst.params, &inst.head);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();

    let n_trunk = [
        inst.params.w1.as_slice().len(),
        inst.params.b1.len(),
        inst.params.w2.as_slice().len(),
        inst.params.b2.len(),
    ];
    let g_trunk: [&[f64]; 4] = [grads.w1.as_slice(), &grads.b1, grads.w2.as_slice(), &grads.b2];
    for t in 0..4 {
        for i in 0..n_trunk[t] {
            let eval = |delta: f64| {
                let mut p = inst.params.clone();
                match t {
                    0 => p.w1.as_mut_slice()[i] += delta,
                    1 => p.b1[i] += delta,
                    2 => p.w2.as_mut_slice()[i] += delta,
                    _ => p.b2[i] += delta,
                }
                inst.loss(&p, &inst.head).0
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            analytic.push(g_trunk[t][i]);
        }
    }
    let hg = grads.head.as_ref().expect("head gradient");
    for (t, len) in [(0, inst.head.w.as_slice().len()), (1, inst.head.b.len())] {
        for i in 0..len {
            let eval = |delta: f64| {
                let mut hd = inst.head.clone();
                if t == 0 {
                    hd.w.as_mut_slice()[i] += delta;
                } else {
                    hd.b[i] += delta;
                }
                inst.loss(&inst.params, &hd).0
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            analytic.push(if t == 0 { hg.w.as_slice()[i] } else { hg.b[i] });
        }
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    max_abs_diff(&analytic, &numeric) / scale
}

/// Random domain statistics with strictly positive variance vectors.
pub fn random_dfs(d: usize, client: u32, rng: &mut Rng) -> DomainStats {
    DomainStats {
        mu_hat: (0..d).map(|_| rng.normal()).collect(),
        sigma_hat_sq: (0..d).map(|_| uniform_in(0.0, 0.5, rng)).collect(),
        mu_tilde: (0..d).map(|_| uniform_in(0.1, 2.0, rng)).collect(),
        sigma_tilde_sq: (0..d).map(|_| uniform_in(0.0, 0.05, rng)).collect(),
        client_id: client,
        epoch_stamp: 0,
    }
}
