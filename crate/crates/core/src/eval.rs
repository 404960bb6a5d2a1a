//! Retrieval evaluation: rank the gallery for each query by embedding
//! distance, then score with average precision and cumulative match
//! characteristic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, squared_distance, Matrix};
use crate::model::{forward, Mode, ModelParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// Gallery indices per query, nearest first.
    pub rankings: Vec<Vec<usize>>,
    pub average_precision: Vec<f64>,
    pub mean_ap: f64,
    /// `cmc[k - 1]` is the fraction of queries with a match in the top `k`.
    pub cmc: Vec<f64>,
}

impl RankingResult {
    pub fn rank1(&self) -> f64 {
        self.cmc_at(1)
    }

    /// Top-`k` match rate, 1-indexed.
    pub fn cmc_at(&self, k: usize) -> f64 {
        assert!(k >= 1);
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

/// Eval-mode forward pass; one raw (pre-BN) embedding per sample.
pub fn extract_embeddings(model: &ModelParams, samples: &Matrix) -> Result<Matrix> {
    if samples.rows() == 0 {
        return Ok(Matrix::zeros(0, model.dims().output));
    }
    forward(model, samples, Mode::Eval).map(|(f, _)| f)
}

fn pair_distance(metric: DistanceMetric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        DistanceMetric::Euclidean => squared_distance(a, b).sqrt(),
        DistanceMetric::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot(a, b) / (na * nb)
            }
        }
    }
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevant: impl IntoIterator<Item = bool>) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, rel) in relevant.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn retrieval_eval(
    query: &Matrix,
    query_labels: &[u32],
    gallery: &Matrix,
    gallery_labels: &[u32],
    metric: DistanceMetric,
) -> Result<RankingResult> {
    if query.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(Error::Dimension("embedding rows and labels disagree".into()));
    }
    if query.cols() != gallery.cols() {
        return Err(Error::Dimension(format!(
            "query width {} vs gallery width {}",
            query.cols(),
            gallery.cols()
        )));
    }
    if query.rows() == 0 || gallery.rows() == 0 {
        return Err(Error::Evaluation("empty query or gallery".into()));
    }
    let n_gallery = gallery.rows();
    let mut rankings = Vec::with_capacity(query.rows());
    let mut aps = Vec::with_capacity(query.rows());
    let mut first_hit = vec![0usize; n_gallery];
    for (q, &label) in query_labels.iter().enumerate() {
        if !gallery_labels.contains(&label) {
            return Err(Error::Evaluation(format!(
                "query {q} (label {label}) has no match in the gallery"
            )));
        }
        let dist: Vec<f64> = gallery
            .iter_rows()
            .map(|g| pair_distance(metric, query.row(q), g))
            .collect();
        let mut order: Vec<usize> = (0..n_gallery).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let relevant = order.iter().map(|&g| gallery_labels[g] == label);
        aps.push(average_precision(relevant.clone()));
        let first = relevant.clone().position(|r| r).expect("label present");
        first_hit[first] += 1;
        rankings.push(order);
    }
    let nq = query.rows() as f64;
    let mut cmc = Vec::with_capacity(n_gallery);
    let mut acc = 0usize;
    for h in first_hit {
        acc += h;
        cmc.push(acc as f64 / nq);
    }
    let mean_ap = aps.iter().sum::<f64>() / nq;
    Ok(RankingResult {
        rankings,
        average_precision: aps,
        mean_ap,
        cmc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn col(xs: &[f64]) -> Matrix {
        Matrix::from_vec(xs.len(), 1, xs.to_vec()).unwrap()
    }

    #[test]
    fn exact_duplicates_are_perfect() {
        let q = Matrix::from_rows(&[[0.0, 1.0], [5.0, 5.0]]);
        let g = Matrix::from_rows(&[[5.0, 5.0], [9.0, 9.0], [0.0, 1.0]]);
        let r = retrieval_eval(&q, &[1, 2], &g, &[2, 3, 1], DistanceMetric::Euclidean).unwrap();
        assert_eq!(r.mean_ap, 1.0);
        assert_eq!(r.rank1(), 1.0);
    }

    #[test]
    fn hand_average_precision() {
        // Ranks: relevant, irrelevant, relevant.
        let q = col(&[0.0]);
        let g = col(&[1.0, 2.0, 3.0]);
        let r = retrieval_eval(&q, &[7], &g, &[7, 8, 7], DistanceMetric::Euclidean).unwrap();
        assert!((r.mean_ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision([true, false, true]), (1.0 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn gallery_order_does_not_matter_without_ties() {
        let q = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]);
        let g = Matrix::from_rows(&[[0.1, 0.3], [2.0, 1.1], [0.9, -0.2], [1.5, 1.4]]);
        let gl = [0, 1, 1, 0];
        let a = retrieval_eval(&q, &[0, 1], &g, &gl, DistanceMetric::Euclidean).unwrap();
        let perm = [3, 1, 0, 2];
        let g2 = g.select_rows(&perm);
        let gl2: Vec<u32> = perm.iter().map(|&i| gl[i]).collect();
        let b = retrieval_eval(&q, &[0, 1], &g2, &gl2, DistanceMetric::Euclidean).unwrap();
        assert_eq!(a.mean_ap, b.mean_ap);
        assert_eq!(a.cmc, b.cmc);
    }

    #[test]
    fn ties_break_on_gallery_index() {
        let q = col(&[0.0]);
        let g = col(&[1.0, -1.0, 1.0]);
        let r = retrieval_eval(&q, &[0], &g, &[1, 0, 0], DistanceMetric::Euclidean).unwrap();
        assert_eq!(r.rankings[0], vec![0, 1, 2]);
    }

    #[test]
    fn missing_label_is_an_error() {
        let q = col(&[0.0]);
        let g = col(&[1.0]);
        assert!(matches!(
            retrieval_eval(&q, &[0], &g, &[1], DistanceMetric::Euclidean),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn cmc_is_monotone_and_bounded() {
        let q = Matrix::from_rows(&[[0.0, 0.0], [3.0, 1.0], [-1.0, 2.0]]);
        let g = Matrix::from_rows(&[[0.5, 0.5], [3.0, 0.0], [1.0, 1.0], [-1.0, 1.0], [2.0, 2.0]]);
        let r = retrieval_eval(&q, &[0, 1, 2], &g, &[1, 0, 2, 1, 2], DistanceMetric::Cosine).unwrap();
        assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
        assert_eq!(*r.cmc.last().unwrap(), 1.0);
        assert!((0.0..=1.0).contains(&r.mean_ap));
    }

    #[test]
    fn zero_model_embeds_to_zero_and_is_pure() {
        let m = ModelParams::zeros(ModelDims { input: 3, hidden: 2, output: 2 });
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        let e = extract_embeddings(&m, &x).unwrap();
        assert_eq!(e, Matrix::zeros(2, 2));
        assert_eq!(e, extract_embeddings(&m, &x).unwrap());
    }
}
