//! Batch-hard triplet loss, softmax cross-entropy, and the combined local
//! objective that mixes original and hallucinated feature batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::model::{classifier_backward, classifier_forward, ClassifierHead, HeadGradient};

/// Guards the derivative of the Euclidean norm at zero distance.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    /// Gradient of `value` with respect to the loss input.
    pub grad: Matrix,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    (squared_distance(a, b) + DISTANCE_EPS).sqrt()
}

/// Hardest positive and negative for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mined {
    pub positive: usize,
    pub negative: usize,
    pub positive_dist: f64,
    pub negative_dist: f64,
}

fn check_triplet_batch(features: &Matrix, labels: &[u32]) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let mut distinct = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i < 2 {
            return Err(Error::BatchComposition(format!(
                "label {} has a single instance",
                sorted[i]
            )));
        }
        distinct += 1;
        i = j;
    }
    if distinct < 2 {
        return Err(Error::BatchComposition(
            "batch needs at least two distinct labels".into(),
        ));
    }
    Ok(())
}

/// Mines the hardest positive (farthest same-label sample) and hardest
/// negative (nearest other-label sample) for each anchor. Ties go to the
/// lowest batch index.
pub fn mine_batch_hard(features: &Matrix, labels: &[u32]) -> Result<Vec<Mined>> {
    check_triplet_batch(features, labels)?;
    let n = features.rows();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(features.row(i), features.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|a| {
            let mut pos = (usize::MAX, f64::NEG_INFINITY);
            let mut neg = (usize::MAX, f64::INFINITY);
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist[a * n + j];
                if labels[j] == labels[a] {
                    if d > pos.1 {
                        pos = (j, d);
                    }
                } else if d < neg.1 {
                    neg = (j, d);
                }
            }
            Mined {
                positive: pos.0,
                negative: neg.0,
                positive_dist: pos.1,
                negative_dist: neg.1,
            }
        })
        .collect())
}

/// Mean over anchors of `[d(a, p) - d(a, n) + margin]_+` with batch-hard mining.
pub fn triplet_loss(features: &Matrix, labels: &[u32], margin: f64) -> Result<LossValue> {
    let mined = mine_batch_hard(features, labels)?;
    let (n, d) = features.shape();
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, d);
    let mut diff = vec![0.0; d];
    for (a, m) in mined.iter().enumerate() {
        let hinge = m.positive_dist - m.negative_dist + margin;
        if hinge <= 0.0 {
            continue;
        }
        value += hinge;
        for (sign, other, dist) in [
            (1.0, m.positive, m.positive_dist),
            (-1.0, m.negative, m.negative_dist),
        ] {
            let scale = sign / (dist * nf);
            for ((o, x), y) in diff.iter_mut().zip(features.row(a)).zip(features.row(other)) {
                *o = (x - y) * scale;
            }
            for (g, v) in grad.row_mut(a).iter_mut().zip(&diff) {
                *g += v;
            }
            for (g, v) in grad.row_mut(other).iter_mut().zip(&diff) {
                *g -= v;
            }
        }
    }
    Ok(LossValue {
        value: value / nf,
        grad,
    })
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy(logits: &Matrix, labels: &[u32]) -> Result<LossValue> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} logit rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::BatchSize("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= k) {
        return Err(Error::Label(format!("label {bad} with {k} classes")));
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let arg = (0..k).fold(0, |a, j| if row[j] > row[a] { j } else { a });
        let top = row[arg];
        // Sum of the non-maximal terms, kept apart so ln_1p stays accurate.
        let rest: f64 = (0..k).filter(|&j| j != arg).map(|j| (row[j] - top).exp()).sum();
        value += (top - row[y as usize]) + rest.ln_1p();
        let z = 1.0 + rest;
        for (g, l) in grad.row_mut(r).iter_mut().zip(row) {
            *g = (l - top).exp() / z / nf;
        }
        grad[(r, y as usize)] -= 1.0 / nf;
    }
    Ok(LossValue {
        value: value / nf,
        grad,
    })
}

/// Which loss is applied to hallucinated batches. Triplet is the method's
/// default; cross-entropy through the local classifier exists to reproduce its
/// failure mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinatedObjective {
    #[default]
    Triplet,
    CrossEntropy,
}

pub struct LocalLossInput<'a> {
    /// Raw local features `F_i`.
    pub original: &'a Matrix,
    pub labels: &'a [u32],
    /// Batch hallucinated into the novel domain, when the variant builds one.
    pub novel: Option<&'a Matrix>,
    /// Batches hallucinated into each other client's domain.
    pub others: &'a [Matrix],
    pub head: &'a ClassifierHead,
    pub lambda: f64,
    pub margin: f64,
    pub objective: HallucinatedObjective,
}

#[derive(Clone, Debug)]
pub struct LocalLoss {
    pub value: f64,
    /// `L_tri(F_i) + L_ce(FC(F_i))`.
    pub original: f64,
    pub novel: Option<f64>,
    pub others: Vec<f64>,
    /// Includes the path through the classifier.
    pub grad_original: Matrix,
    pub grad_novel: Option<Matrix>,
    pub grad_others: Vec<Matrix>,
    pub grad_head: HeadGradient,
}

/// `L_ori(F_i) + λ·[L(F_novel) + 1/(N-1)·Σ_k L(F_k)]` where
/// `L_ori = L_tri + L_ce(FC(·))` and `L` is the hallucinated objective.
pub fn local_loss(input: &LocalLossInput<'_>) -> Result<LocalLoss> {
    let (n, d) = input.original.shape();
    if input.labels.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} labels", input.labels.len())));
    }
    for (what, m) in input
        .novel
        .into_iter()
        .map(|m| ("novel", m))
        .chain(input.others.iter().map(|m| ("other", m)))
    {
        if m.shape() != (n, d) {
            return Err(Error::Dimension(format!(
                "{what} batch is {}x{}, original {n}x{d}",
                m.rows(),
                m.cols()
            )));
        }
    }
    if !(input.lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda {}", input.lambda)));
    }

    let mut grad_head = HeadGradient::zeros_like(input.head);

    let tri = triplet_loss(input.original, input.labels, input.margin)?;
    let logits = classifier_forward(input.head, input.original)?;
    let ce = cross_entropy(&logits, input.labels)?;
    let (hg, d_feat) = classifier_backward(input.head, input.original, &ce.grad)?;
    grad_head.add_assign(&hg)?;
    let mut grad_original = tri.grad;
    grad_original.add_assign(&d_feat)?;
    let original = tri.value + ce.value;

    // Hallucinated terms, each returned with its gradient already scaled.
    let mut hallucinated = |batch: &Matrix, weight: f64| -> Result<(f64, Matrix)> {
        match input.objective {
            HallucinatedObjective::Triplet => {
                let t = triplet_loss(batch, input.labels, input.margin)?;
                Ok((t.value, t.grad.scaled(weight)))
            }
            HallucinatedObjective::CrossEntropy => {
                let logits = classifier_forward(input.head, batch)?;
                let ce = cross_entropy(&logits, input.labels)?;
                let (hg, d) = classifier_backward(input.head, batch, &ce.grad)?;
                grad_head.w.axpy(weight, &hg.w)?;
                for (a, b) in grad_head.b.iter_mut().zip(&hg.b) {
                    *a += weight * b;
                }
                Ok((ce.value, d.scaled(weight)))
            }
        }
    };

    let mut value = original;
    let mut novel = None;
    let mut grad_novel = None;
    if let Some(batch) = input.novel {
        let (v, g) = hallucinated(batch, input.lambda)?;
        value += input.lambda * v;
        novel = Some(v);
        grad_novel = Some(g);
    }
    let mut others = Vec::with_capacity(input.others.len());
    let mut grad_others = Vec::with_capacity(input.others.len());
    if !input.others.is_empty() {
        let w = input.lambda / input.others.len() as f64;
        for batch in input.others {
            let (v, g) = hallucinated(batch, w)?;
            value += w * v;
            others.push(v);
            grad_others.push(g);
        }
    }

    Ok(LocalLoss {
        value,
        original,
        novel,
        others,
        grad_original,
        grad_novel,
        grad_others,
        grad_head,
    })
}
