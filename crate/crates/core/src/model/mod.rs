//! The embedding trunk (affine → ReLU → affine), its output batch norm, the
//! per-client classifier head, and hand-written reverse mode for all three.
//!
//! Features returned by [`forward`] are the raw pre-BN embeddings; retrieval
//! and identity statistics use them directly. [`batch_norm`] carries no
//! learnable affine: feature hallucination supplies the scale and shift.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input: 32,
            hidden: 64,
            output: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }
}

/// Trunk parameters plus output batch-norm state. This is everything a client
/// uploads; classifier heads stay local.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub bn: BatchNorm,
    /// Bumped by every SGD step so that caches from an older forward pass are
    /// detected in [`backward`]. Not part of the serialized state.
    revision: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.w1 == other.w1
            && self.b1 == other.b1
            && self.w2 == other.w2
            && self.b2 == other.b2
            && self.bn.running_mean == other.bn.running_mean
            && self.bn.running_var == other.bn.running_var
            && self.bn.momentum == other.bn.momentum
            && self.bn.eps == other.bn.eps
    }
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelParams {
            w1: Matrix::zeros(dims.input, dims.hidden),
            b1: vec![0.0; dims.hidden],
            w2: Matrix::zeros(dims.hidden, dims.output),
            b2: vec![0.0; dims.output],
            bn: BatchNorm::new(dims.output),
            revision: 0,
        }
    }

    /// He-normal first layer, `N(0, 1/H)` second layer, zero biases.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Self {
        let mut p = ModelParams::zeros(dims);
        let s1 = (2.0 / dims.input as f64).sqrt();
        for w in p.w1.as_mut_slice() {
            *w = s1 * rng.normal();
        }
        let s2 = (1.0 / dims.hidden as f64).sqrt();
        for w in p.w2.as_mut_slice() {
            *w = s2 * rng.normal();
        }
        p
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.w1.rows(),
            hidden: self.w1.cols(),
            output: self.w2.cols(),
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
            && self
                .bn
                .running_mean
                .iter()
                .chain(&self.bn.running_var)
                .all(|v| v.is_finite())
    }

    /// Named views of every averaged tensor, in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("trunk.w1", self.w1.as_slice()),
            ("trunk.b1", &self.b1),
            ("trunk.w2", self.w2.as_slice()),
            ("trunk.b2", &self.b2),
            ("bn.running_mean", &self.bn.running_mean),
            ("bn.running_var", &self.bn.running_var),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            &mut self.bn.running_mean,
            &mut self.bn.running_var,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub owner: u32,
}

impl ClassifierHead {
    pub fn init(feature_dim: usize, classes: usize, owner: u32, rng: &mut Rng) -> Self {
        let mut w = Matrix::zeros(feature_dim, classes);
        let s = (1.0 / feature_dim as f64).sqrt();
        for v in w.as_mut_slice() {
            *v = s * rng.normal();
        }
        ClassifierHead {
            w,
            b: vec![0.0; classes],
            owner,
        }
    }

    pub fn classes(&self) -> usize {
        self.w.cols()
    }
}

/// Everything [`backward`] needs from one forward call. Consumed on use.
#[derive(Debug)]
pub struct ForwardCache {
    input: Matrix,
    pre_activation: Matrix,
    hidden: Matrix,
    features: Matrix,
    revision: u64,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        &self.features
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNormCache {
    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl HeadGradient {
    pub fn zeros_like(head: &ClassifierHead) -> Self {
        HeadGradient {
            w: Matrix::zeros(head.w.rows(), head.w.cols()),
            b: vec![0.0; head.b.len()],
        }
    }

    pub fn add_assign(&mut self, other: &HeadGradient) -> Result<()> {
        self.w.add_assign(&other.w)?;
        add_vec(&mut self.b, &other.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub head: Option<HeadGradient>,
}

impl GradientSet {
    pub fn zeros(dims: ModelDims) -> Self {
        GradientSet {
            w1: Matrix::zeros(dims.input, dims.hidden),
            b1: vec![0.0; dims.hidden],
            w2: Matrix::zeros(dims.hidden, dims.output),
            b2: vec![0.0; dims.output],
            head: None,
        }
    }

    pub fn is_zero(&self) -> bool {
        let trunk = self
            .w1
            .as_slice()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.as_slice())
            .chain(&self.b2)
            .all(|&g| g == 0.0);
        let head = self.head.as_ref().map_or(true, |h| {
            h.w.as_slice().iter().chain(&h.b).all(|&g| g == 0.0)
        });
        trunk && head
    }

    pub fn is_finite(&self) -> bool {
        let trunk = self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|g| g.is_finite());
        let head = self
            .head
            .as_ref()
            .map_or(true, |h| h.w.is_finite() && h.b.iter().all(|g| g.is_finite()));
        trunk && head
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        self.w1.add_assign(&other.w1)?;
        add_vec(&mut self.b1, &other.b1)?;
        self.w2.add_assign(&other.w2)?;
        add_vec(&mut self.b2, &other.b2)?;
        match (&mut self.head, &other.head) {
            (Some(a), Some(b)) => a.add_assign(b)?,
            (None, Some(b)) => self.head = Some(b.clone()),
            _ => {}
        }
        Ok(())
    }
}

fn add_vec(a: &mut [f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "vector lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    Ok(())
}

/// Runs the trunk on `input` (rows are samples) and returns raw features.
///
/// Mode only matters for the batch-size precondition here; running statistics
/// are touched by [`batch_norm`], never by the trunk.
pub fn forward(params: &ModelParams, input: &Matrix, mode: Mode) -> Result<(Matrix, ForwardCache)> {
    let dims = params.dims();
    if input.cols() != dims.input {
        return Err(Error::Dimension(format!(
            "input width {} but model expects {}",
            input.cols(),
            dims.input
        )));
    }
    let min_rows = if mode == Mode::Train { 2 } else { 1 };
    if input.rows() < min_rows {
        return Err(Error::BatchSize(format!(
            "{:?} forward needs at least {min_rows} rows, got {}",
            mode,
            input.rows()
        )));
    }
    let mut pre = input.matmul(&params.w1)?;
    pre.add_row_vector(&params.b1)?;
    let hidden = pre.map(|z| z.max(0.0));
    let mut features = hidden.matmul(&params.w2)?;
    features.add_row_vector(&params.b2)?;
    let cache = ForwardCache {
        input: input.clone(),
        pre_activation: pre,
        hidden,
        features: features.clone(),
        revision: params.revision,
    };
    Ok((features, cache))
}

/// Normalizes each feature dimension.
///
/// Train mode uses batch statistics and folds them into the running estimates
/// (biased mean, unbiased variance, exponential moving average). Eval mode uses
/// the running estimates and leaves them untouched.
pub fn batch_norm(
    features: &Matrix,
    bn: &mut BatchNorm,
    mode: Mode,
) -> Result<(Matrix, BatchNormCache)> {
    let d = bn.dim();
    if features.cols() != d {
        return Err(Error::Dimension(format!(
            "batch norm over {d} dims given width {}",
            features.cols()
        )));
    }
    let n = features.rows();
    let (mean, inv_std) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::BatchSize(format!(
                    "train-mode batch norm needs at least 2 rows, got {n}"
                )));
            }
            let mean = features.col_means();
            let var = features.col_variances(&mean);
            let m = bn.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            for j in 0..d {
                bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * mean[j];
                bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * var[j] * unbias;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            (mean, inv_std)
        }
        Mode::Eval => {
            if n < 1 {
                return Err(Error::BatchSize("empty batch".into()));
            }
            let inv_std = bn
                .running_var
                .iter()
                .map(|v| 1.0 / (v + bn.eps).sqrt())
                .collect();
            (bn.running_mean.clone(), inv_std)
        }
    };
    let mut out = features.clone();
    for r in 0..n {
        for ((x, m), s) in out.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
            *x = (*x - m) * s;
        }
    }
    let cache = BatchNormCache {
        normalized: out.clone(),
        inv_std,
        mode,
    };
    Ok((out, cache))
}

/// Gradient of a loss with respect to the batch-norm input, given the gradient
/// with respect to its output.
pub fn batch_norm_backward(cache: &BatchNormCache, upstream: &Matrix) -> Result<Matrix> {
    let (n, d) = cache.normalized.shape();
    upstream.ensure_shape(n, d, "batch norm upstream")?;
    let mut dx = Matrix::zeros(n, d);
    match cache.mode {
        Mode::Eval => {
            for r in 0..n {
                for ((o, g), s) in dx.row_mut(r).iter_mut().zip(upstream.row(r)).zip(&cache.inv_std) {
                    *o = g * s;
                }
            }
        }
        Mode::Train => {
            let nf = n as f64;
            let mut mean_g = vec![0.0; d];
            let mut mean_gx = vec![0.0; d];
            for r in 0..n {
                let g = upstream.row(r);
                let x = cache.normalized.row(r);
                for j in 0..d {
                    mean_g[j] += g[j];
                    mean_gx[j] += g[j] * x[j];
                }
            }
            for j in 0..d {
                mean_g[j] /= nf;
                mean_gx[j] /= nf;
            }
            for r in 0..n {
                let g = upstream.row(r);
                let x = cache.normalized.row(r);
                let o = dx.row_mut(r);
                for j in 0..d {
                    o[j] = cache.inv_std[j] * (g[j] - mean_g[j] - x[j] * mean_gx[j]);
                }
            }
        }
    }
    Ok(dx)
}

pub fn classifier_forward(head: &ClassifierHead, features: &Matrix) -> Result<Matrix> {
    if features.cols() != head.w.rows() {
        return Err(Error::Dimension(format!(
            "classifier expects width {}, got {}",
            head.w.rows(),
            features.cols()
        )));
    }
    let mut logits = features.matmul(&head.w)?;
    logits.add_row_vector(&head.b)?;
    Ok(logits)
}

/// Returns the head gradient and the gradient with respect to `inputs`.
pub fn classifier_backward(
    head: &ClassifierHead,
    inputs: &Matrix,
    d_logits: &Matrix,
) -> Result<(HeadGradient, Matrix)> {
    d_logits.ensure_shape(inputs.rows(), head.classes(), "logit gradient")?;
    let w = inputs.t_matmul(d_logits)?;
    let b = d_logits.col_sums();
    let d_inputs = d_logits.matmul_t(&head.w)?;
    Ok((HeadGradient { w, b }, d_inputs))
}

/// Upstream gradients entering the trunk output: directly on the features,
/// through a classifier applied to those features, or both.
#[derive(Default)]
pub struct Upstream<'a> {
    pub features: Option<Matrix>,
    pub logits: Option<(&'a ClassifierHead, Matrix)>,
}

/// Reverse pass through the trunk for the forward call that produced `cache`.
pub fn backward(params: &ModelParams, cache: ForwardCache, upstream: Upstream<'_>) -> Result<GradientSet> {
    if cache.revision != params.revision {
        return Err(Error::StaleCache(format!(
            "cache from revision {}, parameters at {}",
            cache.revision, params.revision
        )));
    }
    let dims = params.dims();
    if cache.input.cols() != dims.input || cache.features.cols() != dims.output {
        return Err(Error::StaleCache("cache shapes do not match parameters".into()));
    }
    let (n, d) = cache.features.shape();
    let mut d_features = match upstream.features {
        Some(g) => {
            g.ensure_shape(n, d, "feature gradient")?;
            g
        }
        None => Matrix::zeros(n, d),
    };
    let mut head_grad = None;
    if let Some((head, d_logits)) = upstream.logits {
        let (hg, d_in) = classifier_backward(head, &cache.features, &d_logits)?;
        d_features.add_assign(&d_in)?;
        head_grad = Some(hg);
    }

    let w2 = cache.hidden.t_matmul(&d_features)?;
    let b2 = d_features.col_sums();
    let mut d_pre = d_features.matmul_t(&params.w2)?;
    for (g, z) in d_pre.as_mut_slice().iter_mut().zip(cache.pre_activation.as_slice()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let w1 = cache.input.t_matmul(&d_pre)?;
    let b1 = d_pre.col_sums();
    Ok(GradientSet {
        w1,
        b1,
        w2,
        b2,
        head: head_grad,
    })
}

/// Plain SGD: `p -= lr * g`. Running batch-norm statistics are not touched.
pub fn sgd_step(
    params: &mut ModelParams,
    head: Option<&mut ClassifierHead>,
    grads: &GradientSet,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Domain(format!("learning rate {lr}")));
    }
    if !grads.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    let dims = params.dims();
    grads.w1.ensure_shape(dims.input, dims.hidden, "w1 gradient")?;
    grads.w2.ensure_shape(dims.hidden, dims.output, "w2 gradient")?;
    if grads.b1.len() != dims.hidden || grads.b2.len() != dims.output {
        return Err(Error::Dimension("bias gradient length".into()));
    }
    let head_update = match (head, &grads.head) {
        (Some(h), Some(g)) => {
            g.w.ensure_shape(h.w.rows(), h.w.cols(), "head gradient")?;
            if g.b.len() != h.b.len() {
                return Err(Error::Dimension("head bias gradient length".into()));
            }
            Some((h, g))
        }
        (None, Some(_)) => {
            return Err(Error::Dimension("head gradient given without a head".into()));
        }
        _ => None,
    };

    params.w1.axpy(-lr, &grads.w1)?;
    step_vec(&mut params.b1, &grads.b1, lr);
    params.w2.axpy(-lr, &grads.w2)?;
    step_vec(&mut params.b2, &grads.b2, lr);
    if let Some((h, g)) = head_update {
        h.w.axpy(-lr, &g.w)?;
        step_vec(&mut h.b, &g.b, lr);
    }
    params.revision += 1;
    Ok(())
}

fn step_vec(p: &mut [f64], g: &[f64], lr: f64) {
    for (x, d) in p.iter_mut().zip(g) {
        *x -= lr * d;
    }
}

/// Weighted elementwise average of every trunk tensor and the batch-norm
/// running statistics. Accumulates in slice order.
pub fn average_params(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::Domain("no models to average".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Domain("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("weights sum to {total}, not 1")));
    }
    let first = models[0];
    let dims = first.dims();
    for m in &models[1..] {
        if m.dims() != dims || m.bn.dim() != first.bn.dim() {
            return Err(Error::Dimension("models differ in shape".into()));
        }
    }

    let mut out = ModelParams::zeros(dims);
    out.bn.momentum = first.bn.momentum;
    out.bn.eps = first.bn.eps;
    out.bn.running_var.fill(0.0);
    for (model, &w) in models.iter().zip(weights) {
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(model.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += w * b;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(i: usize, h: usize, o: usize) -> ModelDims {
        ModelDims {
            input: i,
            hidden: h,
            output: o,
        }
    }

    #[test]
    fn zero_model_gives_zero_features() {
        let p = ModelParams::zeros(dims(3, 4, 2));
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]);
        let (f, _) = forward(&p, &x, Mode::Train).unwrap();
        assert_eq!(f, Matrix::zeros(2, 2));
    }

    #[test]
    fn identity_configuration_passes_input_through() {
        let mut p = ModelParams::zeros(dims(3, 3, 3));
        p.w1 = Matrix::identity(3);
        p.w2 = Matrix::identity(3);
        let x = Matrix::from_rows(&[[1.0, 0.0, 3.0], [0.5, 2.0, 0.25]]);
        let (f, _) = forward(&p, &x, Mode::Eval).unwrap();
        assert_eq!(f, x);
    }

    #[test]
    fn forward_rejects_bad_width_and_tiny_train_batch() {
        let p = ModelParams::zeros(dims(3, 4, 2));
        assert!(matches!(
            forward(&p, &Matrix::zeros(2, 4), Mode::Eval),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            forward(&p, &Matrix::zeros(1, 3), Mode::Train),
            Err(Error::BatchSize(_))
        ));
        assert!(forward(&p, &Matrix::zeros(1, 3), Mode::Eval).is_ok());
    }

    #[test]
    fn batch_norm_hand_example() {
        let mut bn = BatchNorm::new(1);
        bn.eps = 1e-15;
        let x = Matrix::from_rows(&[[1.0], [3.0]]);
        let (y, _) = batch_norm(&x, &mut bn, Mode::Train).unwrap();
        assert!((y[(0, 0)] + 1.0).abs() < 1e-7);
        assert!((y[(1, 0)] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn batch_norm_constant_column_is_zero() {
        let mut bn = BatchNorm::new(1);
        let x = Matrix::from_rows(&[[5.0], [5.0], [5.0]]);
        let (y, _) = batch_norm(&x, &mut bn, Mode::Train).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_train() {
        let mut bn = BatchNorm::new(1);
        let x = Matrix::from_rows(&[[1.0], [3.0]]);
        batch_norm(&x, &mut bn, Mode::Train).unwrap();
        // mean 2, unbiased variance 2
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
        let before = bn.clone();
        let (y, _) = batch_norm(&x, &mut bn, Mode::Eval).unwrap();
        assert_eq!(bn.running_mean, before.running_mean);
        assert_eq!(bn.running_var, before.running_var);
        let expect = (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt();
        assert!((y[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_moments() {
        let mut rng = Rng::new(3);
        let mut x = Matrix::zeros(32, 4);
        for v in x.as_mut_slice() {
            *v = 5.0 + 3.0 * rng.normal();
        }
        let mut bn = BatchNorm::new(4);
        let (y, _) = batch_norm(&x, &mut bn, Mode::Train).unwrap();
        let m = y.col_means();
        let v = y.col_variances(&m);
        for j in 0..4 {
            assert!(m[j].abs() <= 1e-9);
            assert!((v[j].sqrt() - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn batch_norm_errors() {
        let mut bn = BatchNorm::new(2);
        assert!(matches!(
            batch_norm(&Matrix::zeros(1, 2), &mut bn, Mode::Train),
            Err(Error::BatchSize(_))
        ));
        assert!(matches!(
            batch_norm(&Matrix::zeros(3, 3), &mut bn, Mode::Train),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn classifier_examples() {
        let mut rng = Rng::new(0);
        let mut head = ClassifierHead::init(1, 1, 0, &mut rng);
        head.w = Matrix::from_rows(&[[2.0]]);
        head.b = vec![1.0];
        let logits = classifier_forward(&head, &Matrix::from_rows(&[[3.0], [0.0]])).unwrap();
        assert_eq!(logits, Matrix::from_rows(&[[7.0], [1.0]]));

        let zero = ClassifierHead {
            w: Matrix::zeros(3, 4),
            b: vec![0.0; 4],
            owner: 1,
        };
        let l = classifier_forward(&zero, &Matrix::from_rows(&[[1.0, 2.0, 3.0]])).unwrap();
        assert_eq!(l, Matrix::zeros(1, 4));
        assert!(classifier_forward(&zero, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(1);
        let p = ModelParams::init(dims(4, 5, 3), &mut rng);
        let mut x = Matrix::zeros(3, 4);
        for v in x.as_mut_slice() {
            *v = rng.normal();
        }
        let (_, cache) = forward(&p, &x, Mode::Train).unwrap();
        let g = backward(
            &p,
            cache,
            Upstream {
                features: Some(Matrix::zeros(3, 3)),
                logits: None,
            },
        )
        .unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = Rng::new(2);
        let p = ModelParams::init(dims(4, 6, 3), &mut rng);
        let mut x = Matrix::zeros(5, 4);
        let mut g1 = Matrix::zeros(5, 3);
        let mut g2 = Matrix::zeros(5, 3);
        for v in x.as_mut_slice().iter_mut().chain(g1.as_mut_slice()).chain(g2.as_mut_slice()) {
            *v = rng.normal();
        }
        let run = |g: Matrix| {
            let (_, cache) = forward(&p, &x, Mode::Train).unwrap();
            backward(&p, cache, Upstream { features: Some(g), logits: None }).unwrap()
        };
        let mut sum = g1.clone();
        sum.add_assign(&g2).unwrap();
        let joint = run(sum);
        let mut separate = run(g1);
        separate.add_assign(&run(g2)).unwrap();
        for (a, b) in joint.w1.as_slice().iter().zip(separate.w1.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in joint.w2.as_slice().iter().zip(separate.w2.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(4);
        let mut p = ModelParams::init(dims(2, 3, 2), &mut rng);
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let (_, cache) = forward(&p, &x, Mode::Train).unwrap();
        let (_, cache2) = forward(&p, &x, Mode::Train).unwrap();
        let g = backward(&p, cache, Upstream { features: Some(Matrix::zeros(2, 2)), logits: None })
            .unwrap();
        sgd_step(&mut p, None, &g, 0.1).unwrap();
        assert!(matches!(
            backward(&p, cache2, Upstream::default()),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn sgd_rule() {
        let mut p = ModelParams::zeros(dims(1, 1, 1));
        p.w1[(0, 0)] = 1.0;
        let mut g = GradientSet::zeros(p.dims());
        g.w1[(0, 0)] = 0.5;
        let before = p.bn.clone();
        sgd_step(&mut p, None, &g, 0.1).unwrap();
        assert!((p.w1[(0, 0)] - 0.95).abs() < 1e-15);
        assert_eq!(p.bn.running_mean, before.running_mean);
        assert_eq!(p.bn.running_var, before.running_var);

        let snapshot = p.clone();
        let z = GradientSet::zeros(p.dims());
        sgd_step(&mut p, None, &z, 0.3).unwrap();
        assert_eq!(p, snapshot);
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step() {
        let mut rng = Rng::new(8);
        let base = ModelParams::init(dims(3, 3, 2), &mut rng);
        let mut g1 = GradientSet::zeros(base.dims());
        let mut g2 = GradientSet::zeros(base.dims());
        for v in g1.w1.as_mut_slice().iter_mut().chain(g2.w1.as_mut_slice()) {
            *v = rng.normal();
        }
        let mut a = base.clone();
        sgd_step(&mut a, None, &g1, 0.1).unwrap();
        sgd_step(&mut a, None, &g2, 0.1).unwrap();
        let mut b = base.clone();
        let mut sum = g1.clone();
        sum.add_assign(&g2).unwrap();
        sgd_step(&mut b, None, &sum, 0.1).unwrap();
        for (x, y) in a.w1.as_slice().iter().zip(b.w1.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_and_bad_lr() {
        let mut p = ModelParams::zeros(dims(1, 1, 1));
        let mut g = GradientSet::zeros(p.dims());
        assert!(matches!(sgd_step(&mut p, None, &g, 0.0), Err(Error::Domain(_))));
        g.b2[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut p, None, &g, 0.1), Err(Error::Divergence(_))));
    }

    #[test]
    fn average_examples() {
        let mut a = ModelParams::zeros(dims(1, 1, 1));
        let mut b = a.clone();
        a.w1[(0, 0)] = 1.0;
        b.w1[(0, 0)] = 2.0;
        a.bn.running_var[0] = 1.0;
        b.bn.running_var[0] = 5.0;
        let avg = average_params(&[&a, &b], &[0.25, 0.75]).unwrap();
        assert_eq!(avg.w1[(0, 0)], 1.75);
        assert_eq!(avg.bn.running_var[0], 4.0);

        let same = average_params(&[&a], &[1.0]).unwrap();
        assert_eq!(same, a);

        let c = a.clone();
        let idem = average_params(&[&a, &c, &a], &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(idem, a);
    }

    #[test]
    fn average_errors() {
        let a = ModelParams::zeros(dims(1, 1, 1));
        let b = ModelParams::zeros(dims(2, 1, 1));
        assert!(matches!(
            average_params(&[&a, &b], &[0.5, 0.5]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            average_params(&[&a, &a], &[0.5, 0.6]),
            Err(Error::Domain(_))
        ));
    }
}
