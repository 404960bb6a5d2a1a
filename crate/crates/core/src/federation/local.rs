use super::{ClientState, RoundConfig, Variant};
use crate::data::pk_sample_batch;
use crate::error::{Error, Result};
use crate::hallucinate::{
    dirichlet_feature_mixup, feature_hallucinate, feature_hallucinate_backward, mix_pair,
    HallucinationPlan,
};
use crate::losses::{local_loss, HallucinatedObjective, LocalLoss, LocalLossInput};
use crate::matrix::Matrix;
use crate::model::{
    backward, batch_norm, batch_norm_backward, forward, sgd_step, ClassifierHead, GradientSet,
    Mode, ModelParams, Upstream,
};
use crate::numerics::{sample_beta, sample_dirichlet, Purpose, Rng, StreamKey};
use crate::stats::DomainVectors;

/// How the novel batch of one step is built from the re-styled batches.
#[derive(Clone, Debug, PartialEq)]
pub enum NovelSource {
    None,
    /// Re-style with these (Dirichlet-mixed) domain statistics.
    Domain(DomainVectors),
    /// Weighted sum of the re-styled batches of every client, own included.
    DirichletMix(Vec<f64>),
    /// `lambda · batch[a] + (1 - lambda) · batch[b]`.
    PairMix { a: usize, b: usize, lambda: f64 },
}

/// Hallucination inputs for one step. `targets` holds one sampled domain per
/// client; the entry at `own` is this client's.
#[derive(Clone, Debug)]
pub struct StepHallucination<'a> {
    pub own: usize,
    pub targets: &'a [DomainVectors],
    pub novel: NovelSource,
}

#[derive(Debug)]
pub struct StepOutput {
    pub loss: LocalLoss,
    pub grads: GradientSet,
}

/// Forward, batch norm, hallucination, loss and reverse pass for one batch.
///
/// Updates the batch-norm running statistics in `params` (train mode) but not
/// the weights. With `hallucination = None` only the original-feature loss is
/// used.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    params: &mut ModelParams,
    head: &ClassifierHead,
    batch: &Matrix,
    labels: &[u32],
    hallucination: Option<&StepHallucination<'_>>,
    lambda: f64,
    margin: f64,
    objective: HallucinatedObjective,
) -> Result<StepOutput> {
    let (features, cache) = forward(params, batch, Mode::Train)?;
    let (normalized, bn_cache) = batch_norm(&features, &mut params.bn, Mode::Train)?;

    let (restyled, others, novel) = match hallucination {
        None => (Vec::new(), Vec::new(), None),
        Some(h) => {
            if h.own >= h.targets.len() {
                return Err(Error::Protocol(format!(
                    "own index {} outside {} domains",
                    h.own,
                    h.targets.len()
                )));
            }
            let restyled = h
                .targets
                .iter()
                .map(|t| feature_hallucinate(&normalized, t))
                .collect::<Result<Vec<_>>>()?;
            let others: Vec<Matrix> = restyled
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != h.own)
                .map(|(_, m)| m.clone())
                .collect();
            let novel = match &h.novel {
                NovelSource::None => None,
                NovelSource::Domain(v) => Some(feature_hallucinate(&normalized, v)?),
                NovelSource::DirichletMix(w) => Some(dirichlet_feature_mixup(&restyled, w)?),
                NovelSource::PairMix { a, b, lambda } => {
                    let (a, b) = (restyled.get(*a), restyled.get(*b));
                    let (Some(a), Some(b)) = (a, b) else {
                        return Err(Error::Protocol("pair mixup index out of range".into()));
                    };
                    Some(mix_pair(a, b, *lambda)?)
                }
            };
            (restyled, others, novel)
        }
    };
    drop(restyled);

    let loss = local_loss(&LocalLossInput {
        original: &features,
        labels,
        novel: novel.as_ref(),
        others: &others,
        head,
        lambda,
        margin,
        objective,
    })?;

    let mut d_features = loss.grad_original.clone();
    if let Some(h) = hallucination {
        let mut d_norm = Matrix::zeros(normalized.rows(), normalized.cols());
        let other_targets = h
            .targets
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != h.own)
            .map(|(_, t)| t);
        for (t, g) in other_targets.zip(&loss.grad_others) {
            d_norm.add_assign(&feature_hallucinate_backward(t, g)?)?;
        }
        if let Some(g) = &loss.grad_novel {
            match &h.novel {
                NovelSource::None => {}
                NovelSource::Domain(v) => d_norm.add_assign(&feature_hallucinate_backward(v, g)?)?,
                NovelSource::DirichletMix(w) => {
                    for (t, &wk) in h.targets.iter().zip(w) {
                        d_norm.axpy(wk, &feature_hallucinate_backward(t, g)?)?;
                    }
                }
                NovelSource::PairMix { a, b, lambda } => {
                    d_norm.axpy(*lambda, &feature_hallucinate_backward(&h.targets[*a], g)?)?;
                    d_norm.axpy(1.0 - lambda, &feature_hallucinate_backward(&h.targets[*b], g)?)?;
                }
            }
        }
        d_features.add_assign(&batch_norm_backward(&bn_cache, &d_norm)?)?;
    }

    let mut grads = backward(
        params,
        cache,
        Upstream {
            features: Some(d_features),
            logits: None,
        },
    )?;
    grads.head = Some(loss.grad_head.clone());
    if !loss.value.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence(format!("local loss {}", loss.value)));
    }
    Ok(StepOutput { loss, grads })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalReport {
    pub client: u32,
    pub losses: Vec<f64>,
}

impl LocalReport {
    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            f64::NAN
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        }
    }
}

fn novel_source(
    variant: Variant,
    plan: &HallucinationPlan,
    alpha: &[f64],
    rng: &mut Rng,
) -> Result<NovelSource> {
    Ok(match variant {
        Variant::FedAvg | Variant::Fh => NovelSource::None,
        Variant::Dfh => NovelSource::Domain(plan.novel.clone()),
        Variant::FhDm => NovelSource::DirichletMix(sample_dirichlet(alpha, rng)?),
        Variant::FhFm => {
            let n = plan.targets.len();
            if n < 2 {
                return Err(Error::Protocol("pair mixup needs two domains".into()));
            }
            let pool: Vec<usize> = (0..n).collect();
            let pick = rng.choose_distinct(&pool, 2);
            NovelSource::PairMix {
                a: pick[0],
                b: pick[1],
                lambda: sample_beta(1.0, 1.0, rng)?,
            }
        }
    })
}

/// One local round for `client`: draw domain vectors for every client and the
/// novel-batch recipe once, then run `cfg.iters_per_round` SGD steps on PK batches.
///
/// Batches and hallucination draw from separate streams keyed by
/// `(cfg.seed, client.stream, epoch)`, so variants that differ only in
/// hallucination see the same batches.
pub fn local_train(
    client: &mut ClientState,
    dfs_all: &[crate::stats::DomainStats],
    cfg: &RoundConfig,
    epoch: u32,
) -> Result<LocalReport> {
    let own = dfs_all
        .iter()
        .position(|d| d.client_id == client.id)
        .ok_or_else(|| Error::Protocol(format!("no domain statistics for client {}", client.id)))?;
    let alpha = cfg.alpha_for(dfs_all.len())?;
    let key = |purpose| StreamKey {
        seed: cfg.seed,
        client: client.stream,
        epoch,
        purpose,
    };
    let mut batch_rng = Rng::derive(key(Purpose::Batches));
    let mut hal_rng = Rng::derive(key(Purpose::Hallucination));
    let lr = cfg.lr_at(epoch);

    let draw = |rng: &mut Rng| -> Result<(HallucinationPlan, NovelSource)> {
        let plan = HallucinationPlan::draw(dfs_all, &alpha, rng)?;
        let novel = novel_source(cfg.variant, &plan, &alpha, rng)?;
        Ok((plan, novel))
    };
    let mut plan = if cfg.variant.hallucinates() && cfg.iters_per_round > 0 {
        Some(draw(&mut hal_rng)?)
    } else {
        None
    };

    let mut losses = Vec::with_capacity(cfg.iters_per_round);
    for it in 0..cfg.iters_per_round {
        if cfg.resample_per_iteration && it > 0 && plan.is_some() {
            plan = Some(draw(&mut hal_rng)?);
        }
        let idx = pk_sample_batch(client.data.layout(), cfg.p, cfg.k, &mut batch_rng)?;
        let (batch, labels) = client.data.read(client.id, &idx);

        let step_hal = plan.as_ref().map(|(plan, novel)| StepHallucination {
            own,
            targets: &plan.targets,
            novel: novel.clone(),
        });
        let out = training_step(
            &mut client.params,
            &client.head,
            &batch,
            &labels,
            step_hal.as_ref(),
            cfg.lambda,
            cfg.margin,
            cfg.hallucinated_objective,
        )?;
        sgd_step(&mut client.params, Some(&mut client.head), &out.grads, lr)?;
        if !client.params.is_finite() {
            return Err(Error::Divergence(format!(
                "client {} parameters became non-finite at iteration {it}",
                client.id
            )));
        }
        losses.push(out.loss.value);
    }
    Ok(LocalReport {
        client: client.id,
        losses,
    })
}
