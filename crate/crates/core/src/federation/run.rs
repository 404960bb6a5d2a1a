use std::sync::Arc;

use super::{
    client_to_server_update, local_train, redistribute, AccessAudit, ClientState,
    DatasetHandle, LocalReport, MetricsRow, RoundConfig, ServerState, Upload,
};
use crate::data::{RetrievalSplit, World};
use crate::error::{Error, Result};
use crate::eval::{extract_embeddings, retrieval_eval, DistanceMetric, RankingResult};
use crate::model::{ClassifierHead, ModelDims, ModelParams};
use crate::numerics::{Purpose, Rng, StreamKey};
use crate::stats::{compute_ifs, estimate_dfs, DomainStats};

/// Stream index used for draws that belong to no client (global init, the
/// shared generator lift).
pub(crate) const GLOBAL_STREAM: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolEvent {
    InitStats { client: u32 },
    LocalTrain { epoch: u32, client: u32 },
    Upload { epoch: u32, client: u32 },
    Aggregate { epoch: u32 },
    Redistribute { epoch: u32 },
    Evaluate { epoch: u32 },
}

#[derive(Debug)]
pub struct FederatedRun {
    pub global: ModelParams,
    pub log: Vec<MetricsRow>,
    pub events: Vec<ProtocolEvent>,
    /// Server statistics registry after the last round.
    pub registry: Vec<DomainStats>,
    /// Final evaluation of the global model on the target split.
    pub final_eval: RankingResult,
}

/// One client per source domain, all starting from the same initial trunk.
/// Every client gets its own classifier head sized to its identity count.
pub fn build_clients(world: &World, cfg: &RoundConfig, audit: Arc<AccessAudit>) -> Result<Vec<ClientState>> {
    cfg.validate()?;
    let input = world
        .sources
        .first()
        .ok_or_else(|| Error::Config("no source domains".into()))?
        .samples
        .cols();
    let dims = ModelDims {
        input,
        hidden: cfg.hidden_dim,
        output: cfg.feature_dim,
    };
    let mut init_rng = Rng::derive(StreamKey {
        seed: cfg.seed,
        client: GLOBAL_STREAM,
        epoch: 0,
        purpose: Purpose::Init,
    });
    let params = ModelParams::init(dims, &mut init_rng);
    world
        .sources
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let id = i as u32;
            let mut head_rng = Rng::derive(StreamKey {
                seed: cfg.seed,
                client: id,
                epoch: 0,
                purpose: Purpose::Init,
            });
            Ok(ClientState {
                id,
                data: DatasetHandle::new(id, Arc::new(ds.clone()), audit.clone()),
                image_count: ds.len(),
                identity_count: ds.identity_count,
                params: params.clone(),
                head: ClassifierHead::init(cfg.feature_dim, ds.identity_count, id, &mut head_rng),
                stream: id,
                dfs_snapshot: Vec::new(),
            })
        })
        .collect()
}

/// Embeds the client's whole local set with its current model and summarizes
/// it into domain statistics stamped for `epoch`.
fn client_statistics(client: &ClientState, epoch: u32) -> Result<DomainStats> {
    let (x, y) = client.data.read_all(client.id);
    let emb = extract_embeddings(&client.params, &x)?;
    Ok(estimate_dfs(&compute_ifs(&emb, &y)?)?.with_stamp(client.id, epoch))
}

fn upload_of(client: &ClientState, epoch: u32) -> Result<Upload> {
    Ok(Upload {
        client_id: client.id,
        params: client.params.clone(),
        dfs: client_statistics(client, epoch)?,
        image_count: client.image_count,
    })
}

fn train_all(clients: &mut [ClientState], cfg: &RoundConfig, epoch: u32) -> Result<Vec<LocalReport>> {
    #[cfg(not(target_arch = "wasm32"))]
    {
        if clients.len() > 1 {
            return std::thread::scope(|s| {
                let handles: Vec<_> = clients
                    .iter_mut()
                    .map(|c| {
                        s.spawn(move || {
                            let snapshot = std::mem::take(&mut c.dfs_snapshot);
                            let report = local_train(c, &snapshot, cfg, epoch);
                            c.dfs_snapshot = snapshot;
                            report
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("local training thread panicked"))
                    .collect()
            });
        }
    }
    clients
        .iter_mut()
        .map(|c| {
            let snapshot = std::mem::take(&mut c.dfs_snapshot);
            let report = local_train(c, &snapshot, cfg, epoch);
            c.dfs_snapshot = snapshot;
            report
        })
        .collect()
}

pub fn evaluate_target(model: &ModelParams, split: &RetrievalSplit) -> Result<RankingResult> {
    let q = extract_embeddings(model, &split.query.samples)?;
    let g = extract_embeddings(model, &split.gallery.samples)?;
    retrieval_eval(&q, &split.query.labels, &g, &split.gallery.labels, DistanceMetric::Euclidean)
}

struct Clock {
    #[cfg(not(target_arch = "wasm32"))]
    start: Option<std::time::Instant>,
}

impl Clock {
    fn start(enabled: bool) -> Self {
        #[cfg(not(target_arch = "wasm32"))]
        {
            Clock {
                start: enabled.then(std::time::Instant::now),
            }
        }
        #[cfg(target_arch = "wasm32")]
        {
            let _ = enabled;
            Clock {}
        }
    }

    fn elapsed_ms(&self) -> u64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.map_or(0, |t| t.elapsed().as_millis() as u64)
        }
        #[cfg(target_arch = "wasm32")]
        {
            0
        }
    }
}

/// Runs the whole protocol: initial statistics from the untrained local
/// models, then `cfg.epochs` rounds of local training, upload, aggregation,
/// redistribution and target evaluation.
pub fn run_federated(clients: &mut [ClientState], split: &RetrievalSplit, cfg: &RoundConfig) -> Result<FederatedRun> {
    cfg.validate()?;
    if clients.len() < 2 {
        return Err(Error::Config(format!("need at least 2 clients, got {}", clients.len())));
    }
    cfg.alpha_for(clients.len())?;
    for (i, c) in clients.iter().enumerate() {
        if clients[..i].iter().any(|o| o.id == c.id) {
            return Err(Error::Protocol(format!("duplicate client id {}", c.id)));
        }
    }
    let mut events = Vec::new();
    let mut log = Vec::new();
    let row = |epoch: u32, eval: &RankingResult, loss: f64, wall_ms: u64| MetricsRow {
        epoch,
        variant: cfg.label(),
        seed: cfg.seed,
        target_map: 100.0 * eval.mean_ap,
        target_rank1: 100.0 * eval.rank1(),
        mean_local_loss: loss,
        wall_ms,
    };

    let clock = Clock::start(cfg.record_wall_clock);
    let mut sorted: Vec<&ClientState> = clients.iter().collect();
    sorted.sort_by_key(|c| c.id);
    let mut server = ServerState::new(sorted[0].params.clone());
    let mut uploads = Vec::with_capacity(clients.len());
    for c in &sorted {
        uploads.push(upload_of(c, 0)?);
        events.push(ProtocolEvent::InitStats { client: c.id });
    }
    client_to_server_update(&mut server, uploads)?;
    server.aggregate_staged()?;
    redistribute(&server, clients)?;
    let mut eval = evaluate_target(&server.global, split)?;
    events.push(ProtocolEvent::Evaluate { epoch: 0 });
    log.push(row(0, &eval, f64::NAN, clock.elapsed_ms()));

    for t in 0..cfg.epochs {
        let clock = Clock::start(cfg.record_wall_clock);
        server.begin_round();
        let epoch = server.epoch;
        let mut reports = train_all(clients, cfg, t)?;
        reports.sort_by_key(|r| r.client);
        events.extend(reports.iter().map(|r| ProtocolEvent::LocalTrain { epoch, client: r.client }));

        let mut order: Vec<usize> = (0..clients.len()).collect();
        order.sort_by_key(|&i| clients[i].id);
        let uploads = order
            .iter()
            .map(|&i| upload_of(&clients[i], epoch))
            .collect::<Result<Vec<_>>>()?;
        events.extend(uploads.iter().map(|u| ProtocolEvent::Upload { epoch, client: u.client_id }));
        client_to_server_update(&mut server, uploads)?;

        server.aggregate_staged()?;
        events.push(ProtocolEvent::Aggregate { epoch });
        redistribute(&server, clients)?;
        events.push(ProtocolEvent::Redistribute { epoch });

        eval = evaluate_target(&server.global, split)?;
        events.push(ProtocolEvent::Evaluate { epoch });
        let loss = reports.iter().map(LocalReport::mean_loss).sum::<f64>() / reports.len() as f64;
        log.push(row(epoch, &eval, loss, clock.elapsed_ms()));
    }

    Ok(FederatedRun {
        global: server.global.clone(),
        log,
        events,
        registry: server.dfs_snapshot(),
        final_eval: eval,
    })
}
