use std::collections::{BTreeMap, BTreeSet};

use super::ClientState;
use crate::error::{Error, Result};
use crate::model::{average_params, ModelParams};
use crate::stats::DomainStats;

/// What a client sends after local training.
#[derive(Clone, Debug)]
pub struct Upload {
    pub client_id: u32,
    pub params: ModelParams,
    pub dfs: DomainStats,
    pub image_count: usize,
}

#[derive(Debug)]
pub struct ServerState {
    pub global: ModelParams,
    /// Latest domain statistics per client.
    pub registry: BTreeMap<u32, DomainStats>,
    /// Current round. Uploads must be stamped with exactly this epoch.
    pub epoch: u32,
    staged: BTreeMap<u32, (ModelParams, usize)>,
    aggregated: Option<u32>,
}

impl ServerState {
    pub fn new(global: ModelParams) -> Self {
        ServerState {
            global,
            registry: BTreeMap::new(),
            epoch: 0,
            staged: BTreeMap::new(),
            aggregated: None,
        }
    }

    /// Opens the next round.
    pub fn begin_round(&mut self) {
        self.epoch += 1;
        self.staged.clear();
    }

    pub fn staged_clients(&self) -> Vec<u32> {
        self.staged.keys().copied().collect()
    }

    /// Registry contents in ascending client order.
    pub fn dfs_snapshot(&self) -> Vec<DomainStats> {
        self.registry.values().cloned().collect()
    }

    /// Aggregates the models staged this round, weighted by image count.
    pub fn aggregate_staged(&mut self) -> Result<&ModelParams> {
        if self.staged.is_empty() {
            return Err(Error::Protocol("no models staged for aggregation".into()));
        }
        let (models, counts): (Vec<&ModelParams>, Vec<usize>) =
            self.staged.values().map(|(m, n)| (m, *n)).unzip();
        self.global = aggregate(&models, &counts)?;
        self.aggregated = Some(self.epoch);
        Ok(&self.global)
    }
}

/// Registers uploaded models and statistics. All uploads are validated before
/// any state changes.
pub fn client_to_server_update(server: &mut ServerState, uploads: Vec<Upload>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for u in &uploads {
        if !seen.insert(u.client_id) {
            return Err(Error::Protocol(format!(
                "client {} uploaded twice in one round",
                u.client_id
            )));
        }
        if u.dfs.client_id != u.client_id {
            return Err(Error::Protocol(format!(
                "client {} uploaded statistics labelled for client {}",
                u.client_id, u.dfs.client_id
            )));
        }
        if u.dfs.epoch_stamp < server.epoch {
            return Err(Error::Stale {
                client: u.client_id,
                stamp: u.dfs.epoch_stamp,
                current: server.epoch,
            });
        }
        if u.dfs.epoch_stamp > server.epoch {
            return Err(Error::Protocol(format!(
                "client {} stamped epoch {} ahead of server epoch {}",
                u.client_id, u.dfs.epoch_stamp, server.epoch
            )));
        }
        if u.image_count == 0 {
            return Err(Error::Domain(format!("client {} reports zero images", u.client_id)));
        }
    }
    for u in uploads {
        server.registry.insert(u.client_id, u.dfs);
        server.staged.insert(u.client_id, (u.params, u.image_count));
    }
    server.aggregated = None;
    Ok(())
}

/// Weighted average with weights `N_i / N_total`, summed in the given order.
pub fn aggregate(models: &[&ModelParams], image_counts: &[usize]) -> Result<ModelParams> {
    if models.len() != image_counts.len() {
        return Err(Error::Dimension(format!(
            "{} models but {} image counts",
            models.len(),
            image_counts.len()
        )));
    }
    let total: usize = image_counts.iter().sum();
    if total == 0 {
        return Err(Error::Domain("total image count is zero".into()));
    }
    let weights: Vec<f64> = image_counts
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect();
    average_params(models, &weights)
}

/// Replaces every client's trunk with the global model and hands out the
/// registry snapshot. Classifier heads stay as they are.
pub fn redistribute(server: &ServerState, clients: &mut [ClientState]) -> Result<()> {
    if server.aggregated != Some(server.epoch) {
        return Err(Error::Protocol(format!(
            "redistribute before aggregation in epoch {}",
            server.epoch
        )));
    }
    let snapshot = server.dfs_snapshot();
    for c in clients {
        c.params = server.global.clone();
        c.dfs_snapshot = snapshot.clone();
    }
    Ok(())
}
