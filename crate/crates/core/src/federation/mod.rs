//! The federated protocol: local training on every client, upload of local
//! models and domain statistics, image-count-weighted aggregation on the
//! server, and redistribution of the global model with the statistics
//! registry.

mod audit;
mod local;
mod metrics;
mod run;
mod server;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use audit::{AccessAudit, AccessRecord, DatasetHandle};
pub use local::{local_train, training_step, LocalReport, NovelSource, StepHallucination, StepOutput};
pub use metrics::{parse_metrics_csv, write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use run::{build_clients, evaluate_target, run_federated, FederatedRun, ProtocolEvent};
pub use server::{aggregate, client_to_server_update, redistribute, ServerState, Upload};

use crate::error::{Error, Result};
use crate::losses::HallucinatedObjective;
use crate::model::{ClassifierHead, ModelParams};
use crate::stats::DomainStats;

/// Which local objective a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// Original-feature loss only.
    FedAvg,
    /// Adds triplet terms on features re-styled into every other client's domain.
    Fh,
    /// FH plus a novel batch mixed from the re-styled batches with Dirichlet weights.
    FhDm,
    /// FH plus a novel batch mixed from two re-styled batches with a Beta(1, 1) weight.
    FhFm,
    /// FH plus a novel batch re-styled with Dirichlet-mixed domain statistics.
    Dfh,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::FedAvg, Variant::Fh, Variant::FhDm, Variant::FhFm, Variant::Dfh];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FedAvg => "fedavg",
            Variant::Fh => "fh",
            Variant::FhDm => "fh+dm",
            Variant::FhFm => "fh+fm",
            Variant::Dfh => "dfh",
        }
    }

    pub fn hallucinates(self) -> bool {
        self != Variant::FedAvg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of fedavg, fh, fh+dm, fh+fm, dfh"
                ))
            })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.as_str().to_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub epochs: u32,
    pub iters_per_round: usize,
    /// `N_b`; must equal `p * k`.
    pub batch_size: usize,
    pub p: usize,
    pub k: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_decay_factor` on entering each
    /// of these epochs.
    pub lr_decay_epochs: Vec<u32>,
    pub lr_decay_factor: f64,
    pub lambda: f64,
    pub margin: f64,
    /// Dirichlet concentration, one entry per client. `None` means all ones.
    pub alpha: Option<Vec<f64>>,
    pub variant: Variant,
    pub hallucinated_objective: HallucinatedObjective,
    /// Redraw domain vectors and Dirichlet weights every iteration instead of
    /// once per local round.
    pub resample_per_iteration: bool,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Fill the `wall_ms` metrics column. Off by default so that metrics files
    /// are reproducible byte for byte.
    pub record_wall_clock: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            epochs: 40,
            iters_per_round: 10,
            batch_size: 32,
            p: 8,
            k: 4,
            lr: 1e-3,
            lr_decay_epochs: vec![20, 30],
            lr_decay_factor: 0.5,
            lambda: 5.0,
            margin: 0.5,
            alpha: None,
            variant: Variant::Dfh,
            hallucinated_objective: HallucinatedObjective::Triplet,
            resample_per_iteration: false,
            hidden_dim: 64,
            feature_dim: 16,
            seed: 0,
            record_wall_clock: false,
        }
    }
}

impl RoundConfig {
    /// Batch geometry of the full-size setting: `N_b = 64`, 200 iterations
    /// per round, with `P = 16`, `K = 4`.
    pub fn full_scale() -> Self {
        RoundConfig {
            iters_per_round: 200,
            batch_size: 64,
            p: 16,
            k: 4,
            ..RoundConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p * self.k != self.batch_size {
            return Err(Error::Config(format!(
                "round.p * round.k = {} * {} does not equal round.batch_size = {}",
                self.p, self.k, self.batch_size
            )));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config("round.p and round.k must be at least 2".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("round.lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0) || !self.lr_decay_factor.is_finite() {
            return Err(Error::Config("round.lr_decay_factor must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("round.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("round.margin must be >= 0, got {}", self.margin)));
        }
        if let Some(alpha) = &self.alpha {
            if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
                return Err(Error::Config(format!("round.alpha entries must be positive, got {alpha:?}")));
            }
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: u32) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn alpha_for(&self, clients: usize) -> Result<Vec<f64>> {
        match &self.alpha {
            None => Ok(vec![1.0; clients]),
            Some(a) if a.len() == clients => Ok(a.clone()),
            Some(a) => Err(Error::Config(format!(
                "round.alpha has {} entries for {clients} clients",
                a.len()
            ))),
        }
    }

    /// Variant name as written to metrics files; the cross-entropy objective
    /// on hallucinated batches gets a `+ce` suffix.
    pub fn label(&self) -> String {
        match self.hallucinated_objective {
            HallucinatedObjective::Triplet => self.variant.to_string(),
            HallucinatedObjective::CrossEntropy => format!("{}+ce", self.variant),
        }
    }
}

/// One client's private state. Only `params` and freshly estimated domain
/// statistics ever leave it.
#[derive(Debug)]
pub struct ClientState {
    pub id: u32,
    pub data: DatasetHandle,
    pub image_count: usize,
    pub identity_count: usize,
    pub params: ModelParams,
    pub head: ClassifierHead,
    /// Key for this client's random streams. Equal to `id` unless a test
    /// deliberately makes two clients share streams.
    pub stream: u32,
    /// Server statistics registry as of the last redistribution.
    pub dfs_snapshot: Vec<DomainStats>,
}
