//! Experiment orchestration: single runs, the variant ablation and
//! hyperparameter sweeps, with their on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{generate_domains, SyntheticConfig, World};
use crate::error::{Error, Result};
use crate::federation::{
    build_clients, run_federated, write_metrics_csv, AccessAudit, FederatedRun, MetricsRow,
    RoundConfig, Variant,
};
use crate::model::encode_checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub round: RoundConfig,
    /// Training seeds. The world itself is generated once from
    /// `synthetic.seed`.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Variants compared by `ablate`.
    pub variants: Vec<Variant>,
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synthetic: SyntheticConfig::default(),
            round: RoundConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs"),
            variants: Variant::ALL.to_vec(),
            sweep: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<SweepValue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Alpha,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "alpha" => Ok(SweepParam::Alpha),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}; expected lambda or alpha"))),
        }
    }
}

/// A swept value: a scalar for λ, a concentration vector for α.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl SweepValue {
    /// `2.5` for scalars, `2:1:1` for vectors.
    pub fn label(&self) -> String {
        match self {
            SweepValue::Scalar(v) => v.to_string(),
            SweepValue::Vector(v) => v.iter().map(f64::to_string).collect::<Vec<_>>().join(":"),
        }
    }

    pub fn parse(param: SweepParam, s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sweep value {t:?}")))
        };
        match param {
            SweepParam::Lambda => num(s).map(SweepValue::Scalar),
            SweepParam::Alpha => s.split(':').map(num).collect::<Result<_>>().map(SweepValue::Vector),
        }
    }

    /// Parses a comma separated list such as `2,3,4` or `1:1:1,2:1:1`.
    pub fn parse_list(param: SweepParam, s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| SweepValue::parse(param, t))
            .collect()
    }

    fn apply(&self, param: SweepParam, round: &mut RoundConfig) -> Result<()> {
        match (param, self) {
            (SweepParam::Lambda, SweepValue::Scalar(v)) => round.lambda = *v,
            (SweepParam::Alpha, SweepValue::Vector(v)) => round.alpha = Some(v.clone()),
            _ => {
                return Err(Error::Config(format!(
                    "sweep value {} does not fit parameter {param:?}",
                    self.label()
                )))
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.round.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variants must not be empty".into()));
        }
        self.round.alpha_for(self.synthetic.num_domains)?;
        if self.round.p > self.synthetic.ids_per_domain {
            return Err(Error::Config(format!(
                "round.p = {} exceeds synthetic.ids_per_domain = {}",
                self.round.p, self.synthetic.ids_per_domain
            )));
        }
        if self.round.k > self.synthetic.samples_per_id {
            return Err(Error::Config(format!(
                "round.k = {} exceeds synthetic.samples_per_id = {}",
                self.round.k, self.synthetic.samples_per_id
            )));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep.values must not be empty".into()));
            }
            for v in &s.values {
                v.apply(s.param, &mut self.round.clone())?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Trains one configuration on `world` with a fresh access audit.
pub fn train_once(world: &World, round: &RoundConfig) -> Result<FederatedRun> {
    let audit = AccessAudit::new();
    let mut clients = build_clients(world, round, audit)?;
    run_federated(&mut clients, &world.split, round)
}

/// Trains every configuration in order. Each run is independent and
/// deterministic, so they could be farmed out; results come back in input
/// order either way.
pub fn train_many(world: &World, rounds: &[RoundConfig]) -> Result<Vec<FederatedRun>> {
    rounds.iter().map(|r| train_once(world, r)).collect()
}

fn write_atomically(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut staged = Vec::new();
    let result = (|| -> Result<Vec<PathBuf>> {
        for (name, bytes) in files {
            let tmp = dir.join(format!(".{name}.partial"));
            staged.push(tmp.clone());
            fs::write(&tmp, bytes)?;
        }
        let mut done = Vec::new();
        for (tmp, (name, _)) in staged.iter().zip(files) {
            let dst = dir.join(name);
            fs::rename(tmp, &dst)?;
            done.push(dst);
        }
        Ok(done)
    })();
    if result.is_err() {
        for tmp in &staged {
            let _ = fs::remove_file(tmp);
        }
    }
    result
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub run: FederatedRun,
    pub files: Vec<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fdfh";
pub const CONFIG_ECHO_FILE: &str = "config.resolved.json";

/// One seed of `cfg.round.variant`; writes the metrics log, the final global
/// checkpoint and the resolved config. Nothing is written if training fails.
pub fn run_experiment(cfg: &ExperimentConfig, seed: Option<u64>, out: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut resolved = cfg.clone();
    if let Some(seed) = seed {
        resolved.round.seed = seed;
        resolved.seeds = vec![seed];
    }
    if let Some(out) = out {
        resolved.output_dir = out.to_path_buf();
    }
    let world = generate_domains(&resolved.synthetic)?;
    let run = train_once(&world, &resolved.round)?;
    let files = write_atomically(
        &resolved.output_dir,
        &[
            (METRICS_FILE, write_metrics_csv(&run.log).into_bytes()),
            (CHECKPOINT_FILE, encode_checkpoint(&run.global)),
            (CONFIG_ECHO_FILE, resolved.to_json().into_bytes()),
        ],
    )?;
    Ok(RunArtifacts { run, files })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub no: usize,
    pub variant: String,
    pub seeds: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub rank1_mean: f64,
    pub rank1_std: f64,
}

pub const ABLATION_HEADER: &str = "no,variant,seeds,mAP_mean,mAP_std,rank1_mean,rank1_std";

pub fn write_ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.no, r.variant, r.seeds, r.map_mean, r.map_std, r.rank1_mean, r.rank1_std
        )
        .expect("writing to a String");
    }
    out
}

/// Final-epoch metrics for each run plus the per-variant summary.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub finals: Vec<MetricsRow>,
    pub rows: Vec<AblationRow>,
}

fn final_row(run: &FederatedRun) -> MetricsRow {
    run.log.last().expect("log has the init row").clone()
}

/// Runs every configured variant over every seed on one world.
pub fn ablation(cfg: &ExperimentConfig) -> Result<AblationResult> {
    cfg.validate()?;
    let world = generate_domains(&cfg.synthetic)?;
    let mut finals = Vec::new();
    let mut rows = Vec::new();
    for (i, &variant) in cfg.variants.iter().enumerate() {
        let rounds: Vec<RoundConfig> = cfg
            .seeds
            .iter()
            .map(|&seed| RoundConfig {
                variant,
                seed,
                ..cfg.round.clone()
            })
            .collect();
        let runs = train_many(&world, &rounds)?;
        let last: Vec<MetricsRow> = runs.iter().map(final_row).collect();
        let (map_mean, map_std) = mean_std(&last.iter().map(|r| r.target_map).collect::<Vec<_>>());
        let (rank1_mean, rank1_std) = mean_std(&last.iter().map(|r| r.target_rank1).collect::<Vec<_>>());
        rows.push(AblationRow {
            no: i + 1,
            variant: rounds[0].label(),
            seeds: last.len(),
            map_mean,
            map_std,
            rank1_mean,
            rank1_std,
        });
        finals.extend(last);
    }
    Ok(AblationResult { finals, rows })
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<(AblationResult, Vec<PathBuf>)> {
    let result = ablation(cfg)?;
    let files = write_atomically(
        &cfg.output_dir,
        &[
            (ABLATION_FILE, write_ablation_csv(&result.rows).into_bytes()),
            (ABLATION_RUNS_FILE, write_metrics_csv(&result.finals).into_bytes()),
        ],
    )?;
    Ok((result, files))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: String,
    pub seed: u64,
    pub target_map: f64,
    pub target_rank1: f64,
}

pub const SWEEP_HEADER: &str = "param,value,seed,target_mAP,target_rank1";

pub fn write_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let param = match r.param {
            SweepParam::Lambda => "lambda",
            SweepParam::Alpha => "alpha",
        };
        writeln!(out, "{param},{},{},{},{}", r.value, r.seed, r.target_map, r.target_rank1)
            .expect("writing to a String");
    }
    out
}

/// One run per value per seed of `cfg.round.variant`.
pub fn sweep(cfg: &ExperimentConfig, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let mut cfg = cfg.clone();
    cfg.sweep = Some(spec.clone());
    cfg.validate()?;
    let world = generate_domains(&cfg.synthetic)?;
    let mut rows = Vec::new();
    for value in &spec.values {
        let rounds = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let mut r = RoundConfig {
                    seed,
                    ..cfg.round.clone()
                };
                value.apply(spec.param, &mut r)?;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        for (r, run) in rounds.iter().zip(train_many(&world, &rounds)?) {
            let last = final_row(&run);
            rows.push(SweepRow {
                param: spec.param,
                value: value.label(),
                seed: r.seed,
                target_map: last.target_map,
                target_rank1: last.target_rank1,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_FILE: &str = "sweep.csv";

pub fn run_sweep(cfg: &ExperimentConfig, spec: &SweepSpec) -> Result<(Vec<SweepRow>, Vec<PathBuf>)> {
    let rows = sweep(cfg, spec)?;
    let files = write_atomically(&cfg.output_dir, &[(SWEEP_FILE, write_sweep_csv(&rows).into_bytes())])?;
    Ok((rows, files))
}
