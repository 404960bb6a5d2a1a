//! Browser bindings for the fedhal simulator.
//!
//! Every export takes plain numbers or strings and returns a JSON string, so
//! the page needs no generated glue beyond `wasm-bindgen` itself. Failures
//! come back as `{"error": "..."}`.

use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use fedhal::data::{generate_domains, SyntheticConfig};
use fedhal::experiment::train_once;
use fedhal::federation::{RoundConfig, Variant};
use fedhal::hallucinate::{domain_hallucinate, feature_hallucinate};
use fedhal::matrix::Matrix;
use fedhal::model::{batch_norm, BatchNorm, Mode};
use fedhal::numerics::{sample_dirichlet, Rng};
use fedhal::stats::DomainVectors;
use fedhal::{Error, Result};

fn respond<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("demo output serializes"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

fn parse_alpha(text: &str) -> Result<Vec<f64>> {
    text.split([',', ':'])
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("alpha entry {s:?} is not a number")))
        })
        .collect()
}

#[derive(Serialize)]
pub struct DirichletDraws {
    pub alpha: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

pub fn dirichlet_draws(alpha: &str, count: u32, seed: u64) -> Result<DirichletDraws> {
    let alpha = parse_alpha(alpha)?;
    let mut rng = Rng::new(seed);
    let samples = (0..count)
        .map(|_| sample_dirichlet(&alpha, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; alpha.len()];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / count.max(1) as f64;
        }
    }
    Ok(DirichletDraws { alpha, samples, mean })
}

/// Draws `count` Dirichlet weight vectors for a comma or colon separated `alpha`.
#[wasm_bindgen]
pub fn dirichlet(alpha: &str, count: u32, seed: u64) -> String {
    respond(dirichlet_draws(alpha, count, seed))
}

#[derive(Serialize)]
pub struct Cloud {
    pub points: Vec<[f64; 2]>,
    pub mu: Vec<f64>,
    pub sigma_sq: Vec<f64>,
}

impl Cloud {
    fn from_matrix(m: &Matrix) -> Cloud {
        let mu = m.col_means();
        let sigma_sq = m.col_variances(&mu);
        Cloud {
            points: (0..m.rows()).map(|r| [m[(r, 0)], m[(r, 1)]]).collect(),
            mu,
            sigma_sq,
        }
    }

    fn vectors(&self) -> DomainVectors {
        DomainVectors {
            mu: self.mu.clone(),
            sigma_sq: self.sigma_sq.clone(),
        }
    }
}

#[derive(Serialize)]
pub struct Style {
    pub mu: Vec<f64>,
    pub sigma_sq: Vec<f64>,
}

#[derive(Serialize)]
pub struct HallucinationDemo {
    pub domains: Vec<Cloud>,
    pub weights: Vec<f64>,
    pub novel: Style,
    /// Domain 0 restyled into the hallucinated domain.
    pub restyled: Cloud,
}

/// Three 2-D domain clouds sharing one shape, a Dirichlet mix of their
/// styles, and domain 0 re-rendered in that mixed style.
pub fn hallucination_demo(alpha: &str, points: u32, seed: u64) -> Result<HallucinationDemo> {
    let alpha = parse_alpha(alpha)?;
    if alpha.len() != 3 {
        return Err(Error::Config(format!("alpha needs 3 entries, got {}", alpha.len())));
    }
    if points < 2 {
        return Err(Error::Config("need at least 2 points per domain".into()));
    }
    let mut rng = Rng::new(seed);
    let n = points as usize;
    let base: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let t = rng.normal();
            [t + 0.3 * rng.normal(), 0.5 * t + 0.3 * rng.normal()]
        })
        .collect();
    let styles = [([-3.0, 2.0], [0.6, 1.4]), ([3.0, 2.5], [1.5, 0.5]), ([0.0, -3.0], [1.0, 1.0])];
    let domains: Vec<Cloud> = styles
        .iter()
        .map(|(shift, scale)| {
            let data = base
                .iter()
                .flat_map(|p| [shift[0] + scale[0] * p[0], shift[1] + scale[1] * p[1]])
                .collect();
            Ok(Cloud::from_matrix(&Matrix::from_vec(n, 2, data)?))
        })
        .collect::<Result<_>>()?;

    let weights = sample_dirichlet(&alpha, &mut rng)?;
    let vectors: Vec<DomainVectors> = domains.iter().map(Cloud::vectors).collect();
    let novel = domain_hallucinate(&vectors, &weights)?;

    let own = Matrix::from_vec(n, 2, domains[0].points.iter().flatten().copied().collect())?;
    let (normalized, _) = batch_norm(&own, &mut BatchNorm::new(2), Mode::Train)?;
    let restyled = Cloud::from_matrix(&feature_hallucinate(&normalized, &novel)?);
    Ok(HallucinationDemo {
        domains,
        weights,
        novel: Style {
            mu: novel.mu,
            sigma_sq: novel.sigma_sq,
        },
        restyled,
    })
}

#[wasm_bindgen]
pub fn hallucinate(alpha: &str, points: u32, seed: u64) -> String {
    respond(hallucination_demo(alpha, points, seed))
}

#[derive(Serialize)]
pub struct Curve {
    pub variant: String,
    pub map: Vec<f64>,
    pub rank1: Vec<f64>,
}

#[derive(Serialize)]
pub struct Simulation {
    pub epochs: Vec<u32>,
    pub curves: Vec<Curve>,
}

fn demo_configs(epochs: u32, lambda: f64, seed: u64) -> (SyntheticConfig, RoundConfig) {
    let synthetic = SyntheticConfig {
        ids_per_domain: 10,
        samples_per_id: 8,
        seed,
        ..SyntheticConfig::default()
    };
    let round = RoundConfig {
        epochs,
        iters_per_round: 5,
        batch_size: 16,
        p: 4,
        k: 4,
        lr: 0.01,
        lr_decay_epochs: Vec::new(),
        lambda,
        seed,
        ..RoundConfig::default()
    };
    (synthetic, round)
}

/// Small federated run of each listed variant on one synthetic world.
pub fn simulation(variants: &str, epochs: u32, lambda: f64, seed: u64) -> Result<Simulation> {
    let variants = variants
        .split(',')
        .map(|s| s.trim().parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    if epochs > 200 {
        return Err(Error::Config("at most 200 epochs in the browser".into()));
    }
    let (synthetic, round) = demo_configs(epochs, lambda, seed);
    round.validate()?;
    let world = generate_domains(&synthetic)?;
    let mut curves = Vec::new();
    for variant in variants {
        let run = train_once(&world, &RoundConfig { variant, ..round.clone() })?;
        curves.push(Curve {
            variant: variant.to_string(),
            map: run.log.iter().map(|r| r.target_map).collect(),
            rank1: run.log.iter().map(|r| r.target_rank1).collect(),
        });
    }
    Ok(Simulation {
        epochs: (0..=epochs).collect(),
        curves,
    })
}

/// `variants` is a comma separated list such as `fedavg,fh,dfh`.
#[wasm_bindgen]
pub fn simulate(variants: &str, epochs: u32, lambda: f64, seed: u64) -> String {
    respond(simulation(variants, epochs, lambda, seed))
}
