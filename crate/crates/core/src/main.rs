use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedhal::data::{encode_dataset, generate_domains};
use fedhal::experiment::{run_ablation, run_experiment, run_sweep, ExperimentConfig, SweepParam, SweepSpec, SweepValue};
use fedhal::federation::evaluate_target;
use fedhal::model::decode_checkpoint;
use fedhal::{Error, Result};

#[derive(Parser)]
#[command(name = "fedhal", version, about = "Federated domain generalization with domain and feature hallucination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seed and write metrics, checkpoint and resolved config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare all configured variants over all seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep lambda or alpha. Alpha vectors are written as 1:1:1.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: Option<String>,
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the generated world as FDAT files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the target split of the configured world.
    EvalCheckpoint {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, seed, out } => {
            let cfg = load(&config, None)?;
            let art = run_experiment(&cfg, seed, out.as_deref())?;
            let last = art.run.log.last().expect("init row");
            println!(
                "{} seed {}: target mAP {:.2}, rank-1 {:.2}",
                last.variant, last.seed, last.target_map, last.target_rank1
            );
            for f in &art.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Ablate { config, out } => {
            let cfg = load(&config, out)?;
            let (res, files) = run_ablation(&cfg)?;
            println!("no  variant     mAP              rank-1");
            for r in &res.rows {
                println!(
                    "{:<3} {:<10} {:6.2} ± {:5.2}   {:6.2} ± {:5.2}",
                    r.no, r.variant, r.map_mean, r.map_std, r.rank1_mean, r.rank1_std
                );
            }
            for f in &files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep { config, param, values, out } => {
            let cfg = load(&config, out)?;
            let spec = match (param, values, &cfg.sweep) {
                (Some(p), Some(v), _) => {
                    let param: SweepParam = p.parse()?;
                    SweepSpec {
                        param,
                        values: SweepValue::parse_list(param, &v)?,
                    }
                }
                (None, None, Some(s)) => s.clone(),
                (Some(p), None, Some(s)) if p.parse::<SweepParam>()? == s.param => s.clone(),
                _ => {
                    return Err(Error::Config(
                        "sweep needs --param and --values, or a sweep section in the config".into(),
                    ))
                }
            };
            let (rows, files) = run_sweep(&cfg, &spec)?;
            for r in &rows {
                println!("{} seed {}: mAP {:.2}, rank-1 {:.2}", r.value, r.seed, r.target_map, r.target_rank1);
            }
            for f in &files {
                println!("wrote {}", f.display());
            }
        }
        Command::GenData { config, out } => {
            let cfg = load(&config, None)?;
            let world = generate_domains(&cfg.synthetic)?;
            fs::create_dir_all(&out)?;
            let mut files = Vec::new();
            for ds in &world.sources {
                files.push((format!("source_{}.fdat", ds.domain_id), encode_dataset(ds)));
            }
            files.push(("target_query.fdat".into(), encode_dataset(&world.split.query)));
            files.push(("target_gallery.fdat".into(), encode_dataset(&world.split.gallery)));
            for (name, bytes) in files {
                let path = out.join(name);
                fs::write(&path, bytes)?;
                println!("wrote {}", path.display());
            }
        }
        Command::EvalCheckpoint { config, checkpoint } => {
            let cfg = load(&config, None)?;
            let model = decode_checkpoint(&fs::read(&checkpoint)?)?;
            let world = generate_domains(&cfg.synthetic)?;
            let r = evaluate_target(&model, &world.split)?;
            println!(
                "{{\"target_mAP\": {}, \"target_rank1\": {}}}",
                100.0 * r.mean_ap,
                100.0 * r.rank1()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
