use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multilink::comparison::FieldRole;
use multilink::evaluation::{mwge, ome, ScoringMode};
use multilink::pipeline::{self, LinkageConfig, SweepConfig};
use multilink::synthetic::{corrupt_files, generate_population, PopulationSpec};
use multilink::{LinkError, Result};

#[derive(Parser)]
#[command(name = "multilink", version, about = "Link K datafiles without shared identifiers")]
struct Cli {
    /// Print progress and run summaries to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Block, compare, fit and classify the files named in a linkage config.
    Link {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `em.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Threads for restart chains.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run a simulation sweep and write per-replication and summary metrics.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Score an assignments file against a ground-truth file.
    Evaluate {
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// `declared-only` or `undeclared-as-error`.
        #[arg(long, default_value = "declared-only")]
        mode: ScoringMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic population as CSV files plus ground truth.
    Generate {
        /// Population description (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hit-miss β for every compared field.
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Link {
            config,
            out,
            seed,
            threads,
        } => {
            let mut cfg = LinkageConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.em.seed = s;
            }
            if let Some(t) = threads {
                cfg.em.threads = t;
            }
            let out = out
                .or_else(|| cfg.output.clone())
                .ok_or_else(|| LinkError::Config("no output directory: pass --out or set `output`".into()))?;
            let art = pipeline::run_link(&cfg, &out)?;
            if verbose {
                let r = &art.run;
                eprintln!(
                    "n = {}, fully blocked = {}, declared = {}, undeclared = {}",
                    r.n, r.fully_blocked_count, r.declared, r.undeclared
                );
                if let (Some(ll), Some(conv)) = (r.loglik, r.converged) {
                    eprintln!("loglik = {ll}, converged = {conv}");
                }
                eprintln!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::Simulate {
            config,
            out,
            seed,
            threads,
            replications,
        } => {
            let mut cfg = SweepConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(r) = replications {
                cfg.replications = r;
            }
            cfg.validate()?;
            let result = pipeline::run_simulation(&cfg, &out)?;
            if verbose {
                for s in &result.scenarios {
                    let m = result.summary_of(s.id, "all", "mwge");
                    eprintln!(
                        "scenario {} blocking={} optional={} beta={}: mwge = {} ({} failed)",
                        s.id,
                        s.blocking,
                        s.optional,
                        s.beta,
                        m.map_or("n/a".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.se)),
                        result.failures[s.id]
                    );
                }
            }
            Ok(())
        }
        Command::Evaluate {
            assignments,
            truth,
            mode,
            out,
        } => {
            let m = pipeline::run_evaluate(&assignments, &truth, mode, &out)?;
            if verbose {
                eprintln!("ome = {:?}, mwge = {:?}", ome(&m, mode).ok(), mwge(&m, mode).ok());
            }
            Ok(())
        }
        Command::Generate { config, out, seed, beta } => generate(&config, &out, seed, beta, verbose),
    }
}

fn generate(config: &Path, out: &Path, seed: u64, beta: f64, verbose: bool) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| LinkError::Config(format!("{}: {e}", config.display())))?;
    let spec: PopulationSpec = toml::from_str(&text).map_err(|e| LinkError::Config(e.to_string()))?;
    let (files, truth) = generate_population(&spec, seed)?;
    let betas: BTreeMap<String, f64> = spec
        .fields
        .iter()
        .filter(|f| f.role == FieldRole::Compared)
        .map(|f| (f.name.clone(), beta))
        .collect();
    let observed = corrupt_files(&files, &spec, &betas, pipeline::stream_seed(seed, &[1]))?;
    pipeline::write_population(&observed, &truth, &spec, out)?;
    if verbose {
        eprintln!("wrote {} files and truth.csv to {}", observed.len(), out.display());
    }
    Ok(())
}
