use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ammasurv_core::checkpoint::Checkpoint;
use ammasurv_core::config::{AblationMode, RunConfig};
use ammasurv_core::experiment::{self, ABLATION_TABLE, CHECKPOINT};

#[derive(Parser)]
#[command(
    name = "ammasurv",
    version,
    about = "Asymmetric multi-modal attention survival model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest, slides, genes) to --out.
    Generate(Common),
    /// Train one model; writes the config echo, metrics log and checkpoint.
    Train(Common),
    /// Test-split C-index of a saved checkpoint.
    Evaluate(Common),
    /// Train every ablation mode on the same data and seed.
    Ablate(Common),
    /// Finite-difference gradient suite.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also dump attention matrices of the first test patient.
    #[arg(long)]
    trace: bool,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        let dropped = cfg.encoder.dropped_genes();
        if dropped > 0 {
            eprintln!(
                "warning: {} genes do not split evenly into {} groups; the last {dropped} are dropped",
                cfg.encoder.genes, cfg.encoder.groups
            );
        }
        Ok(cfg)
    }
}

fn generate(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let manifest = experiment::generate(&cfg, &cfg.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let report = experiment::train_run(&cfg, c.checkpoint.as_deref())?;
    let log = &report.outcome.log;
    print!("{}", log.to_tsv());
    println!("best_epoch\t{}", report.outcome.best_epoch);
    if let Some(o) = report.oracle_test_cindex {
        println!("oracle_test_cindex\t{o}");
    }
    if c.trace {
        let cohort = &report.outcome.cohort;
        let first = cohort.split.test[0];
        let dir = cfg.out.join("trace");
        let files = experiment::dump_traces(
            &report.outcome.best,
            &cfg.encoder,
            &cohort.patients[first],
            cfg.mode,
            &dir,
        )?;
        eprintln!("wrote {} attention matrices to {}", files.len(), dir.display());
    }
    Ok(())
}

fn checkpoint_path(c: &Common) -> Result<PathBuf> {
    if let Some(p) = &c.checkpoint {
        return Ok(p.clone());
    }
    let out = c.out.as_deref().unwrap_or_else(|| Path::new("run"));
    let p = out.join(CHECKPOINT);
    if !p.exists() {
        bail!("no checkpoint given and {} does not exist", p.display());
    }
    Ok(p)
}

fn evaluate(c: &Common) -> Result<()> {
    let path = checkpoint_path(c)?;
    let ck = Checkpoint::load(&path)?;
    let v = experiment::evaluate_checkpoint(&ck)?;
    println!("test_cindex\t{v}");
    Ok(())
}

fn ablate(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let rows = experiment::ablate(&cfg)?;
    let table = experiment::format_ablation(&rows);
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join(ABLATION_TABLE);
    std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    std::fs::write(cfg.out.join(experiment::CONFIG_ECHO), cfg.echo())?;
    print!("{table}");
    Ok(())
}

fn gradcheck(c: &Common) -> Result<bool> {
    let seed = c.seed.unwrap_or(0);
    let entries = experiment::gradcheck_suite(seed)?;
    print!("{}", experiment::format_gradcheck(&entries));
    Ok(entries.iter().all(|e| e.passes()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => generate(c).map(|_| true),
        Command::Train(c) => train(c).map(|_| true),
        Command::Evaluate(c) => evaluate(c).map(|_| true),
        Command::Ablate(c) => ablate(c).map(|_| true),
        Command::Gradcheck(c) => gradcheck(c),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
