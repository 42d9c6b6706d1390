use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pdisvae_cli::config::{parse_config, RawConfig};
use pdisvae_cli::lab::{run_estlab, xor_demo, LabConfig};
use pdisvae_cli::sweep::{run_sweep, Axis, SweepSpec, SWEEP_FILE};
use pdisvae_cli::{run_eval, run_training};
use pdisvae_core::datagen::{generate, write_bundle};
use pdisvae_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pdisvae", version, about = "Partially disentangled VAE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct RunFlags {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// vae, ica, btcvae or pdisvae.
    #[arg(long)]
    model: Option<String>,
    #[arg(long = "latent-dim")]
    latent_dim: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// mws, mss, is or full.
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generator id (groupwise, independent, pdsprites) or a gen-data directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
    /// Train for the full 5000 epochs unless --epochs is given.
    #[arg(long)]
    full: bool,
}

impl RunFlags {
    fn raw(&self) -> RawConfig {
        RawConfig {
            model: self.model.clone(),
            latent_dim: self.latent_dim,
            groups: self.groups,
            beta: self.beta,
            estimator: self.estimator.clone(),
            dataset: self.dataset.clone(),
            data_seed: self.data_seed,
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            seed: self.seed,
            layers: None,
            out: self.out.clone(),
            full: self.full.then_some(true),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to a directory.
    GenData {
        #[arg(long, default_value = "groupwise")]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and evaluate it.
    Train(RunFlags),
    /// Re-evaluate a trained run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Train over one axis of values and aggregate metrics.
    Sweep {
        /// Sweep recipe file (axis, values, [base]).
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values for --axis.
        #[arg(long)]
        values: Option<String>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Compare the batch estimators of the aggregated posterior.
    Estlab {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 1000)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "estlab")]
        out: PathBuf,
    },
    /// Print the exact mutual informations of the XOR table.
    XorDemo,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { dataset, seed, out } => {
            let bundle = generate(&dataset, seed)?;
            write_bundle(&bundle, &out)?;
            println!("wrote {} samples of {dataset} to {}", bundle.n(), out.display());
        }
        Command::Train(flags) => {
            let cfg = parse_config(flags.config.as_deref(), flags.raw())?;
            let art = run_training(&cfg)?;
            let report = pdisvae_cli::read_metrics(&art.dir)?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
            println!("artifacts in {}", art.dir.display());
        }
        Command::Eval { run } => {
            let report = run_eval(&run, None)?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
        }
        Command::Sweep { recipe, axis, values, flags } => {
            let mut spec = match &recipe {
                Some(p) => SweepSpec::from_file(p)?,
                None => {
                    let axis = Axis::parse(axis.as_deref().ok_or_else(|| Error::Config("--axis or --recipe required".into()))?)?;
                    SweepSpec { axis, values: vec![], base: RawConfig::default() }
                }
            };
            if let Some(a) = &axis {
                spec.axis = Axis::parse(a)?;
            }
            if let Some(list) = &values {
                spec.values = SweepSpec::values_from_list(spec.axis, list)?;
            }
            if let Some(c) = &flags.config {
                spec.base = RawConfig::from_file(c)?.merged(spec.base);
            }
            let out = flags.out.clone().unwrap_or_else(|| PathBuf::from(format!("sweeps/{}", spec.axis.name())));
            spec.base = spec.base.merged(RawConfig { out: None, ..flags.raw() });
            if spec.base.dataset.is_none() {
                spec.base.dataset = Some("groupwise".into());
            }
            let rows = run_sweep(&spec, &out)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!("{} points, {failed} failed; {}", rows.len(), out.join(SWEEP_FILE).display());
        }
        Command::Estlab { n, m, repeats, seed, out } => {
            let res = run_estlab(&LabConfig { n, m, repeats, seed }, &out)?;
            for r in &res.analytic {
                println!(
                    "N={:<5} M={:<4} Var[IS]={} Var[MSS]={} diff={}",
                    r.n, r.m, r.var_is, r.var_mss, r.var_diff
                );
            }
            println!("reports in {}", out.display());
        }
        Command::XorDemo => {
            for (name, v) in xor_demo() {
                println!("{name} = {v:.12} nats");
            }
            println!("ln 2 = {:.12}", 2f64.ln());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
