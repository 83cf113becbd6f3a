use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdr::experiment::{self, Overrides, Preset, VerifyHooks};
use gdr::Error;

#[derive(Parser)]
#[command(name = "gdr", version, about = "Gradient diversity rating for NN ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train grad-regularized and baseline ensembles (plus recombinations).
    Train(Common),
    /// Rate ensembles; all under <out>/ensembles unless directories are given.
    Gdr {
        #[command(flatten)]
        common: Common,
        ensembles: Vec<PathBuf>,
    },
    /// Attack sweep over ensembles; all under <out>/ensembles by default.
    Attack {
        #[command(flatten)]
        common: Common,
        ensembles: Vec<PathBuf>,
    },
    /// Fast oracle self-check; needs no data or network.
    Verify,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "NAME", value_parser = ["paper-mnist", "paper-fashion", "desk"])]
    preset: Option<String>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_attack: Option<u64>,
}

impl Common {
    fn resolve(&self) -> gdr::Result<experiment::ExperimentConfig> {
        let preset = self.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        let overrides = Overrides {
            out: self.out.clone(),
            seed_data: self.seed_data,
            seed_init: self.seed_init,
            seed_attack: self.seed_attack,
        };
        experiment::resolve_config(preset, self.config.as_deref(), &overrides)
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> gdr::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> gdr::Result<bool> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let r = experiment::cmd_train(&cfg)?;
            for e in &r.ensembles {
                println!("{}\t{}\t{}", e.name, e.kind, e.dir.display());
            }
        }
        Command::Gdr { common, ensembles } => {
            let cfg = common.resolve()?;
            let s = experiment::cmd_gdr(&cfg, &ensembles)?;
            for e in &s.ensembles {
                println!("{}\tgdr={:.4}\tmass<0.05={:.3}", e.name, e.gdr, e.mass_below_0_05);
            }
        }
        Command::Attack { common, ensembles } => {
            let cfg = common.resolve()?;
            let s = experiment::cmd_attack(&cfg, &ensembles)?;
            print_json(&s.fits)?;
        }
        Command::Verify => {
            let r = experiment::cmd_verify(&VerifyHooks::default());
            print!("{}", r.table());
            return Ok(r.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ Error::Config(_)) => {
            eprintln!("gdr: invalid config: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("gdr: {e}");
            ExitCode::FAILURE
        }
    }
}
