use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use lxfuse::degrade::{DegradationKind, Severity};
use lxfuse::harness::FusionMode;
use lxfuse_cli::{
    cmd_ablate, cmd_annotate, cmd_bench, cmd_degrade, cmd_eval, cmd_gradcheck, cmd_train, AugmentChoice, CliError,
    RunConfig,
};

#[derive(Parser)]
#[command(
    name = "lxfuse",
    version,
    about = "Localized RGB/IR token fusion: training, evaluation and tooling"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Augment {
    On,
    Off,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt and loss.csv.
    Train,
    /// Evaluate a checkpoint under all 13 conditions; writes eval.csv.
    Eval {
        /// Defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate several fusion modes with one seed; writes ablation.csv.
    Ablate {
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "dualvision,add,adaptive,concat,rgb_only,ir_only"
        )]
        modes: Vec<FusionMode>,
        #[arg(long, value_enum, default_value = "on")]
        augment: Augment,
    },
    /// Degrade a PPM/PGM image.
    Degrade {
        input: PathBuf,
        #[arg(long)]
        kind: DegradationKind,
        #[arg(long)]
        severity: Severity,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Parameter and FLOP accounting; writes bench.csv.
    Bench,
    /// Finite-difference check of the fusion stack; writes gradcheck.csv.
    Gradcheck {
        /// Corrupt the analytic gradient of this parameter.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Caption refinement over the images listed in a JSONL manifest.
    Annotate { manifest: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    let log = !cli.quiet;
    match cli.command {
        Command::Train => {
            let out = cmd_train(&cfg, log)?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("loss       {}", out.loss_csv.display());
            if let Some(l) = out.trace.final_loss() {
                println!("final loss {l:.6}");
            }
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join("model.ckpt"));
            let (report, path) = cmd_eval(&cfg, &ckpt)?;
            for row in &report.rows {
                println!("{:<18} {:.4}", row.condition.to_string(), row.accuracy());
            }
            println!("report {}", path.display());
        }
        Command::Ablate { modes, augment } => {
            let augment = match augment {
                Augment::On => AugmentChoice::On,
                Augment::Off => AugmentChoice::Off,
                Augment::Both => AugmentChoice::Both,
            };
            let (results, path) = cmd_ablate(&cfg, &modes, augment, log)?;
            for (mode, aug, report) in &results {
                let highest: Vec<String> = DegradationKind::ALL
                    .iter()
                    .map(|&k| format!("{k} {:.3}", report.curve(k)[4]))
                    .collect();
                println!(
                    "{mode:<10} augment {:<3} clean {:.3} | highest: {}",
                    if *aug { "on" } else { "off" },
                    report.clean().unwrap_or(0.0),
                    highest.join(", ")
                );
            }
            println!("report {}", path.display());
        }
        Command::Degrade {
            input,
            kind,
            severity,
            output,
        } => {
            cmd_degrade(&input, kind, severity, &output, cfg.train.fog_gray)?;
            println!("wrote {}", output.display());
        }
        Command::Bench => {
            let (csv, _) = cmd_bench(&cfg)?;
            print!("{csv}");
        }
        Command::Gradcheck { inject_fault } => {
            let out = cmd_gradcheck(&cfg, inject_fault.as_deref())?;
            print!("{}", out.csv);
            if !out.failing.is_empty() {
                return Err(CliError::Verification(format!(
                    "gradient check failed for {}",
                    out.failing.join(", ")
                )));
            }
        }
        Command::Annotate { manifest } => {
            let out = cmd_annotate(&cfg, &manifest)?;
            println!("{} image(s)", out.images);
            println!("records {}", out.records.display());
            println!("finals  {}", out.finals.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
