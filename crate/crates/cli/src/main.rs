use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use dsfad_cli::commands::{self, CaptionBackend, Stage, SweepParam};
use dsfad_core::encoder::Variant;
use dsfad_core::evaluator::{GalleryProtocol, SearchMode, Shots};

#[derive(Parser)]
#[command(name = "dsfad", version, about = "Visible-infrared re-identification with text-guided alignment and style decoupling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the dataset, caption, training and evaluation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives exactly one manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    Generate(Common),
    /// Caption every image of a generated dataset.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "deterministic", value_parser = ["deterministic", "external"])]
        backend: String,
        /// Program for the external backend, called as `<program> <args...> <image> <instruction>`.
        #[arg(long)]
        caption_command: Option<PathBuf>,
        #[arg(long = "caption-arg")]
        caption_args: Vec<String>,
    },
    /// Train one variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Caption corpus; required by every variant except the baseline.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Overrides `train.variant`.
        #[arg(long)]
        variant: Option<String>,
        /// Continue from the newest state under `<out>/checkpoints`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = ["all", "indoor"])]
        protocol: Option<String>,
        #[arg(long, value_parser = ["single", "multi"])]
        shots: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Evaluate all four search/shot protocols.
        #[arg(long, conflicts_with_all = ["protocol", "shots"])]
        all_protocols: bool,
        /// Also run the style probe.
        #[arg(long)]
        probe: bool,
        /// Write a rank-curve SVG.
        #[arg(long)]
        plot: bool,
    },
    /// Train and evaluate the cumulative variants with shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "baseline,+dsfa,+dsfa+smfd,+dsfa+smfd+scfr")]
        variants: Vec<String>,
        /// Training seeds; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// One training run per value of a loss hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["lambda1", "lambda2", "lambda3", "m"])]
        param: String,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long)]
        no_plot: bool,
    },
    /// Central-difference gradient audit on a two-image batch.
    Gradcheck(Common),
    /// generate, caption, train, eval and probe in sequence.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// First stage to run; earlier outputs must already exist.
        #[arg(long, default_value = "generate", value_parser = ["generate", "caption", "train", "eval", "probe"])]
        from: String,
    },
}

fn config(c: &Common) -> Result<dsfad_core::config::RunConfig> {
    commands::resolve_config(c.config.as_deref(), c.seed)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(c) => {
            commands::generate(&config(&c)?, &c.out)?;
        }
        Command::Caption {
            common,
            dataset,
            backend,
            caption_command,
            caption_args,
        } => {
            let backend = match (backend.as_str(), caption_command) {
                ("external", Some(program)) => CaptionBackend::External {
                    program,
                    args: caption_args,
                },
                ("external", None) => bail!("--backend external needs --caption-command"),
                _ => CaptionBackend::Deterministic,
            };
            commands::caption(&config(&common)?, &dataset, &backend, &common.out)?;
        }
        Command::Train {
            common,
            dataset,
            captions,
            variant,
            resume,
        } => {
            let mut cfg = config(&common)?;
            if let Some(v) = variant {
                cfg.train.variant = Variant::parse(&v)?;
            }
            commands::train(&cfg, &dataset, captions.as_deref(), &common.out, resume)?;
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            protocol,
            shots,
            repeats,
            all_protocols,
            probe,
            plot,
        } => {
            let mut cfg = config(&common)?;
            let p = &mut cfg.eval.protocol;
            if let Some(s) = protocol {
                p.search = s.parse::<SearchMode>()?;
            }
            if let Some(s) = shots {
                p.shots = s.parse::<Shots>()?;
            }
            if let Some(r) = repeats {
                p.repeats = r;
            }
            let protocols: Vec<GalleryProtocol> = if all_protocols { p.four().to_vec() } else { vec![*p] };
            let (_, reports) = commands::eval(&cfg, &checkpoint, &dataset, &protocols, probe, plot, &common.out)?;
            for r in reports {
                println!(
                    "{}: Rank-1 {:.2}% mAP {:.2}% (±{:.2})",
                    r.protocol.name(),
                    100.0 * r.rank[&1],
                    100.0 * r.map,
                    100.0 * r.map_std
                );
            }
        }
        Command::Ablate { common, variants, seeds } => {
            let cfg = config(&common)?;
            let variants = variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>, _>>()?;
            let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
            let report = commands::ablate(&cfg, &variants, &seeds, &common.out)?;
            print!("{}", report.markdown());
        }
        Command::Sweep {
            common,
            param,
            grid,
            no_plot,
        } => {
            let cfg = config(&common)?;
            let param: SweepParam = param.parse()?;
            let grid = if grid.is_empty() { param.default_grid() } else { grid };
            let report = commands::sweep(&cfg, param, &grid, !no_plot, &common.out)?;
            for r in report.rows {
                println!("{} = {}: Rank-1 {:.2}% mAP {:.2}%", param.name(), r.value, r.rank1, r.map);
            }
        }
        Command::Gradcheck(c) => {
            let report = commands::gradcheck(&config(&c)?, &c.out)?;
            println!("max relative error {:.3e} over {} coordinates", report.max_rel_error, report.entries.len());
            if !report.passed() {
                eprintln!("gradient audit failed for: {}", report.flagged().join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::Pipeline { common, from } => {
            let cfg = config(&common)?;
            commands::pipeline(&cfg, &common.out, from.parse::<Stage>()?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
