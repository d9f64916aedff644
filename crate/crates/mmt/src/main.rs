use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmt::commands::{self, GradcheckOptions, TrainOptions};
use mmt::config::ExperimentConfig;
use mmt::grid;
use mmt::mmt_core::RunVariant;
use mmt::pipeline::Corpus;
use mmt::{Error, Result};

/// Multimodal translation with language-conditioned visual features.
#[derive(Parser)]
#[command(name = "mmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus split with images.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Split name (file prefix).
        #[arg(long, default_value = "train")]
        name: String,
    },
    /// Train one variant on DATA/train.* with dev evaluation on DATA/dev.*.
    Train {
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run stored in OUT.
        #[arg(long)]
        resume: bool,
        /// Override the configured step budget.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Translate one sentence per line of INPUT.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        input: PathBuf,
        /// Image index file, one image per input line.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Comma-separated variants; all when omitted.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Check at most this many scalars per parameter.
        #[arg(long)]
        per_param: Option<usize>,
        #[arg(long, hide = true)]
        inject_sign_flip: Option<String>,
    },
    /// Corpus BLEU of candidate lines against reference lines.
    Score {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Train several variants over several seeds and print mean ± sd.
    Grid {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variants; all when omitted.
        #[arg(long)]
        variants: Option<String>,
        /// Comma-separated seeds (at least two).
        #[arg(long, default_value = "1,2")]
        seeds: String,
    },
}

fn variants(list: Option<&str>) -> Result<Vec<RunVariant>> {
    match list {
        None => Ok(RunVariant::ALL.to_vec()),
        Some(s) => s.split(',').map(|v| RunVariant::parse(v.trim()).map_err(|e| Error::Usage(e.to_string()))).collect(),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { n, seed, out, name } => {
            commands::synth(n, seed, &out, &name)?;
            println!("wrote {n} examples to {}", out.display());
        }
        Command::Train { variant, config, data, out, resume, steps } => {
            let s = commands::train(&TrainOptions { variant, config, data, out, resume, max_steps: steps })?;
            let o = &s.outcome;
            let amb = o.best.ambiguous_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
            println!(
                "{}: {} steps{}, best dev BLEU {:.4} at step {}, ambiguous accuracy {amb}",
                s.variant.name(),
                o.steps,
                if o.stopped_early { " (early stop)" } else { "" },
                o.best.bleu,
                o.best_step
            );
        }
        Command::Translate { checkpoint, beam, input, images } => {
            for line in commands::translate(&checkpoint, beam, &input, images.as_deref())? {
                println!("{line}");
            }
        }
        Command::Gradcheck { config, eps, variant, tolerance, per_param, inject_sign_flip } => {
            let o = GradcheckOptions {
                config,
                eps,
                variants: variants(variant.as_deref())?,
                per_param,
                inject: inject_sign_flip,
                ..Default::default()
            };
            let mut ok = true;
            for (v, r) in commands::gradcheck(&o)? {
                let pass = r.passes(tolerance);
                ok &= pass;
                println!(
                    "{:<36} {:>6} scalars  max rel err {:.3e}  {}{}",
                    v.name(),
                    r.checked(),
                    r.max_rel_err,
                    if pass { "ok" } else { "FAIL" },
                    r.worst_param.map(|p| format!("  (worst: {p})")).unwrap_or_default()
                );
            }
            return Ok(ok);
        }
        Command::Score { candidates, references } => {
            println!("{}", commands::score(&candidates, &references)?);
        }
        Command::Grid { config, data, variants: list, seeds } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::from_file(&p)?,
                None => ExperimentConfig::default(),
            };
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Usage(format!("bad seed '{s}'"))))
                .collect::<Result<_>>()?;
            let train = Corpus::load(&data, "train")?;
            let dev = Corpus::load(&data, "dev")?;
            let runs = grid::run_grid(&cfg, &variants(list.as_deref())?, &seeds, &train, &dev, grid::threads_from_env())?;
            print!("{}", grid::format_table(&grid::summarize(&runs)?));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
