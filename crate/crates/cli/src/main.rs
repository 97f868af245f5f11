use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oral3d::commands;
use oral3d::config::SplitRatio;
use oral3d::error::{Error, Result};
use oral3d::pipeline::{metrics_table, run_all};
use oral3d::PipelineConfig;
use oral3d_core::metrics::SsimConfig;

/// Panoramic X-ray to 3D dental reconstruction at desk scale.
#[derive(Debug, Parser)]
#[command(name = "oral3d", version)]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate phantom volumes and their generating curves.
    Phantom {
        /// Number of phantoms; defaults to dataset.phantoms.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Shuffle files into train/val/test manifests.
    Split {
        files: Vec<String>,
        #[arg(long, default_value = "3:1:1")]
        ratio: String,
    },
    /// Synthesize a paired sample from a volume.
    Synth { volume: PathBuf },
    /// Flatten a volume along a curve (fitted from the volume if omitted).
    Flatten {
        volume: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Embed a flattened volume along a curve.
    Deform {
        flat: PathBuf,
        #[arg(long)]
        curve: PathBuf,
    },
    /// Train on a directory of synthesized pairs.
    Train {
        dataset: PathBuf,
        /// JSON list restricting the pairs used.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare backward gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        graphs: usize,
    },
    /// Curved reconstruction from a panoramic image.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        px: PathBuf,
        #[arg(long)]
        curve: PathBuf,
    },
    /// Score volume `a` against volume `b`.
    Eval {
        a: PathBuf,
        b: PathBuf,
        /// Dice threshold; defaults to metrics.tau, else -0.8.
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
    },
    /// Flatten and re-embed a volume, checking the band PSNR.
    Roundtrip { volume: PathBuf },
    /// Run the whole pipeline into one experiment directory.
    RunAll,
}

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn config(&self) -> Result<PipelineConfig> {
        let path = self.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
        PipelineConfig::load(path, self.seed, self.out.as_deref())
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn note(msg: &str) {
    let _ = writeln!(std::io::stderr(), "{msg}");
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { config: cli.config, seed: cli.seed, out: cli.out };
    match cli.command {
        Command::Phantom { n } => {
            let cfg = ctx.config()?;
            for p in commands::phantoms(&cfg, n.unwrap_or(cfg.dataset.phantoms), ctx.out()?)? {
                println!("{}", p.display());
            }
        }
        Command::Split { files, ratio } => {
            let ratio: SplitRatio = ratio.parse()?;
            let seed = match (ctx.seed, &ctx.config) {
                (Some(s), _) => s,
                (None, Some(_)) => ctx.config()?.split_seed(),
                (None, None) => return Err(Error::Config("split needs --seed or --config".into())),
            };
            let parts = commands::split_files(&files, ratio, seed, ctx.out()?)?;
            println!("train {} / val {} / test {}", parts[0].len(), parts[1].len(), parts[2].len());
        }
        Command::Synth { volume } => {
            let pair = commands::synth(&ctx.config()?.synth, &volume, ctx.out()?)?;
            println!("fit residual {:.4}", pair.fit_residual);
        }
        Command::Flatten { volume, curve } => {
            let f = commands::flatten_volume(&ctx.config()?.synth, &volume, curve.as_deref(), ctx.out()?)?;
            println!("flattened {:?}", f.dims());
        }
        Command::Deform { flat, curve } => {
            let v = commands::deform(&ctx.config()?.deform, &flat, &curve, ctx.out()?)?;
            println!("curved {:?}", v.dims());
        }
        Command::Train { dataset, manifest } => {
            let cfg = ctx.config()?;
            let epochs = cfg.train.epochs;
            let outcome = commands::train(&cfg, &dataset, manifest.as_deref(), ctx.out()?, |r| {
                note(&format!("epoch {}/{epochs}: loss_r {:.5} total {:.5}", r.epoch + 1, r.loss_r, r.total))
            })?;
            print_json(outcome.history.last().expect("epochs >= 1"))?;
        }
        Command::Gradcheck { graphs } => {
            let seed = ctx.seed.unwrap_or(0);
            let report = commands::gradcheck(graphs, seed)?;
            print_json(&report)?;
            println!("max relative error {:.3e}", report.worst());
            commands::gradcheck_verdict(&report)?;
        }
        Command::Reconstruct { model, px, curve } => {
            let v = commands::reconstruct(&ctx.config()?, &model, &px, &curve, ctx.out()?)?;
            println!("reconstructed {:?}", v.dims());
        }
        Command::Eval { a, b, tau } => {
            let (cfg_tau, ssim) = match &ctx.config {
                Some(_) => {
                    let m = ctx.config()?.metrics;
                    (m.tau, m.ssim)
                }
                None => (-0.8, SsimConfig::default()),
            };
            let report = commands::eval(&a, &b, tau.unwrap_or(cfg_tau), &ssim)?;
            print_json(&report)?;
            print!("{}", report.table());
        }
        Command::Roundtrip { volume } => {
            let report = commands::roundtrip(&ctx.config()?, &volume)?;
            if !report.checked {
                note(&format!(
                    "warning: min curvature radius {:.2} does not exceed {:.2}; normals may cross, PSNR check skipped",
                    report.min_curvature_radius, report.fold_free_radius
                ));
            }
            print_json(&report)?;
            report.verdict()?;
        }
        Command::RunAll => {
            let cfg = ctx.config()?;
            let summary = run_all(&cfg, &mut |m: &str| note(m))?;
            print!("{}", metrics_table(&summary.metrics));
            println!("wrote {}", summary.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version are successes; usage errors are validation errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            note(&format!("error: {e}"));
            ExitCode::from(e.exit_code())
        }
    }
}
