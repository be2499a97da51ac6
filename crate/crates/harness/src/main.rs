use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use layerdyn::diagnostics::BoundParams;
use layerdyn_harness::config::ExperimentConfig;
use layerdyn_harness::error::{HarnessError, Result};
use layerdyn_harness::presets::{
    preset_fig1, preset_fig2, preset_modes, Fig1Variant, DEFAULT_IMAGES, DEFAULT_LABELS,
    FIG2_DEFAULT_SUBSET,
};
use layerdyn_harness::runner::{parallel_map, run, run_bound, run_threads};
use layerdyn_harness::synth::write_synthetic_idx;
use layerdyn_harness::Kind;

/// Samples in the synthetic digit fixture; large enough for any default subset.
const SYNTHETIC_COUNT: usize = 5000;
const SYNTHETIC_SEED: u64 = 7;

#[derive(Parser)]
#[command(
    name = "layerdyn",
    version,
    about = "Layer-wise training dynamics experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reproduce a figure from its preset.
    Repro {
        #[command(subcommand)]
        figure: Figure,
    },
    /// Integrate the combined-strength bound at equality for one depth.
    Bound(BoundArgs),
    /// Print a preset config as JSON.
    Preset {
        #[arg(value_enum)]
        name: PresetName,
    },
    /// Compare measured mode strengths with the decoupled ODE.
    Modes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    Fig1TwoMatrix,
    Fig1FourMatrix,
    Fig1BoundSweep,
    Fig2,
    Modes,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    TwoMatrix,
    FourMatrix,
    BoundSweep,
    All,
}

#[derive(Subcommand)]
enum Figure {
    /// Linear-network norm growth and the bound sweep.
    Fig1 {
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        #[arg(long, default_value = "out/fig1")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// ReLU classifier growth discrepancy and mask agreement.
    Fig2 {
        #[arg(long, requires = "labels", conflicts_with = "synthetic")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        /// Use a generated 28×28 ten-class fixture instead of IDX files.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = FIG2_DEFAULT_SUBSET)]
        subset: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "out/fig2")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BoundArgs {
    /// Network depth.
    #[arg(long = "L", value_name = "L")]
    depth: usize,
    #[arg(long)]
    kappa1: f64,
    #[arg(long)]
    kappa2: f64,
    /// `M = (2κ₁ + 1)|Σ_yx|_F`.
    #[arg(long)]
    m: f64,
    #[arg(long)]
    u0: f64,
    #[arg(long, default_value_t = 1e-4)]
    dt: f64,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value = "out/bound")]
    out: PathBuf,
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    cli.or_else(|| cfg.output_dir.clone()).ok_or_else(|| {
        HarnessError::Config("no output directory: pass --out or set `output_dir`".into())
    })
}

fn report(dir: &std::path::Path) {
    println!("wrote {}", dir.display());
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let dir = out_dir(out, &cfg)?;
            report(&run(&cfg, &dir)?.dir);
        }
        Command::Modes { config, out } => {
            let cfg = load(&config, None)?;
            if cfg.kind != Kind::ModeCompare {
                return Err(HarnessError::Config(format!(
                    "`kind`: modes needs mode_compare, got {}",
                    cfg.kind.name()
                )));
            }
            let dir = out_dir(out, &cfg)?;
            report(&run(&cfg, &dir)?.dir);
        }
        Command::Preset { name } => {
            let cfg = match name {
                PresetName::Fig1TwoMatrix => preset_fig1(Fig1Variant::TwoMatrix),
                PresetName::Fig1FourMatrix => preset_fig1(Fig1Variant::FourMatrix),
                PresetName::Fig1BoundSweep => preset_fig1(Fig1Variant::BoundSweep),
                PresetName::Fig2 => preset_fig2(
                    FIG2_DEFAULT_SUBSET,
                    DEFAULT_IMAGES.into(),
                    DEFAULT_LABELS.into(),
                ),
                PresetName::Modes => preset_modes(),
            };
            println!("{}", cfg.to_json());
        }
        Command::Bound(a) => {
            let p = BoundParams::with_m(a.depth, a.kappa1, a.kappa2, a.m, a.u0);
            run_bound(&p, a.dt, a.steps, &a.out)?;
            report(&a.out);
        }
        Command::Repro { figure } => match figure {
            Figure::Fig1 { variant, out, seed } => {
                let variants: Vec<Fig1Variant> = match variant {
                    VariantArg::TwoMatrix => vec![Fig1Variant::TwoMatrix],
                    VariantArg::FourMatrix => vec![Fig1Variant::FourMatrix],
                    VariantArg::BoundSweep => vec![Fig1Variant::BoundSweep],
                    VariantArg::All => Fig1Variant::ALL.to_vec(),
                };
                let results = parallel_map(&variants, run_threads(), |v| {
                    let mut cfg = preset_fig1(*v);
                    if let Some(seed) = seed {
                        cfg.seed = seed;
                    }
                    run(&cfg, &out.join(v.name()))
                });
                for r in results {
                    report(&r?.dir);
                }
            }
            Figure::Fig2 {
                images,
                labels,
                synthetic,
                subset,
                steps,
                out,
            } => {
                let (images, labels) = match (images, labels) {
                    (Some(i), Some(l)) => (i, l),
                    _ if synthetic => write_synthetic_idx(
                        &out.join("data"),
                        SYNTHETIC_COUNT.max(subset),
                        SYNTHETIC_SEED,
                    )?,
                    _ => {
                        return Err(HarnessError::Config(
                            "fig2 needs --images and --labels, or --synthetic".into(),
                        ))
                    }
                };
                let mut cfg = preset_fig2(subset, images, labels);
                if let Some(steps) = steps {
                    cfg.flow.as_mut().expect("preset has flow").steps = steps;
                }
                report(&run(&cfg, &out)?.dir);
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
