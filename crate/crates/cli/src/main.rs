use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use poroflow_cli::config::{CaseId, LocationSel, ModeSel, RunConfig};
use poroflow_cli::pipeline;

#[derive(Parser)]
#[command(
    name = "poroflow",
    about = "Coupled free-flow / porous-medium solver with homogenized interface conditions",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Case1,
    Case2,
    Case3,
}

impl From<PresetArg> for CaseId {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Case1 => CaseId::Case1,
            PresetArg::Case2 => CaseId::Case2,
            PresetArg::Case3 => CaseId::Case3,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    New,
    Classical,
}

#[derive(Clone, Copy, ValueEnum)]
enum InterfaceArg {
    Sigma0,
    Sigmad,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; mutually exclusive with --preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in benchmark configuration.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stripe half-height in unit cells (overrides the configuration).
    #[arg(long)]
    stripe_l: Option<usize>,
    /// Slip coefficient for the classical condition (overrides the configuration).
    #[arg(long)]
    alpha: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), None) => RunConfig::load(path)?,
            (None, Some(preset)) => RunConfig::preset(preset.into()),
            (None, None) => anyhow::bail!("pass either --config <path> or --preset <case>"),
            (Some(_), Some(_)) => unreachable!("clap rejects this combination"),
        };
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(l) = self.stripe_l {
            cfg.discretization.stripe_half_height = l;
        }
        if let Some(alpha) = self.alpha {
            cfg.interface.alpha = alpha;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the unit-cell and interface-stripe problems; write effective_params.json.
    EffectiveParams(ConfigArgs),
    /// Solve the coupled macroscale model with the selected interface condition.
    RunMacro {
        #[command(flatten)]
        common: ConfigArgs,
        /// Interface condition: the homogenized set or the classical one.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Interface placement for the classical condition.
        #[arg(long, value_enum)]
        interface: Option<InterfaceArg>,
    },
    /// Solve the geometry-resolving reference problem (ensemble of layout shifts).
    RunDns {
        #[command(flatten)]
        common: ConfigArgs,
        /// Number of layout shifts (1 = single deterministic run).
        #[arg(long)]
        ensemble: Option<usize>,
    },
    /// Full comparison: effective params, three macro variants, ensemble reference, error tables.
    Validate(ConfigArgs),
    /// Re-render SVG charts from the CSV artifacts of an earlier run.
    Plot {
        /// Output directory of the earlier run.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn apply_thread_env() {
    if let Some(n) = std::env::var("POROFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::EffectiveParams(common) => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            pipeline::cmd_effective_params(&cfg)
        }
        Cmd::RunMacro {
            common,
            mode,
            interface,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(mode) = mode {
                cfg.interface.mode = match mode {
                    ModeArg::New => ModeSel::New,
                    ModeArg::Classical => ModeSel::Classical,
                };
            }
            if let Some(loc) = interface {
                cfg.interface.location = match loc {
                    InterfaceArg::Sigma0 => LocationSel::Sigma0,
                    InterfaceArg::Sigmad => LocationSel::Sigmad,
                };
            }
            cfg.validate()?;
            pipeline::cmd_run_macro(&cfg)
        }
        Cmd::RunDns { common, ensemble } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = ensemble {
                cfg.ensemble_members = n;
            }
            cfg.validate()?;
            pipeline::cmd_run_dns(&cfg, cfg.ensemble_members)
        }
        Cmd::Validate(common) => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            pipeline::cmd_validate(&cfg)
        }
        Cmd::Plot { out } => {
            let n = pipeline::cmd_plot(&out)?;
            println!("rendered {n} chart(s) under {}", out.join("plots").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    apply_thread_env();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
