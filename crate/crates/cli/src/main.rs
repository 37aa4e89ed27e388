use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use moral_cli::config::RunConfig;
use moral_cli::presets::{list_presets, preset};
use moral_cli::runner::{self, DiffReport};
use moral_core::sweep::{diff_grids, render, BoundaryGrid, Palette};
use moral_core::Execution;

#[derive(Parser)]
#[command(name = "moralrl", version, about = "Train and sweep agents acting under moral uncertainty")]
struct Cli {
    /// Disable the thread pool.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a run from a preset or a config file.
    Run {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set sarsa.total_steps=1000`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Run directory (default `$MORAL_RL_OUT/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue a run from its latest checkpoint.
    Resume { dir: PathBuf },
    /// Sweep a checkpoint into a decision-boundary grid.
    Sweep {
        dir: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a grid file as a PPM image with a legend.
    Render {
        grid: PathBuf,
        /// Output stem (default: the grid path without extension).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two grids cell by cell; prints JSON.
    Diff { a: PathBuf, b: PathBuf },
    /// List presets, or print one as TOML.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

fn load_config(preset_name: Option<&str>, config: Option<&PathBuf>, sets: &[String]) -> Result<RunConfig> {
    let base = match (preset_name, config) {
        (Some(p), _) => preset(p)?,
        (None, Some(path)) => RunConfig::load(path)?,
        (None, None) => bail!("run needs --preset or --config"),
    };
    base.with_overrides(sets)
}

fn report_grid(grid: &BoundaryGrid) {
    let (r, c) = grid.dims();
    println!("grid {r}x{c} at step {}", grid.meta.step);
    for choice in moral_core::Choice::ALL {
        let n = grid.count(choice);
        if n > 0 {
            println!("  {:<14} {:6.2}%", choice.label(), 100.0 * grid.fraction(choice));
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let exec = Execution::single_thread(cli.single_thread);
    match cli.command {
        Command::Run {
            preset,
            config,
            sets,
            out,
        } => {
            let cfg = load_config(preset.as_deref(), config.as_ref(), &sets)?;
            let dir = runner::run_dir(&cfg, out.as_deref());
            let grid = runner::run(&cfg, &dir, exec)?;
            println!("run directory {}", dir.display());
            if let Some(g) = grid {
                report_grid(&g);
            }
        }
        Command::Resume { dir } => {
            if let Some(g) = runner::resume(&dir, exec)? {
                report_grid(&g);
            }
        }
        Command::Sweep { dir, checkpoint, out } => {
            let out = out.unwrap_or_else(|| dir.join("sweep.mugrid"));
            let g = runner::sweep(&dir, checkpoint.as_deref(), &out, exec)?;
            println!("wrote {}", out.display());
            report_grid(&g);
        }
        Command::Render { grid, out } => {
            let g = BoundaryGrid::load(&grid).with_context(|| format!("loading {}", grid.display()))?;
            let stem = out.unwrap_or_else(|| grid.with_extension(""));
            render(&g, &Palette::default(), &stem)?;
            println!("wrote {}", stem.with_extension("ppm").display());
        }
        Command::Diff { a, b } => {
            let ga = BoundaryGrid::load(&a).with_context(|| format!("loading {}", a.display()))?;
            let gb = BoundaryGrid::load(&b).with_context(|| format!("loading {}", b.display()))?;
            let d = DiffReport::from(diff_grids(&ga, &gb)?);
            println!("{}", serde_json::to_string_pretty(&d)?);
        }
        Command::Presets { show } => match show {
            Some(name) => print!("{}", preset(&name)?.to_toml()),
            None => {
                for p in list_presets() {
                    println!("{:<22} {:<40} {} ({})", p.name, p.figure, p.summary, p.scale);
                }
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
