//! Run lifecycle: train, snapshot, sweep, render.
//!
//! A run directory holds `config.toml`, `metrics.jsonl`, `checkpoints/`,
//! `grids/` and `images/` (one file per snapshot step, zero-padded), the
//! final `grid.mugrid` with its rendering, and `summary.json`. Report and
//! oracle runs write `report.json` or the grid directly.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use moral_core::approx::Checkpoint;
use moral_core::envs::{bandit_of, Environment, Gridworld};
use moral_core::mec::mec_config;
use moral_core::nash_voting::{budget_scaling_demo, forced_affine_votes, NashTrainer};
use moral_core::oracle::{
    boundary_oracle, cycling_mdp, exact_q, exact_sigma, variance_fixed_point, FixedPoint, OracleMethod, Policy,
};
use moral_core::sweep::{default_axes, render, run_sweep, snapshot_schedule, BoundaryGrid, GridDiff, GridMeta, Palette};
use moral_core::variance_voting::{vote, Bootstrap, SarsaTrainer};
use moral_core::{Choice, Execution, TheorySpec};

use crate::config::{Algorithm, EnvKind, OracleKind, ReportKind, RunConfig};

pub const OUT_ENV: &str = "MORAL_RL_OUT";

/// `explicit`, else the config's directory, else `$MORAL_RL_OUT/<name>`
/// (default root `runs`).
pub fn run_dir(config: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &config.out_dir {
        return p.clone();
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&config.name)
}

fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Mec => "mec",
        Algorithm::VarianceSarsa => "variance_sarsa",
        Algorithm::Nash => "nash",
        Algorithm::Oracle => "oracle",
        Algorithm::Report => "report",
    }
}

fn meta(config: &RunConfig, step: u64) -> GridMeta {
    GridMeta {
        algorithm: algorithm_name(config.algorithm).into(),
        variant: config.variant.clone(),
        step,
        seed: match config.algorithm {
            Algorithm::Nash => config.nash.seed,
            _ => config.sarsa.seed,
        },
    }
}

enum Learner<'a, E: Environment> {
    Sarsa(SarsaTrainer<'a, E>),
    Nash(NashTrainer<'a, E>),
}

struct Session<'a, E: Environment> {
    env: &'a E,
    config: &'a RunConfig,
    theories: Vec<TheorySpec>,
    learner: Learner<'a, E>,
    exec: Execution,
}

impl<'a, E: Environment> Session<'a, E> {
    fn new(env: &'a E, config: &'a RunConfig, exec: Execution) -> Result<Self> {
        let theories = config.theory_specs()?;
        let learner = match config.algorithm {
            Algorithm::VarianceSarsa => {
                Learner::Sarsa(SarsaTrainer::new(env, theories.clone(), config.sarsa.clone(), exec)?)
            }
            Algorithm::Mec => Learner::Sarsa(SarsaTrainer::new(
                env,
                theories.clone(),
                mec_config(config.sarsa.clone(), config.mec_bootstrap),
                exec,
            )?),
            Algorithm::Nash => {
                let (pool, roles) = config.nash_pool()?;
                let mut nash = config.nash.clone();
                nash.eval_roles = roles;
                Learner::Nash(NashTrainer::new(env, pool, nash, exec)?)
            }
            other => bail!("{} runs do not train", algorithm_name(other)),
        };
        Ok(Session {
            env,
            config,
            theories,
            learner,
            exec,
        })
    }

    fn step(&self) -> u64 {
        match &self.learner {
            Learner::Sarsa(t) => t.step(),
            Learner::Nash(t) => t.step(),
        }
    }

    fn total_steps(&self) -> u64 {
        match self.config.algorithm {
            Algorithm::Nash => self.config.nash.total_steps,
            _ => self.config.sarsa.total_steps,
        }
    }

    fn advance(&mut self, to: u64, metrics: &mut impl Write) -> Result<()> {
        let every = self.config.metrics_every;
        let mut n = 0u64;
        let mut failed = None;
        let mut emit = |v: &dyn erased::Line| {
            n += 1;
            if n % every == 0 {
                if let Err(e) = writeln!(metrics, "{}", v.line()) {
                    failed.get_or_insert(e);
                }
            }
        };
        match &mut self.learner {
            Learner::Sarsa(t) => t.train_until(to, |s| emit(s))?,
            Learner::Nash(t) => t.train_until(to, |s| emit(s))?,
        }
        match failed {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut c = match &self.learner {
            Learner::Sarsa(t) => t.checkpoint(),
            Learner::Nash(t) => t.checkpoint(),
        };
        c.meta = algorithm_name(self.config.algorithm).into();
        c
    }

    fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        match &mut self.learner {
            Learner::Sarsa(t) => t.restore(c)?,
            Learner::Nash(t) => t.restore(c)?,
        }
        Ok(())
    }

    fn sweep(&self) -> Result<BoundaryGrid> {
        let (c, x) = default_axes(self.config.grid.credence_cells, self.config.grid.x_cells);
        let m = meta(self.config, self.step());
        let g = match &self.learner {
            Learner::Sarsa(t) => run_sweep(self.env, &t.agent(), &self.theories, c, x, m, self.exec)?,
            Learner::Nash(t) => run_sweep(self.env, &t.agent(), &self.theories, c, x, m, self.exec)?,
        };
        Ok(g)
    }
}

mod erased {
    use serde::Serialize;

    /// A metrics record that renders as one JSON line.
    pub trait Line {
        fn line(&self) -> String;
    }

    impl<T: Serialize> Line for T {
        fn line(&self) -> String {
            serde_json::to_string(self).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub name: String,
    pub algorithm: String,
    pub variant: String,
    pub step: u64,
    pub fractions: Vec<(String, f64)>,
}

fn summarize(config: &RunConfig, grid: &BoundaryGrid) -> Summary {
    Summary {
        name: config.name.clone(),
        algorithm: algorithm_name(config.algorithm).into(),
        variant: config.variant.clone(),
        step: grid.meta.step,
        fractions: Choice::ALL
            .iter()
            .filter(|&&c| grid.count(c) > 0)
            .map(|&c| (c.label().to_string(), grid.fraction(c)))
            .collect(),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    Ok(())
}

fn emit_grid(dir: &Path, stem: &str, grid: &BoundaryGrid) -> Result<()> {
    grid.save(&dir.join(format!("{stem}.mugrid")))?;
    render(grid, &Palette::default(), &dir.join(stem))?;
    Ok(())
}

fn snapshot_name(step: u64) -> String {
    format!("step-{step:010}")
}

fn prepare(config: &RunConfig, dir: &Path) -> Result<()> {
    if let Err(errs) = config.validate() {
        bail!("invalid config:\n  {}", errs.join("\n  "));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(())
}

/// Starts a run in `dir`. Returns the final grid for sweeping runs.
pub fn run(config: &RunConfig, dir: &Path, exec: Execution) -> Result<Option<BoundaryGrid>> {
    prepare(config, dir)?;
    match config.algorithm {
        Algorithm::Report => {
            write_json(&dir.join("report.json"), &report(config.report.expect("validated"))?)?;
            Ok(None)
        }
        Algorithm::Oracle => {
            let grid = oracle_grid(config, exec)?;
            emit_grid(dir, "grid", &grid)?;
            write_json(&dir.join("summary.json"), &summarize(config, &grid))?;
            Ok(Some(grid))
        }
        _ => with_env(config, |env| env.train(config, dir, exec, None)),
    }
}

/// Continues a training run from its latest checkpoint.
pub fn resume(dir: &Path, exec: Execution) -> Result<Option<BoundaryGrid>> {
    let config = RunConfig::load(&dir.join("config.toml"))?;
    let ck = Checkpoint::load(&dir.join("checkpoints").join("latest.ckpt"))
        .with_context(|| format!("no checkpoint to resume in {}", dir.display()))?;
    with_env(&config, |env| env.train(&config, dir, exec, Some(&ck)))
}

/// Sweeps the checkpoint at `checkpoint` (latest by default) of the run in `dir`.
pub fn sweep(dir: &Path, checkpoint: Option<&Path>, out: &Path, exec: Execution) -> Result<BoundaryGrid> {
    let config = RunConfig::load(&dir.join("config.toml"))?;
    let grid = match config.algorithm {
        Algorithm::Oracle => oracle_grid(&config, exec)?,
        Algorithm::Report => bail!("report runs have no grid"),
        _ => {
            let path = checkpoint
                .map(Path::to_path_buf)
                .unwrap_or_else(|| dir.join("checkpoints").join("latest.ckpt"));
            let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            with_env(&config, |env| env.sweep_checkpoint(&config, &ck, exec))?
        }
    };
    grid.save(out)?;
    render(&grid, &Palette::default(), &out.with_extension(""))?;
    Ok(grid)
}

fn with_env<R>(config: &RunConfig, f: impl FnOnce(&dyn AnyEnv) -> Result<R>) -> Result<R> {
    let v = config.variant()?;
    match config.env {
        EnvKind::Bandit => f(&Wrapped(&bandit_of(v))),
        EnvKind::Grid => f(&Wrapped(&Gridworld::new(v))),
    }
}

/// Object-safe facade so one closure serves every environment type.
trait AnyEnv {
    fn train(&self, config: &RunConfig, dir: &Path, exec: Execution, ck: Option<&Checkpoint>) -> Result<Option<BoundaryGrid>>;
    fn sweep_checkpoint(&self, config: &RunConfig, ck: &Checkpoint, exec: Execution) -> Result<BoundaryGrid>;
}

struct Wrapped<'e, E>(&'e E);

impl<E: Environment> AnyEnv for Wrapped<'_, E> {
    fn train(&self, config: &RunConfig, dir: &Path, exec: Execution, ck: Option<&Checkpoint>) -> Result<Option<BoundaryGrid>> {
        train(self.0, config, dir, exec, ck)
    }

    fn sweep_checkpoint(&self, config: &RunConfig, ck: &Checkpoint, exec: Execution) -> Result<BoundaryGrid> {
        let mut s = Session::new(self.0, config, exec)?;
        s.restore(ck)?;
        s.sweep()
    }
}

fn train<E: Environment>(
    env: &E,
    config: &RunConfig,
    dir: &Path,
    exec: Execution,
    ck: Option<&Checkpoint>,
) -> Result<Option<BoundaryGrid>> {
    let mut s = Session::new(env, config, exec)?;
    if let Some(ck) = ck {
        s.restore(ck)?;
    }
    for sub in ["checkpoints", "grids", "images"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("metrics.jsonl"))?,
    );
    let mut last = None;
    for step in snapshot_schedule(s.total_steps(), config.snapshot_interval) {
        if step <= s.step() {
            continue;
        }
        s.advance(step, &mut metrics)?;
        metrics.flush()?;
        let name = snapshot_name(s.step());
        let ckpt = s.checkpoint();
        ckpt.save(&dir.join("checkpoints").join(format!("{name}.ckpt")))?;
        ckpt.save(&dir.join("checkpoints").join("latest.ckpt"))?;
        let grid = s.sweep()?;
        grid.save(&dir.join("grids").join(format!("{name}.mugrid")))?;
        render(&grid, &Palette::default(), &dir.join("images").join(&name))?;
        writeln!(
            metrics,
            "{}",
            json!({ "snapshot": s.step(), "fractions": summarize(config, &grid).fractions })
        )?;
        last = Some(grid);
    }
    metrics.flush()?;
    if let Some(g) = &last {
        emit_grid(dir, "grid", g)?;
        write_json(&dir.join("summary.json"), &summarize(config, g))?;
    }
    Ok(last)
}

pub fn oracle_grid(config: &RunConfig, exec: Execution) -> Result<BoundaryGrid> {
    let v = config.variant()?;
    let bandit = bandit_of(v);
    let theories = config.theory_specs()?;
    let method = match config.oracle.method {
        OracleKind::Variance => OracleMethod::Variance {
            bootstrap: config.oracle.bootstrap,
            eps: config.oracle.eps,
        },
        OracleKind::NashOneShot => OracleMethod::NashOneShot { cost: config.oracle.cost },
        OracleKind::Mec => OracleMethod::Mec,
    };
    let (c, x) = default_axes(config.grid.credence_cells, config.grid.x_cells);
    Ok(boundary_oracle(&bandit, &theories, c, x, method, meta(config, 0), exec)?)
}

/// `q[theory][state]` regrouped as `[state][theory]` for `states`.
fn rows_at(q: &[Vec<Vec<f64>>], states: &[usize]) -> Vec<Vec<Vec<f64>>> {
    states.iter().map(|&s| q.iter().map(|t| t[s].clone()).collect()).collect()
}

pub fn report(kind: ReportKind) -> Result<serde_json::Value> {
    Ok(match kind {
        ReportKind::Cycling => {
            let mdp = cycling_mdp();
            let p = Policy::deterministic(&mdp, &[0, 0, 0]);
            let s2 = exact_sigma(&mdp, &p, Bootstrap::Sarsa);
            let q = exact_q(&mdp, &p);
            let v = vote(&rows_at(&q, &[0])[0], &s2, &[0.5, 0.5], 0.0);
            let fp = variance_fixed_point(&mdp, &[0.5, 0.5], 0.0, Bootstrap::Sarsa, vec![0, 0, 0], 16);
            let period = match &fp {
                FixedPoint::Cycle { policies, .. } => policies.len(),
                _ => 1,
            };
            json!({
                "sigma2_under_a0": s2,
                "total_votes_at_s0": v.total,
                "chosen_at_s0": v.chosen.0,
                "fixed_point": fp,
                "cycle_period": period,
            })
        }
        ReportKind::BudgetScaling => serde_json::to_value(budget_scaling_demo())?,
        ReportKind::ForcedVotes => {
            let mdp = cycling_mdp();
            let p = Policy::deterministic(&mdp, &[0, 0, 0]);
            let q = exact_q(&mdp, &p);
            let f = forced_affine_votes(&rows_at(&q, &[0, 1]));
            serde_json::to_value(f)?
        }
    })
}

#[derive(Debug, Serialize)]
pub struct DiffReport {
    pub fraction: f64,
    pub changed: usize,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Serialize)]
pub struct Transition {
    pub from: &'static str,
    pub to: &'static str,
    pub count: usize,
}

impl From<GridDiff> for DiffReport {
    fn from(d: GridDiff) -> Self {
        DiffReport {
            fraction: d.fraction,
            changed: d.changed,
            transitions: d
                .transitions
                .iter()
                .map(|(&(a, b), &count)| Transition {
                    from: a.label(),
                    to: b.label(),
                    count,
                })
                .collect(),
        }
    }
}
