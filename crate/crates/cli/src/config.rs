//! Run configuration: a TOML document plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use moral_core::envs::{Problem, Variant};
use moral_core::nash_voting::{CostFn, NashConfig, NashMode};
use moral_core::theories::{scale_theory, WorthinessTable};
use moral_core::variance_voting::{Bootstrap, SarsaConfig, VOTE_EPSILON};
use moral_core::TheorySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Mec,
    VarianceSarsa,
    Nash,
    Oracle,
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Bandit,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Cycling,
    BudgetScaling,
    ForcedVotes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Variance,
    NashOneShot,
    Mec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub method: OracleKind,
    pub bootstrap: Bootstrap,
    pub eps: f64,
    pub cost: CostFn,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            method: OracleKind::Variance,
            bootstrap: Bootstrap::Sarsa,
            eps: VOTE_EPSILON,
            cost: CostFn::Absolute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridDims {
    pub credence_cells: usize,
    pub x_cells: usize,
}

impl Default for GridDims {
    fn default() -> Self {
        GridDims {
            credence_cells: 60,
            x_cells: 60,
        }
    }
}

/// Affine change of units for one theory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rescale {
    pub theory: String,
    pub scale: f64,
    #[serde(default)]
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub variant: String,
    pub env: EnvKind,
    /// Theories by name, in credence order; the first is the sweep axis.
    pub theories: Vec<String>,
    /// Custom worthiness table; the variant's built-in table otherwise.
    pub table: Option<PathBuf>,
    pub rescale: Vec<Rescale>,
    pub report: Option<ReportKind>,
    /// Bootstrap target of the scalarized learner.
    pub mec_bootstrap: Bootstrap,
    pub snapshot_interval: u64,
    /// Metrics line every this many updates.
    pub metrics_every: u64,
    pub grid: GridDims,
    pub sarsa: SarsaConfig,
    pub nash: NashConfig,
    pub oracle: OracleConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            algorithm: Algorithm::VarianceSarsa,
            variant: "classic".into(),
            env: EnvKind::Bandit,
            theories: vec!["util".into(), "deont".into()],
            table: None,
            rescale: Vec::new(),
            report: None,
            mec_bootstrap: Bootstrap::Sarsa,
            snapshot_interval: 100_000,
            metrics_every: 100,
            grid: GridDims::default(),
            sarsa: SarsaConfig::default(),
            nash: NashConfig::default(),
            oracle: OracleConfig::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing run config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Applies `path.to.key=value` overrides. Values are parsed as TOML
    /// literals and fall back to plain strings.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self)?;
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("override {s:?} is not key=value"))?;
            let value = parse_literal(raw.trim());
            let mut node = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| anyhow!("{key}: {} is not a table", parts[..i].join(".")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        doc.try_into().context("applying overrides")
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse().map_err(|e| anyhow!("variant {:?}: {e}", self.variant))
    }

    pub fn worthiness_table(&self) -> Result<WorthinessTable> {
        match &self.table {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(WorthinessTable::from_toml(&text)?)
            }
            None => Ok(self.variant()?.problem.table()),
        }
    }

    /// The configured theories with rescalings applied.
    pub fn theory_specs(&self) -> Result<Vec<TheorySpec>> {
        let table = self.worthiness_table()?;
        let mut out = table.select(&self.theories)?;
        for r in &self.rescale {
            let idx = self
                .theories
                .iter()
                .position(|t| *t == r.theory)
                .ok_or_else(|| anyhow!("rescale names unknown theory {:?}", r.theory))?;
            out[idx] = scale_theory(&out[idx], r.scale, r.shift)?;
        }
        Ok(out)
    }

    /// Nash role pool: every theory of the table in unknown-adversary mode,
    /// the configured theories otherwise.
    pub fn nash_pool(&self) -> Result<(Vec<TheorySpec>, Vec<usize>)> {
        let chosen = self.theory_specs()?;
        if self.nash.mode != NashMode::UnknownAdversary {
            let roles = (0..chosen.len()).collect();
            return Ok((chosen, roles));
        }
        let table = self.worthiness_table()?;
        let pool = table.all_theories();
        let roles = self
            .theories
            .iter()
            .map(|n| table.theory_id(n))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((pool, roles))
    }

    /// Every problem found, in one pass.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut bad = Vec::new();
        let variant = match self.variant() {
            Ok(v) => Some(v),
            Err(e) => {
                bad.push(e.to_string());
                None
            }
        };
        match self.theory_specs() {
            Ok(t) if t.len() != 2 && self.algorithm != Algorithm::Report => {
                bad.push(format!("sweeps need exactly 2 theories, got {}", t.len()))
            }
            Ok(_) => {}
            Err(e) => bad.push(format!("theories: {e}")),
        }
        if self.grid.credence_cells == 0 || self.grid.x_cells == 0 {
            bad.push("grid dimensions must be positive".into());
        }
        if self.snapshot_interval == 0 {
            bad.push("snapshot_interval must be positive".into());
        }
        if self.metrics_every == 0 {
            bad.push("metrics_every must be positive".into());
        }
        match self.algorithm {
            Algorithm::Mec | Algorithm::VarianceSarsa => {
                if let Err(e) = self.sarsa.validate() {
                    bad.push(format!("sarsa: {e}"));
                }
            }
            Algorithm::Nash => match self.nash_pool() {
                Ok((pool, _)) => {
                    if let Err(e) = self.nash.validate(pool.len()) {
                        bad.push(format!("nash: {e}"));
                    }
                }
                Err(e) => bad.push(format!("nash: {e}")),
            },
            Algorithm::Oracle => {
                if self.env == EnvKind::Grid {
                    bad.push("the oracle works on bandit abstractions only".into());
                }
                if let Some(v) = variant {
                    if v.is_iterated() {
                        bad.push("the oracle handles single-problem variants only".into());
                    }
                    if self.oracle.method == OracleKind::NashOneShot && v.problem == Problem::Guard {
                        bad.push("the one-shot Nash oracle needs a single-decision bandit".into());
                    }
                }
            }
            Algorithm::Report => {
                if self.report.is_none() {
                    bad.push("algorithm = report needs report = cycling | budget_scaling | forced_votes".into());
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
