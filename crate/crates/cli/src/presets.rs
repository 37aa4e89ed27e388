//! Reproduction presets at desk scale.
//!
//! Desk scale runs the bandit abstraction with 8 actors, a 60×60 grid and
//! 200k–1M steps instead of 32 actors, 300×300 cells and 10M steps on the
//! gridworld. Switch any preset to the gridworld with `--set env=grid`.

use anyhow::{bail, Result};
use serde::Serialize;

use moral_core::nash_voting::{CostFn, NashMode};
use moral_core::variance_voting::Bootstrap;

use crate::config::{Algorithm, OracleKind, Rescale, ReportKind, RunConfig};

#[derive(Debug, Clone, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub figure: &'static str,
    pub summary: &'static str,
    /// Steps relative to the full protocol.
    pub scale: &'static str,
}

const CATALOG: &[Preset] = &[
    Preset { name: "fig2b-desk", figure: "Fig. 2(b)", summary: "Nash voting, classic trolley", scale: "500k of 10M steps" },
    Preset { name: "fig2c-desk", figure: "Fig. 2(c)", summary: "Nash voting, two classic problems per episode", scale: "1M of 10M steps" },
    Preset { name: "fig2d-desk", figure: "Fig. 2(d)", summary: "Variance-SARSA, classic trolley", scale: "500k of 10M steps" },
    Preset { name: "fig3b-desk", figure: "Fig. 3(b)", summary: "Nash voting, double trolley", scale: "1M of 10M steps" },
    Preset { name: "fig3c-desk", figure: "Fig. 3(c)", summary: "Nash voting with unknown adversary, double trolley", scale: "1M of 10M steps" },
    Preset { name: "fig3d-desk", figure: "Fig. 3(d)", summary: "Variance-SARSA, double trolley", scale: "500k of 10M steps" },
    Preset { name: "fig4b-desk", figure: "Fig. 4(b)", summary: "Variance-SARSA, classic trolley without the doomsday button", scale: "500k of 10M steps" },
    Preset { name: "fig4c-desk", figure: "Fig. 4(c)", summary: "Variance-SARSA, doomsday trolley", scale: "500k of 10M steps" },
    Preset { name: "fig4d-desk", figure: "Fig. 4(d)", summary: "Nash voting, doomsday trolley", scale: "500k of 10M steps" },
    Preset { name: "mec-scale-1", figure: "Fig. S-MEC(a)", summary: "MEC, classic trolley, deontology at unit scale", scale: "200k of 10M steps" },
    Preset { name: "mec-scale-10", figure: "Fig. S-MEC(b)", summary: "MEC, classic trolley, deontology scaled by 10", scale: "200k of 10M steps" },
    Preset { name: "variance-scale-10", figure: "Fig. S-MEC(c)", summary: "Variance-SARSA, classic trolley, deontology scaled by 10", scale: "500k of 10M steps" },
    Preset { name: "guard-qlearning", figure: "Fig. S-guard(a)", summary: "Variance voting on per-theory Q-learning, guard trolley", scale: "500k of 10M steps" },
    Preset { name: "guard-sarsa", figure: "Fig. S-guard(b)", summary: "Variance-SARSA, guard trolley", scale: "500k of 10M steps" },
    Preset { name: "guard-nash", figure: "Fig. S-guard(c)", summary: "Nash voting, guard trolley", scale: "1M of 10M steps" },
    Preset { name: "cycling", figure: "Fig. S-cycle", summary: "Exact variance voting on the non-convergent MDP", scale: "exact" },
    Preset { name: "budget-scaling", figure: "Worked example, budget vs vote scaling", summary: "Quadratic-cost shares under theory splitting", scale: "exact" },
    Preset { name: "forced-votes", figure: "Worked example, Nash to variance votes", summary: "Budget-exhausting affine votes equal variance votes", scale: "exact" },
    Preset { name: "quadratic-fig2b", figure: "Fig. S-quadratic, classic", summary: "Nash voting with quadratic cost, classic trolley", scale: "500k of 10M steps" },
    Preset { name: "quadratic-fig2c", figure: "Fig. S-quadratic, iterated classic", summary: "Nash voting with quadratic cost, two classic problems", scale: "1M of 10M steps" },
    Preset { name: "quadratic-fig3b", figure: "Fig. S-quadratic, double", summary: "Nash voting with quadratic cost, double trolley", scale: "1M of 10M steps" },
    Preset { name: "quadratic-fig3c", figure: "Fig. S-quadratic, unknown adversary", summary: "Nash voting with quadratic cost and unknown adversary", scale: "1M of 10M steps" },
    Preset { name: "oracle-classic", figure: "Fig. 2(d) reference", summary: "Exact variance-voting boundary, classic bandit", scale: "exact" },
    Preset { name: "oracle-double", figure: "Fig. 3(d) reference", summary: "Exact variance-voting boundary, double bandit", scale: "exact" },
    Preset { name: "oracle-doomsday", figure: "Fig. 4(c) reference", summary: "Exact variance-voting boundary, doomsday bandit", scale: "exact" },
    Preset { name: "oracle-nash-classic", figure: "Fig. 2(b) reference", summary: "Analytic one-shot Nash boundary, classic bandit", scale: "exact" },
];

pub fn list_presets() -> &'static [Preset] {
    CATALOG
}

fn base(name: &str, algorithm: Algorithm, variant: &str) -> RunConfig {
    let mut c = RunConfig {
        name: name.into(),
        algorithm,
        variant: variant.into(),
        ..Default::default()
    };
    c.sarsa.total_steps = 500_000;
    c.nash.total_steps = 1_000_000;
    c
}

fn deont_times_ten() -> Vec<Rescale> {
    vec![Rescale {
        theory: "deont".into(),
        scale: 10.0,
        shift: 0.0,
    }]
}

pub fn preset(name: &str) -> Result<RunConfig> {
    use Algorithm::*;
    let mut c = match name {
        "fig2b-desk" | "quadratic-fig2b" => base(name, Nash, "classic"),
        "fig2c-desk" | "quadratic-fig2c" => base(name, Nash, "classic-iterated"),
        "fig2d-desk" | "fig4b-desk" => base(name, VarianceSarsa, "classic"),
        "fig3b-desk" | "quadratic-fig3b" => base(name, Nash, "double"),
        "fig3c-desk" | "quadratic-fig3c" => {
            let mut c = base(name, Nash, "double");
            c.nash.mode = NashMode::UnknownAdversary;
            c
        }
        "fig3d-desk" => base(name, VarianceSarsa, "double"),
        "fig4c-desk" => base(name, VarianceSarsa, "doomsday"),
        "fig4d-desk" => base(name, Nash, "doomsday"),
        "mec-scale-1" | "mec-scale-10" => {
            let mut c = base(name, Mec, "classic");
            c.sarsa.total_steps = 200_000;
            c
        }
        "variance-scale-10" => base(name, VarianceSarsa, "classic"),
        "guard-qlearning" => {
            let mut c = base(name, VarianceSarsa, "guard");
            c.sarsa.bootstrap = Bootstrap::MaxQ;
            c
        }
        "guard-sarsa" => base(name, VarianceSarsa, "guard"),
        "guard-nash" => base(name, Nash, "guard"),
        "cycling" | "budget-scaling" | "forced-votes" => {
            let mut c = base(name, Report, "classic");
            c.report = Some(match name {
                "cycling" => ReportKind::Cycling,
                "budget-scaling" => ReportKind::BudgetScaling,
                _ => ReportKind::ForcedVotes,
            });
            c
        }
        "oracle-classic" => base(name, Oracle, "classic"),
        "oracle-double" => base(name, Oracle, "double"),
        "oracle-doomsday" => base(name, Oracle, "doomsday"),
        "oracle-nash-classic" => {
            let mut c = base(name, Oracle, "classic");
            c.oracle.method = OracleKind::NashOneShot;
            c
        }
        _ => {
            let names: Vec<&str> = CATALOG.iter().map(|p| p.name).collect();
            bail!("unknown preset {name:?}; valid presets: {}", names.join(", "))
        }
    };
    if matches!(name, "fig2b-desk" | "quadratic-fig2b" | "fig4d-desk") {
        c.nash.total_steps = 500_000;
    }
    if name.starts_with("quadratic-") {
        c.nash.cost = CostFn::Quadratic;
    }
    if name.ends_with("scale-10") {
        c.rescale = deont_times_ten();
    }
    c.snapshot_interval = c.sarsa.total_steps.max(c.nash.total_steps) / 5;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_is_complete_and_valid() {
        assert!(list_presets().len() >= 16);
        for p in list_presets() {
            assert!(!p.figure.is_empty());
            let c = preset(p.name).unwrap();
            assert_eq!(c.name, p.name);
            c.validate().unwrap_or_else(|e| panic!("{}: {e:?}", p.name));
        }
    }

    #[test]
    fn unknown_preset_lists_names() {
        let e = preset("fig9z").unwrap_err().to_string();
        assert!(e.contains("fig2d-desk") && e.contains("budget-scaling"));
    }
}
