//! Exact answers on tiny acyclic MDPs and bandit abstractions.
//!
//! Everything here is computed by enumeration: policy evaluation by
//! backward induction, visit counts by forward propagation, and the
//! variance-voting policy by alternating between σ² and the voted policy.
//! The stakes X of a bandit are folded into the state space by replicating
//! the decision tree at composite Gauss–Legendre nodes on [1, 10].

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::envs::{Bandit, Choice, Environment, X_MAX, X_MIN};
use crate::exec::Execution;
use crate::nash_voting::{one_shot_equilibrium, CostFn};
use crate::sweep::{BoundaryGrid, GridMeta, SweepError};
use crate::theories::{CredenceVector, Outcome, TheoryError, TheorySpec};
use crate::variance_voting::{argmax, state_variance, vote, Bootstrap};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("method needs a single-decision bandit")]
    NotSingleDecision,
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpAction {
    pub label: String,
    /// Worthiness of taking this action, one entry per theory.
    pub worth: Vec<f64>,
    /// Events carried over from the environment, used to label outcomes.
    pub events: Vec<Outcome>,
    /// `None` ends the episode.
    pub next: Option<usize>,
}

impl MdpAction {
    pub fn new(label: &str, worth: Vec<f64>, next: Option<usize>) -> Self {
        MdpAction {
            label: label.to_string(),
            worth,
            events: Vec::new(),
            next,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpState {
    pub name: String,
    pub actions: Vec<MdpAction>,
}

/// Deterministic, acyclic MDP with per-theory worthiness.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyMdp {
    num_theories: usize,
    gammas: Vec<f64>,
    states: Vec<MdpState>,
    initial: Vec<(usize, f64)>,
    /// Successors before predecessors.
    order: Vec<usize>,
}

/// Per theory, per state, per action.
pub type QTable = Vec<Vec<Vec<f64>>>;

/// Action probabilities per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy(pub Vec<Vec<f64>>);

impl Policy {
    pub fn deterministic(mdp: &TinyMdp, actions: &[usize]) -> Self {
        Policy(
            mdp.states
                .iter()
                .zip(actions)
                .map(|(s, &a)| (0..s.actions.len()).map(|j| if j == a { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }
}

impl TinyMdp {
    pub fn new(
        num_theories: usize,
        states: Vec<MdpState>,
        initial: Vec<(usize, f64)>,
    ) -> Result<Self, OracleError> {
        let bad = |m: String| Err(OracleError::InvalidMdp(m));
        for (i, s) in states.iter().enumerate() {
            if s.actions.is_empty() {
                return bad(format!("state {i} has no actions"));
            }
            for a in &s.actions {
                if a.worth.len() != num_theories {
                    return bad(format!("state {i} action {} has {} worths", a.label, a.worth.len()));
                }
                if a.next.is_some_and(|n| n >= states.len()) {
                    return bad(format!("state {i} action {} leaves the MDP", a.label));
                }
            }
        }
        if initial.is_empty() || initial.iter().any(|&(s, w)| s >= states.len() || w < 0.0) {
            return bad("bad initial distribution".into());
        }
        // Depth-first post-order gives successors first; a grey node is a cycle.
        let mut mark = vec![0u8; states.len()];
        let mut order = Vec::with_capacity(states.len());
        fn visit(i: usize, states: &[MdpState], mark: &mut [u8], order: &mut Vec<usize>) -> bool {
            match mark[i] {
                1 => return false,
                2 => return true,
                _ => {}
            }
            mark[i] = 1;
            for n in states[i].actions.iter().filter_map(|a| a.next) {
                if !visit(n, states, mark, order) {
                    return false;
                }
            }
            mark[i] = 2;
            order.push(i);
            true
        }
        for i in 0..states.len() {
            if !visit(i, &states, &mut mark, &mut order) {
                return bad("transition graph has a cycle".into());
            }
        }
        Ok(TinyMdp {
            num_theories,
            gammas: vec![1.0; num_theories],
            states,
            initial,
            order,
        })
    }

    pub fn with_gammas(mut self, gammas: Vec<f64>) -> Self {
        assert_eq!(gammas.len(), self.num_theories);
        self.gammas = gammas;
        self
    }

    pub fn num_theories(&self) -> usize {
        self.num_theories
    }

    pub fn states(&self) -> &[MdpState] {
        &self.states
    }

    pub fn initial(&self) -> &[(usize, f64)] {
        &self.initial
    }

    fn zero_table(&self) -> QTable {
        (0..self.num_theories)
            .map(|_| self.states.iter().map(|s| vec![0.0; s.actions.len()]).collect())
            .collect()
    }
}

/// Q_i^π for every theory by backward induction.
pub fn exact_q(mdp: &TinyMdp, policy: &Policy) -> QTable {
    let mut q = mdp.zero_table();
    let mut v = vec![vec![0.0; mdp.states.len()]; mdp.num_theories];
    for &s in &mdp.order {
        for i in 0..mdp.num_theories {
            for (a, act) in mdp.states[s].actions.iter().enumerate() {
                let cont = act.next.map_or(0.0, |n| v[i][n]);
                q[i][s][a] = act.worth[i] + mdp.gammas[i] * cont;
            }
            v[i][s] = q[i][s].iter().zip(&policy.0[s]).map(|(x, p)| x * p).sum();
        }
    }
    q
}

/// Every theory's own optimal Q (the fixed point of max-bootstrapping).
pub fn exact_q_max(mdp: &TinyMdp) -> QTable {
    let mut q = mdp.zero_table();
    let mut v = vec![vec![0.0; mdp.states.len()]; mdp.num_theories];
    for &s in &mdp.order {
        for i in 0..mdp.num_theories {
            for (a, act) in mdp.states[s].actions.iter().enumerate() {
                q[i][s][a] = act.worth[i] + mdp.gammas[i] * act.next.map_or(0.0, |n| v[i][n]);
            }
            v[i][s] = q[i][s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    q
}

pub fn q_for(mdp: &TinyMdp, policy: &Policy, bootstrap: Bootstrap) -> QTable {
    match bootstrap {
        Bootstrap::Sarsa => exact_q(mdp, policy),
        Bootstrap::MaxQ => exact_q_max(mdp),
    }
}

/// Expected visits per episode to every state.
pub fn visit_distribution(mdp: &TinyMdp, policy: &Policy) -> Vec<f64> {
    let mut d = vec![0.0; mdp.states.len()];
    for &(s, w) in &mdp.initial {
        d[s] += w;
    }
    for &s in mdp.order.iter().rev() {
        let mass = d[s];
        if mass == 0.0 {
            continue;
        }
        for (act, p) in mdp.states[s].actions.iter().zip(&policy.0[s]) {
            if let Some(n) = act.next {
                d[n] += mass * p;
            }
        }
    }
    d
}

/// Visit-weighted mean over states of the per-state action variance.
pub fn sigma_from(q: &QTable, visits: &[f64]) -> Vec<f64> {
    let total: f64 = visits.iter().sum();
    q.iter()
        .map(|rows| {
            rows.iter()
                .zip(visits)
                .filter(|(_, &w)| w > 0.0)
                .map(|(r, w)| w * state_variance(r))
                .sum::<f64>()
                / total
        })
        .collect()
}

pub fn exact_sigma(mdp: &TinyMdp, policy: &Policy, bootstrap: Bootstrap) -> Vec<f64> {
    sigma_from(&q_for(mdp, policy, bootstrap), &visit_distribution(mdp, policy))
}

/// Greedy variance-voting policy for fixed σ². With SARSA bootstrapping
/// the downstream Q values follow the policy being built.
pub fn vote_policy(
    mdp: &TinyMdp,
    sigma2: &[f64],
    credences: &[f64],
    eps: f64,
    bootstrap: Bootstrap,
) -> Vec<usize> {
    let n = mdp.num_theories;
    let mut actions = vec![0; mdp.states.len()];
    let qmax = matches!(bootstrap, Bootstrap::MaxQ).then(|| exact_q_max(mdp));
    let mut v = vec![vec![0.0; mdp.states.len()]; n];
    for &s in &mdp.order {
        let rows: Vec<Vec<f64>> = match &qmax {
            Some(q) => (0..n).map(|i| q[i][s].clone()).collect(),
            None => (0..n)
                .map(|i| {
                    mdp.states[s]
                        .actions
                        .iter()
                        .map(|a| a.worth[i] + mdp.gammas[i] * a.next.map_or(0.0, |nx| v[i][nx]))
                        .collect()
                })
                .collect(),
        };
        let a = vote(&rows, sigma2, credences, eps).chosen.0;
        actions[s] = a;
        for i in 0..n {
            v[i][s] = rows[i][a];
        }
    }
    actions
}

/// Optimal policy for the credence-weighted scalar reward.
pub fn mec_policy(mdp: &TinyMdp, credences: &[f64]) -> Vec<usize> {
    let mut actions = vec![0; mdp.states.len()];
    let mut v = vec![0.0; mdp.states.len()];
    let gamma = mdp.gammas.first().copied().unwrap_or(1.0);
    for &s in &mdp.order {
        let row: Vec<f64> = mdp.states[s]
            .actions
            .iter()
            .map(|a| {
                let r: f64 = a.worth.iter().zip(credences).map(|(w, c)| w * c).sum();
                r + gamma * a.next.map_or(0.0, |n| v[n])
            })
            .collect();
        let a = argmax(&row);
        actions[s] = a;
        v[s] = row[a];
    }
    actions
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum FixedPoint {
    Converged { actions: Vec<usize>, sigma2: Vec<f64>, iterations: usize },
    /// The policies visited in one period of the cycle, in order.
    Cycle { policies: Vec<Vec<usize>>, sigma2: Vec<Vec<f64>> },
    /// No repeat within the iteration budget.
    Capped { actions: Vec<usize>, sigma2: Vec<f64> },
}

impl FixedPoint {
    /// A representative deterministic policy and its σ².
    pub fn representative(&self) -> (&[usize], &[f64]) {
        match self {
            FixedPoint::Converged { actions, sigma2, .. } | FixedPoint::Capped { actions, sigma2 } => {
                (actions, sigma2)
            }
            FixedPoint::Cycle { policies, sigma2 } => (&policies[0], &sigma2[0]),
        }
    }
}

/// Alternates policy → σ² → voted policy until a policy repeats.
pub fn variance_fixed_point(
    mdp: &TinyMdp,
    credences: &[f64],
    eps: f64,
    bootstrap: Bootstrap,
    start: Vec<usize>,
    max_iters: usize,
) -> FixedPoint {
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut history: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    let mut current = start;
    for it in 0..max_iters.max(1) {
        if let Some(&first) = seen.get(&current) {
            let period: Vec<_> = history[first..].to_vec();
            return if period.len() == 1 {
                let (actions, sigma2) = period.into_iter().next().unwrap();
                FixedPoint::Converged { actions, sigma2, iterations: it }
            } else {
                let (policies, sigma2) = period.into_iter().unzip();
                FixedPoint::Cycle { policies, sigma2 }
            };
        }
        let policy = Policy::deterministic(mdp, &current);
        let s2 = exact_sigma(mdp, &policy, bootstrap);
        seen.insert(current.clone(), history.len());
        let next = vote_policy(mdp, &s2, credences, eps, bootstrap);
        history.push((current, s2));
        current = next;
    }
    let (actions, sigma2) = history.pop().unwrap();
    FixedPoint::Capped { actions, sigma2 }
}

/// Grid label realised by following `actions` from `root`.
pub fn realised_choice(mdp: &TinyMdp, actions: &[usize], root: usize) -> Option<Choice> {
    let mut s = root;
    let mut lied = false;
    loop {
        let act = &mdp.states[s].actions[actions[s]];
        lied |= act.events.contains(&Outcome::Lie);
        if let Some(&o) = act.events.iter().find(|e| e.resolves()) {
            return Some(Choice::from_resolution(o, lied));
        }
        s = act.next?;
    }
}

/// The non-convergent two-theory example: from s₀, a₀ leads to s₁ and a₁
/// to s₂; both are free. At s₁ the two actions are worth (0, 100) and
/// (−4, 80); at s₂ they are worth (100, 0) and (80, −4).
pub fn cycling_mdp() -> TinyMdp {
    let st = |name: &str, actions| MdpState {
        name: name.into(),
        actions,
    };
    TinyMdp::new(
        2,
        vec![
            st(
                "s0",
                vec![
                    MdpAction::new("a0", vec![0.0, 0.0], Some(1)),
                    MdpAction::new("a1", vec![0.0, 0.0], Some(2)),
                ],
            ),
            st(
                "s1",
                vec![
                    MdpAction::new("a0", vec![0.0, 100.0], None),
                    MdpAction::new("a1", vec![-4.0, 80.0], None),
                ],
            ),
            st(
                "s2",
                vec![
                    MdpAction::new("a0", vec![100.0, 0.0], None),
                    MdpAction::new("a1", vec![80.0, -4.0], None),
                ],
            ),
        ],
        vec![(0, 1.0)],
    )
    .expect("valid example")
}

/// Composite Gauss–Legendre nodes and probability weights for X ~ U(1, 10).
pub fn x_quadrature(panels: usize) -> Vec<(f64, f64)> {
    const NODES: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let panels = panels.max(1);
    let h = (X_MAX - X_MIN) / panels as f64;
    let mut out = Vec::with_capacity(panels * 5);
    for p in 0..panels {
        let mid = X_MIN + h * (p as f64 + 0.5);
        for (n, w) in NODES.iter().zip(WEIGHTS) {
            out.push((mid + n * h / 2.0, w / 2.0 / panels as f64));
        }
    }
    out
}

/// Replicates the bandit's decision tree once per `(x, weight)` pair.
/// The root of copy `j` is state `j * bandit.nodes().len()`.
pub fn bandit_mdp(
    bandit: &Bandit,
    theories: &[TheorySpec],
    xs: &[(f64, f64)],
) -> Result<TinyMdp, OracleError> {
    let nodes = bandit.nodes();
    let mut states = Vec::with_capacity(nodes.len() * xs.len());
    let mut initial = Vec::with_capacity(xs.len());
    for (j, &(x, w)) in xs.iter().enumerate() {
        let base = j * nodes.len();
        initial.push((base, w));
        for (k, node) in nodes.iter().enumerate() {
            let mut actions = Vec::with_capacity(node.edges.len());
            for (a, e) in node.edges.iter().enumerate() {
                let mut events = e.events.clone();
                events.extend(e.resolution);
                let worth = theories
                    .iter()
                    .map(|t| t.evaluate(&events, x))
                    .collect::<Result<Vec<_>, _>>()?;
                actions.push(MdpAction {
                    label: format!("a{a}"),
                    worth,
                    events,
                    next: if e.resolution.is_some() { None } else { e.next.map(|n| base + n) },
                });
            }
            states.push(MdpState {
                name: format!("x{x:.4}/n{k}"),
                actions,
            });
        }
    }
    let gammas = theories.iter().map(|t| t.gamma).collect();
    Ok(TinyMdp::new(theories.len(), states, initial)?.with_gammas(gammas))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum OracleMethod {
    Variance { bootstrap: Bootstrap, eps: f64 },
    NashOneShot { cost: CostFn },
    Mec,
}

/// σ² per credence column, from the variance fixed point on the
/// X-replicated bandit.
pub fn column_sigma2(
    bandit: &Bandit,
    theories: &[TheorySpec],
    credences: &CredenceVector,
    bootstrap: Bootstrap,
    eps: f64,
) -> Result<FixedPoint, OracleError> {
    let mdp = bandit_mdp(bandit, theories, &x_quadrature(64))?;
    let start = vec![0; mdp.states().len()];
    Ok(variance_fixed_point(&mdp, credences.values(), eps, bootstrap, start, 64))
}

/// Exact label per cell of a credence × X grid.
pub fn boundary_oracle(
    bandit: &Bandit,
    theories: &[TheorySpec],
    credence_axis: Vec<f64>,
    x_axis: Vec<f64>,
    method: OracleMethod,
    meta: GridMeta,
    exec: Execution,
) -> Result<BoundaryGrid, OracleError> {
    if matches!(method, OracleMethod::NashOneShot { .. }) && bandit.nodes().len() != 1 {
        return Err(OracleError::NotSingleDecision);
    }
    let quad = bandit_mdp(bandit, theories, &x_quadrature(64))?;
    let cells_per_x: Vec<(f64, f64)> = x_axis.iter().map(|&x| (x, 1.0)).collect();
    let cell_mdp = bandit_mdp(bandit, theories, &cells_per_x)?;
    let width = bandit.nodes().len();
    let columns = exec.map_indexed(credence_axis.len(), |col| {
        let c = CredenceVector::pair(credence_axis[col])?;
        let actions = match method {
            OracleMethod::Variance { bootstrap, eps } => {
                let start = vec![0; quad.states().len()];
                let fp = variance_fixed_point(&quad, c.values(), eps, bootstrap, start, 64);
                let (_, s2) = fp.representative();
                vote_policy(&cell_mdp, s2, c.values(), eps, bootstrap)
            }
            OracleMethod::Mec => mec_policy(&cell_mdp, c.values()),
            OracleMethod::NashOneShot { cost } => {
                let budget = (bandit.horizon() * bandit.num_actions()) as f64;
                (0..x_axis.len())
                    .map(|row| {
                        let s = &cell_mdp.states()[row * width];
                        let rows: Vec<Vec<f64>> = (0..theories.len())
                            .map(|i| s.actions.iter().map(|a| a.worth[i]).collect())
                            .collect();
                        one_shot_equilibrium(&rows, c.values(), cost, budget).0
                    })
                    .collect()
            }
        };
        let labels: Vec<Choice> = (0..x_axis.len())
            .map(|row| match method {
                OracleMethod::NashOneShot { .. } => {
                    let act = &cell_mdp.states()[row * width].actions[actions[row]];
                    realised_choice_of(act)
                }
                _ => realised_choice(&cell_mdp, &actions, row * width).unwrap_or(Choice::Nothing),
            })
            .collect();
        Ok::<_, OracleError>(labels)
    });
    let columns = columns.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut grid = BoundaryGrid::new(credence_axis, x_axis, meta);
    for (col, labels) in columns.iter().enumerate() {
        for (row, &l) in labels.iter().enumerate() {
            grid.set(row, col, l);
        }
    }
    Ok(grid)
}

fn realised_choice_of(act: &MdpAction) -> Choice {
    let lied = act.events.contains(&Outcome::Lie);
    act.events
        .iter()
        .find(|e| e.resolves())
        .map_or(Choice::Nothing, |&o| Choice::from_resolution(o, lied))
}
