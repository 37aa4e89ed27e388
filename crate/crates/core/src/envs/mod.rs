//! Deterministic trolley environments.
//!
//! [`Gridworld`] implements the four gridworld variants (classic, double,
//! guard, doomsday) and their iterated wrappers. [`Bandit`] collapses each
//! variant to its decision structure so that exact answers can be computed
//! by enumeration. Both implement [`Environment`].
//!
//! Within a step the agent moves first, then the trolley advances.

mod bandit;
mod grid;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::theories::{CredenceVector, Outcome, TheoryError, TheorySpec, WorthinessTable};

pub use bandit::{bandit_of, Bandit, BanditEdge, BanditNode, BanditState};
pub use grid::{sample_x, EnvState, Gridworld, Layout, Pos, Tile, GRID_ACTIONS};

/// Lower end of the stakes range.
pub const X_MIN: f64 = 1.0;
/// Upper end of the stakes range.
pub const X_MAX: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("cannot step a terminal state")]
    Terminal,
    #[error("action {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("unknown environment variant {0:?}")]
    UnknownVariant(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("trace output failed: {0}")]
    Trace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId(pub usize);

impl ActionId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The four trolley problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Classic,
    Double,
    Guard,
    Doomsday,
}

impl Problem {
    pub const ALL: [Problem; 4] = [
        Problem::Classic,
        Problem::Double,
        Problem::Guard,
        Problem::Doomsday,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Problem::Classic => "classic",
            Problem::Double => "double",
            Problem::Guard => "guard",
            Problem::Doomsday => "doomsday",
        }
    }

    /// The preference table paired with this problem.
    pub fn table(self) -> WorthinessTable {
        match self {
            Problem::Classic => crate::theories::classic_table(),
            Problem::Double => crate::theories::double_table(),
            Problem::Guard => crate::theories::guard_table(),
            Problem::Doomsday => crate::theories::doomsday_table(),
        }
    }

    /// Outcome labels a gridworld of this problem can produce.
    pub fn outcomes(self) -> &'static [Outcome] {
        use Outcome::*;
        match self {
            Problem::Classic => &[CrashIntoOne, CrashIntoX],
            Problem::Double => &[Push, CrashIntoTwo, CrashIntoX],
            Problem::Guard => &[Lie, Push, CrashIntoX],
            Problem::Doomsday => &[CrashIntoOne, CrashIntoX, Doomsday],
        }
    }

    /// Cell labels of a decision-boundary grid for this problem.
    pub fn choices(self) -> &'static [Choice] {
        use Choice::*;
        match self {
            Problem::Classic => &[Nothing, Switch],
            Problem::Double => &[Nothing, Switch, Push],
            Problem::Guard => &[Nothing, LieOnly, Push],
            Problem::Doomsday => &[Nothing, Switch, Doomsday],
        }
    }
}

impl FromStr for Problem {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Problem::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| EnvError::UnknownVariant(s.to_string()))
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A problem plus the number of trolley problems per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub problem: Problem,
    pub iterations: u32,
}

impl Variant {
    pub fn single(problem: Problem) -> Self {
        Variant {
            problem,
            iterations: 1,
        }
    }

    pub fn iterated(problem: Problem, iterations: u32) -> Self {
        Variant {
            problem,
            iterations,
        }
    }

    pub fn is_iterated(&self) -> bool {
        self.iterations > 1
    }
}

impl FromStr for Variant {
    type Err = EnvError;

    /// Accepts `classic`, `classic-iterated` (two problems) and
    /// `classic-iterated-3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, '-');
        let problem: Problem = parts.next().unwrap_or_default().parse()?;
        match (parts.next(), parts.next()) {
            (None, _) => Ok(Variant::single(problem)),
            (Some("iterated"), None) => Ok(Variant::iterated(problem, 2)),
            (Some("iterated"), Some(m)) => match m.parse::<u32>() {
                Ok(m) if m >= 1 => Ok(Variant::iterated(problem, m)),
                _ => Err(EnvError::UnknownVariant(s.to_string())),
            },
            _ => Err(EnvError::UnknownVariant(s.to_string())),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.iterations {
            1 => write!(f, "{}", self.problem),
            2 => write!(f, "{}-iterated", self.problem),
            m => write!(f, "{}-iterated-{m}", self.problem),
        }
    }
}

/// What happened in one trolley problem, as plotted in boundary grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Choice {
    Nothing,
    Switch,
    Push,
    LieOnly,
    Doomsday,
}

impl Choice {
    pub const ALL: [Choice; 5] = [
        Choice::Nothing,
        Choice::Switch,
        Choice::Push,
        Choice::LieOnly,
        Choice::Doomsday,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Choice::Nothing => "nothing",
            Choice::Switch => "switch",
            Choice::Push => "push",
            Choice::LieOnly => "lie-only",
            Choice::Doomsday => "doomsday",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Choice> {
        Choice::ALL.get(code as usize).copied()
    }

    /// Maps the resolving outcome of one problem to a grid label.
    pub fn from_resolution(outcome: Outcome, lied: bool) -> Choice {
        match outcome {
            Outcome::CrashIntoX if lied => Choice::LieOnly,
            Outcome::CrashIntoX => Choice::Nothing,
            Outcome::CrashIntoOne | Outcome::CrashIntoTwo => Choice::Switch,
            Outcome::Push => Choice::Push,
            Outcome::Doomsday => Choice::Doomsday,
            Outcome::Lie => Choice::LieOnly,
        }
    }
}

impl FromStr for Choice {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Choice::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| EnvError::UnknownVariant(s.to_string()))
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One environment step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transition<S> {
    pub state: S,
    pub action: ActionId,
    pub next_state: S,
    /// Worthiness-bearing events of this step (a lie, a resolution).
    pub events: Vec<Outcome>,
    /// The resolving outcome, when this step ends a trolley problem.
    pub outcome: Option<Outcome>,
    pub choice: Option<Choice>,
    /// Stakes of the problem the events belong to.
    pub x_people: f64,
    pub done: bool,
}

impl<S> Transition<S> {
    /// Worthiness of this step under `theory`.
    pub fn worthiness(&self, theory: &TheorySpec) -> Result<f64, TheoryError> {
        theory.evaluate(&self.events, self.x_people)
    }
}

/// Table value of the transition's events for one theory; zero for moves.
pub fn worthiness_of<S>(
    transition: &Transition<S>,
    table: &WorthinessTable,
    theory_id: usize,
) -> Result<f64, TheoryError> {
    transition
        .events
        .iter()
        .map(|&e| table.lookup(theory_id, e, transition.x_people))
        .sum()
}

/// Interface shared by gridworlds and bandit abstractions.
pub trait Environment: Send + Sync {
    type State: Clone + Send + Sync + fmt::Debug + Serialize;

    fn problem(&self) -> Problem;
    fn num_actions(&self) -> usize;
    /// Upper bound on episode length.
    fn horizon(&self) -> usize;
    fn iterations(&self) -> u32;
    fn reset(&self, seed: u64, x_override: Option<f64>) -> Self::State;
    fn step(&self, state: &Self::State, action: ActionId) -> Result<Transition<Self::State>, EnvError>;
    fn is_terminal(&self, state: &Self::State) -> bool;
    fn x_people(&self, state: &Self::State) -> f64;
    fn problems_remaining(&self, state: &Self::State) -> u32;
    /// Length of the per-state feature vector (one-hot tiles or nodes).
    fn feature_len(&self) -> usize;
    fn write_features(&self, state: &Self::State, out: &mut Vec<f64>);
}

/// Which optional inputs an algorithm variant adds to observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtrasSpec {
    pub budget: bool,
    pub problems: bool,
    pub role: bool,
}

/// Number of roles in the unknown-adversary variant.
pub const ROLE_COUNT: usize = 3;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Extras {
    /// Share of the initial vote budget still available.
    pub remaining_budget: Option<f64>,
    pub problems_remaining: Option<u32>,
    pub role_onehot: Option<[f64; ROLE_COUNT]>,
}

impl Extras {
    pub fn len(&self) -> usize {
        self.remaining_budget.is_some() as usize
            + self.problems_remaining.is_some() as usize
            + self.role_onehot.map_or(0, |r| r.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn role(role: usize) -> [f64; ROLE_COUNT] {
        let mut r = [0.0; ROLE_COUNT];
        r[role] = 1.0;
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tiles_onehot: Vec<f64>,
    pub x_norm: f64,
    pub credences: CredenceVector,
    pub extras: Extras,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.tiles_onehot.len() + 1 + self.credences.len() + self.extras.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat network input: tiles, X, credences, then extras in fixed order.
    pub fn to_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.tiles_onehot);
        v.push(self.x_norm);
        v.extend_from_slice(self.credences.values());
        if let Some(b) = self.extras.remaining_budget {
            v.push(b);
        }
        if let Some(p) = self.extras.problems_remaining {
            v.push(f64::from(p));
        }
        if let Some(r) = self.extras.role_onehot {
            v.extend_from_slice(&r);
        }
        v
    }
}

/// Maps X in [1, 10] to [0, 1].
pub fn normalize_x(x: f64) -> f64 {
    (x - X_MIN) / (X_MAX - X_MIN)
}

pub fn encode<E: Environment>(
    env: &E,
    state: &E::State,
    credences: &CredenceVector,
    extras: Extras,
) -> Observation {
    let mut tiles = Vec::with_capacity(env.feature_len());
    env.write_features(state, &mut tiles);
    Observation {
        tiles_onehot: tiles,
        x_norm: normalize_x(env.x_people(state)),
        credences: credences.clone(),
        extras,
    }
}

/// Flat input length for `n_theories` credences and the given extras.
pub fn input_len<E: Environment>(env: &E, n_theories: usize, extras: ExtrasSpec) -> usize {
    env.feature_len()
        + 1
        + n_theories
        + extras.budget as usize
        + extras.problems as usize
        + if extras.role { ROLE_COUNT } else { 0 }
}

/// Something that picks actions during evaluation episodes.
pub trait Controller<E: Environment>: Sync {
    /// Per-episode mutable state (e.g. remaining vote budgets).
    type Memory: Send;

    fn begin(&self, env: &E, credences: &CredenceVector) -> Self::Memory;

    fn act(
        &self,
        env: &E,
        state: &E::State,
        credences: &CredenceVector,
        memory: &mut Self::Memory,
    ) -> ActionId;
}

/// Plays a fixed action sequence, then action 0.
pub struct Scripted(pub Vec<ActionId>);

impl<E: Environment> Controller<E> for Scripted {
    type Memory = usize;

    fn begin(&self, _env: &E, _credences: &CredenceVector) -> usize {
        0
    }

    fn act(&self, _env: &E, _s: &E::State, _c: &CredenceVector, next: &mut usize) -> ActionId {
        let a = self.0.get(*next).copied().unwrap_or(ActionId(0));
        *next += 1;
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// One label per trolley problem, in order.
    pub choices: Vec<Choice>,
    /// Undiscounted return per theory passed to [`run_episode`].
    pub returns: Vec<f64>,
    pub steps: usize,
}

impl EpisodeRecord {
    pub fn first_choice(&self) -> Option<Choice> {
        self.choices.first().copied()
    }
}

#[derive(Serialize)]
struct TraceLine<'a, S: Serialize> {
    step: usize,
    #[serde(flatten)]
    transition: &'a Transition<S>,
}

/// Runs one episode to termination. When `trace` is given, every
/// transition is written to it as one JSON line.
pub fn run_episode<E, C>(
    env: &E,
    controller: &C,
    seed: u64,
    x_override: Option<f64>,
    credences: &CredenceVector,
    theories: &[TheorySpec],
    mut trace: Option<&mut dyn Write>,
) -> Result<EpisodeRecord, EnvError>
where
    E: Environment,
    C: Controller<E>,
{
    let mut state = env.reset(seed, x_override);
    let mut memory = controller.begin(env, credences);
    let mut record = EpisodeRecord {
        choices: Vec::new(),
        returns: vec![0.0; theories.len()],
        steps: 0,
    };
    while !env.is_terminal(&state) {
        let action = controller.act(env, &state, credences, &mut memory);
        let t = env.step(&state, action)?;
        for (ret, theory) in record.returns.iter_mut().zip(theories) {
            *ret += t.worthiness(theory)?;
        }
        if let Some(c) = t.choice {
            record.choices.push(c);
        }
        if let Some(w) = trace.as_mut() {
            let line = TraceLine {
                step: record.steps,
                transition: &t,
            };
            serde_json::to_writer(&mut **w, &line).map_err(|e| EnvError::Trace(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| EnvError::Trace(e.to_string()))?;
        }
        record.steps += 1;
        state = t.next_state;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        assert_eq!("classic".parse::<Variant>().unwrap(), Variant::single(Problem::Classic));
        assert_eq!(
            "classic-iterated".parse::<Variant>().unwrap(),
            Variant::iterated(Problem::Classic, 2)
        );
        assert_eq!(
            "double-iterated-3".parse::<Variant>().unwrap(),
            Variant::iterated(Problem::Double, 3)
        );
        assert!("tram".parse::<Variant>().is_err());
        assert!("classic-looped".parse::<Variant>().is_err());
        for v in ["guard", "doomsday-iterated", "double-iterated-4"] {
            assert_eq!(v.parse::<Variant>().unwrap().to_string(), v);
        }
    }

    #[test]
    fn choice_codes_round_trip() {
        for c in Choice::ALL {
            assert_eq!(Choice::from_code(c.code()), Some(c));
            assert_eq!(c.label().parse::<Choice>().unwrap(), c);
        }
        assert_eq!(Choice::from_code(9), None);
    }

    #[test]
    fn x_normalization_endpoints() {
        assert_eq!(normalize_x(10.0), 1.0);
        assert_eq!(normalize_x(1.0), 0.0);
    }

    #[test]
    fn worthiness_of_uses_table() {
        let g = Gridworld::new(Variant::single(Problem::Classic));
        let table = Problem::Classic.table();
        let s = g.reset(0, Some(9.0));
        // Wait in place for the trolley: up from row 2 is row 1, which is free.
        let t = g.step(&s, ActionId(0)).unwrap();
        assert_eq!(worthiness_of(&t, &table, 0).unwrap(), 0.0);
        let mut s = t.next_state;
        let mut last = None;
        while !g.is_terminal(&s) {
            let t = g.step(&s, ActionId(0)).unwrap();
            s = t.next_state.clone();
            last = Some(t);
        }
        let last = last.unwrap();
        assert_eq!(last.outcome, Some(Outcome::CrashIntoX));
        assert_eq!(worthiness_of(&last, &table, 0).unwrap(), -9.0);
        assert_eq!(worthiness_of(&last, &table, 1).unwrap(), 0.0);
    }

    #[test]
    fn encode_extras() {
        let g = Gridworld::new(Variant::single(Problem::Classic));
        let s = g.reset(3, Some(10.0));
        let c = CredenceVector::pair(0.3).unwrap();
        let o = encode(&g, &s, &c, Extras::default());
        assert_eq!(o.x_norm, 1.0);
        assert_eq!(o.to_input().len(), input_len(&g, 2, ExtrasSpec::default()));
        let o = encode(
            &g,
            &s,
            &c,
            Extras {
                remaining_budget: Some(0.75),
                problems_remaining: None,
                role_onehot: Some(Extras::role(2)),
            },
        );
        let input = o.to_input();
        assert_eq!(
            input.len(),
            input_len(
                &g,
                2,
                ExtrasSpec {
                    budget: true,
                    problems: false,
                    role: true
                }
            )
        );
        assert_eq!(&input[input.len() - 4..], &[0.75, 0.0, 0.0, 1.0]);
    }
}
