//! Nash voting.
//!
//! Every theory is a sub-agent that emits a continuous vote per action each
//! step and pays for it from an episode budget, under either an absolute
//! (cumulative voting) or quadratic cost. The action with the largest
//! credence-weighted vote sum is executed. Sub-agents are trained with
//! clipped-surrogate policy optimisation on their own choice-worthiness.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approx::{Checkpoint, Mlp, OutputActivation, ParamVector, Trainable, UpdateRule};
use crate::envs::{encode, input_len, ActionId, Controller, Environment, Extras, ExtrasSpec, ROLE_COUNT};
use crate::exec::Execution;
use crate::seeding;
use crate::theories::{CredenceVector, TheorySpec};
use crate::variance_voting::{argmax, state_mean, CredenceMode, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostFn {
    #[default]
    Absolute,
    Quadratic,
}

impl CostFn {
    pub fn cost(self, votes: &[f64]) -> f64 {
        match self {
            CostFn::Absolute => votes.iter().map(|v| v.abs()).sum(),
            CostFn::Quadratic => votes.iter().map(|v| v * v).sum(),
        }
    }

    /// Factor that brings a vote of cost `cost` down to cost `remaining`.
    pub fn shrink(self, cost: f64, remaining: f64) -> f64 {
        match self {
            CostFn::Absolute => remaining / cost,
            CostFn::Quadratic => (remaining / cost).sqrt(),
        }
    }

    /// Magnitude of a single-action vote that costs exactly `budget`.
    pub fn full_spend(self, budget: f64) -> f64 {
        match self {
            CostFn::Absolute => budget,
            CostFn::Quadratic => budget.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub initial: f64,
    pub remaining: f64,
}

impl Budget {
    pub fn new(initial: f64) -> Self {
        Budget {
            initial,
            remaining: initial,
        }
    }

    pub fn fraction_left(&self) -> f64 {
        if self.initial > 0.0 {
            self.remaining / self.initial
        } else {
            0.0
        }
    }
}

/// `n · k`: episode horizon times action count.
pub fn default_budget<E: Environment>(env: &E) -> f64 {
    (env.horizon() * env.num_actions()) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settlement {
    pub chosen: ActionId,
    /// Votes after any overspend scaling.
    pub votes: Vec<Vec<f64>>,
    pub spent: Vec<f64>,
    pub scaled: Vec<bool>,
}

/// Charges every theory for its vote, scaling overspending votes down to
/// the remaining budget, and returns the winning action.
pub fn settle_votes(
    votes: &[Vec<f64>],
    budgets: &mut [Budget],
    credences: &[f64],
    cost: CostFn,
) -> Settlement {
    let k = votes.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(votes.len());
    let mut spent = Vec::with_capacity(votes.len());
    let mut scaled = Vec::with_capacity(votes.len());
    for (v, b) in votes.iter().zip(budgets.iter_mut()) {
        let c = cost.cost(v);
        if c > b.remaining {
            let f = if c > 0.0 { cost.shrink(c, b.remaining) } else { 0.0 };
            out.push(v.iter().map(|x| x * f).collect());
            spent.push(b.remaining);
            b.remaining = 0.0;
            scaled.push(true);
        } else {
            out.push(v.clone());
            spent.push(c);
            b.remaining = (b.remaining - c).max(0.0);
            scaled.push(false);
        }
    }
    let total: Vec<f64> = (0..k)
        .map(|a| out.iter().zip(credences).map(|(v, c)| c * v[a]).sum())
        .collect();
    Settlement {
        chosen: ActionId(argmax(&total)),
        votes: out,
        spent,
        scaled,
    }
}

/// Best-response votes for a single decision: each theory spends its whole
/// budget on its favourite action (lowest index among ties); a theory
/// indifferent between all actions abstains.
pub fn one_shot_votes(worth_rows: &[Vec<f64>], cost: CostFn, budget: f64) -> Vec<Vec<f64>> {
    worth_rows
        .iter()
        .map(|row| {
            let mut v = vec![0.0; row.len()];
            if row.iter().any(|&w| w != row[0]) {
                v[argmax(row)] = cost.full_spend(budget);
            }
            v
        })
        .collect()
}

/// Analytic one-shot equilibrium outcome for one decision.
pub fn one_shot_equilibrium(
    worth_rows: &[Vec<f64>],
    credences: &[f64],
    cost: CostFn,
    budget: f64,
) -> ActionId {
    let votes = one_shot_votes(worth_rows, cost, budget);
    let mut budgets = vec![Budget::new(budget); votes.len()];
    settle_votes(&votes, &mut budgets, credences, cost).chosen
}

/// Vote shares of two options under one formulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Shares {
    pub nothing: f64,
    pub switch: f64,
}

impl Shares {
    fn of(nothing: f64, switch: f64) -> Self {
        let t = nothing + switch;
        Shares {
            nothing: nothing / t,
            switch: switch / t,
        }
    }

    pub fn winner(&self) -> &'static str {
        if self.switch > self.nothing {
            "switch"
        } else {
            "nothing"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetScalingReport {
    /// Budgets proportional to credence, deontology as one theory.
    pub budget_scaling_unsplit: Shares,
    /// Budgets proportional to credence, deontology split in two halves.
    pub budget_scaling_split: Shares,
    /// Equal budgets, votes weighted by credence.
    pub vote_scaling_unsplit: Shares,
    pub vote_scaling_split: Shares,
}

impl BudgetScalingReport {
    pub fn individuation_invariant(&self) -> bool {
        self.vote_scaling_unsplit.winner() == self.vote_scaling_split.winner()
    }
}

/// Classic trolley decision with 60% utilitarianism and 40% deontology,
/// quadratic cost and full, non-negative spending on each favourite.
pub fn budget_scaling_demo() -> BudgetScalingReport {
    let cost = CostFn::Quadratic;
    let util = 0.6;
    let deont = [0.4];
    let halves = [0.2, 0.2];
    let budget_scaled = |parts: &[f64]| {
        let nothing: f64 = parts.iter().map(|&c| cost.full_spend(c)).sum();
        Shares::of(nothing, cost.full_spend(util))
    };
    let vote_scaled = |parts: &[f64]| {
        let nothing: f64 = parts.iter().map(|&c| c * cost.full_spend(1.0)).sum();
        Shares::of(nothing, util * cost.full_spend(1.0))
    };
    BudgetScalingReport {
        budget_scaling_unsplit: budget_scaled(&deont),
        budget_scaling_split: budget_scaled(&halves),
        vote_scaling_unsplit: vote_scaled(&deont),
        vote_scaling_split: vote_scaled(&halves),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForcedVotes {
    /// Scale per theory.
    pub alpha: Vec<f64>,
    /// Offset per visited state, per theory.
    pub beta: Vec<Vec<f64>>,
    /// Votes per visited state, per theory, per action.
    pub votes: Vec<Vec<Vec<f64>>>,
    /// Quadratic cost per theory over the whole sequence.
    pub cost: Vec<f64>,
    pub budget: f64,
}

/// Budget-exhausting affine votes `(Q − β)/α` for a fixed sequence of
/// visited states (`q[state][theory][action]`) under quadratic cost and
/// budget `n · k`: `β` is the state mean and `α` the root mean variance.
pub fn forced_affine_votes(q: &[Vec<Vec<f64>>]) -> ForcedVotes {
    let n = q.len();
    let theories = q.first().map_or(0, Vec::len);
    let k = q.first().and_then(|s| s.first()).map_or(0, Vec::len);
    let beta: Vec<Vec<f64>> = q.iter().map(|s| s.iter().map(|r| state_mean(r)).collect()).collect();
    let alpha: Vec<f64> = (0..theories)
        .map(|i| {
            let ss: f64 = q
                .iter()
                .zip(&beta)
                .map(|(s, b)| s[i].iter().map(|v| (v - b[i]).powi(2)).sum::<f64>())
                .sum();
            (ss / (n * k) as f64).sqrt()
        })
        .collect();
    let votes: Vec<Vec<Vec<f64>>> = q
        .iter()
        .zip(&beta)
        .map(|(s, b)| {
            s.iter()
                .enumerate()
                .map(|(i, r)| {
                    r.iter()
                        .map(|v| if alpha[i] > 0.0 { (v - b[i]) / alpha[i] } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect();
    let cost = (0..theories)
        .map(|i| votes.iter().map(|s| CostFn::Quadratic.cost(&s[i])).sum())
        .collect();
    ForcedVotes {
        alpha,
        beta,
        votes,
        cost,
        budget: (n * k) as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NashMode {
    /// Seat `i` always plays theory `i`.
    #[default]
    Plain,
    /// Each seat's theory is drawn from the role pool every episode; the
    /// seat sees its own role but not its opponent's.
    UnknownAdversary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NashConfig {
    pub total_steps: u64,
    pub actors: usize,
    /// Steps per actor between updates.
    pub rollout: usize,
    pub learning_rate: f64,
    pub rule: UpdateRule,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub init_log_std: f64,
    /// Decay the learning rate linearly to zero over `total_steps`.
    pub anneal: bool,
    pub cost: CostFn,
    pub mode: NashMode,
    /// Overrides the default `n · k` budget.
    pub budget: Option<f64>,
    pub credences: CredenceMode,
    /// Seat roles at evaluation time (indices into the theory list).
    pub eval_roles: Vec<usize>,
    pub seed: u64,
}

impl Default for NashConfig {
    fn default() -> Self {
        NashConfig {
            total_steps: 200_000,
            actors: 8,
            rollout: 128,
            learning_rate: 0.001,
            rule: UpdateRule::Adam,
            hidden: vec![64, 64],
            epochs: 4,
            minibatches: 4,
            clip: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            init_log_std: -2.0,
            anneal: false,
            cost: CostFn::Absolute,
            mode: NashMode::Plain,
            budget: None,
            credences: CredenceMode::Sampled,
            eval_roles: vec![0, 1],
            seed: 0,
        }
    }
}

impl NashConfig {
    pub fn validate(&self, theories: usize) -> Result<(), TrainError> {
        let mut bad = Vec::new();
        if self.actors == 0 || self.rollout == 0 {
            bad.push("actors and rollout must be positive".to_string());
        }
        if self.epochs == 0 || self.minibatches == 0 {
            bad.push("epochs and minibatches must be positive".to_string());
        }
        if !(self.learning_rate > 0.0) {
            bad.push("learning_rate must be positive".to_string());
        }
        if !(self.clip > 0.0) {
            bad.push("clip must be positive".to_string());
        }
        if self.eval_roles.is_empty() || self.eval_roles.iter().any(|&r| r >= theories) {
            bad.push(format!("eval_roles must index the {theories} theories"));
        }
        if self.mode == NashMode::UnknownAdversary && theories > ROLE_COUNT {
            bad.push(format!("at most {ROLE_COUNT} roles"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(bad.join("; ")))
        }
    }

    fn extras<E: Environment>(&self, env: &E) -> ExtrasSpec {
        ExtrasSpec {
            budget: true,
            problems: env.iterations() > 1,
            role: self.mode == NashMode::UnknownAdversary,
        }
    }
}

fn seat_input<E: Environment>(
    env: &E,
    state: &E::State,
    credences: &CredenceVector,
    budget: &Budget,
    role: usize,
    spec: ExtrasSpec,
) -> Vec<f64> {
    let extras = Extras {
        remaining_budget: Some(budget.fraction_left()),
        problems_remaining: spec.problems.then(|| env.problems_remaining(state)),
        role_onehot: spec.role.then(|| Extras::role(role)),
    };
    encode(env, state, credences, extras).to_input()
}

/// Deterministic (mean-vote) Nash voters for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct NashAgent {
    pub policies: Vec<Mlp>,
    pub roles: Vec<usize>,
    pub cost: CostFn,
    pub budget: f64,
    pub extras: ExtrasSpec,
}

impl<E: Environment> Controller<E> for NashAgent {
    type Memory = Vec<Budget>;

    fn begin(&self, _env: &E, _c: &CredenceVector) -> Vec<Budget> {
        vec![Budget::new(self.budget); self.policies.len()]
    }

    fn act(&self, env: &E, s: &E::State, c: &CredenceVector, budgets: &mut Vec<Budget>) -> ActionId {
        let votes: Vec<Vec<f64>> = self
            .policies
            .iter()
            .zip(&self.roles)
            .zip(budgets.iter())
            .map(|((p, &role), b)| {
                p.forward(&seat_input(env, s, c, b, role, self.extras)).expect("input shape")
            })
            .collect();
        settle_votes(&votes, budgets, c.values(), self.cost).chosen
    }
}

struct Seat {
    policy: Trainable,
    log_std: ParamVector,
    value: Trainable,
}

#[derive(Clone)]
struct Record {
    input: Vec<f64>,
    vote: Vec<f64>,
    logp: f64,
    value: f64,
    reward: f64,
    done: bool,
}

struct NashActor<S> {
    rng: ChaCha8Rng,
    state: S,
    budgets: Vec<Budget>,
    credences: CredenceVector,
    roles: Vec<usize>,
    returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashStats {
    pub step: u64,
    pub episodes: u64,
    /// Mean episode return per seat over episodes finished in this rollout.
    pub mean_return: Vec<f64>,
    /// Mean fraction of the budget spent per step, per seat.
    pub spend: Vec<f64>,
    /// Fraction of votes that were scaled for overspending, per seat.
    pub overspend: Vec<f64>,
    pub policy_loss: Vec<f64>,
    pub value_loss: Vec<f64>,
    pub mean_log_std: Vec<f64>,
}

#[derive(Default)]
struct RolloutOut {
    per_seat: Vec<Vec<Record>>,
    last_value: Vec<f64>,
    finished_returns: Vec<Vec<f64>>,
    spend: Vec<f64>,
    scaled: Vec<usize>,
}

fn gaussian_logp(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * ln_2pi
        })
        .sum()
}

pub struct NashTrainer<'a, E: Environment> {
    env: &'a E,
    theories: Vec<TheorySpec>,
    config: NashConfig,
    exec: Execution,
    seats: Vec<Seat>,
    actors: Vec<NashActor<E::State>>,
    budget: f64,
    extras: ExtrasSpec,
    step: u64,
    updates: u64,
    episodes: u64,
}

impl<'a, E: Environment> NashTrainer<'a, E> {
    /// `theories` is the seat list in plain mode and the role pool in
    /// unknown-adversary mode; there are always as many seats as
    /// `config.eval_roles`.
    pub fn new(
        env: &'a E,
        theories: Vec<TheorySpec>,
        config: NashConfig,
        exec: Execution,
    ) -> Result<Self, TrainError> {
        if theories.is_empty() {
            return Err(TrainError::NoTheories);
        }
        config.validate(theories.len())?;
        let seats = config.eval_roles.len();
        if config.mode == NashMode::Plain && seats != theories.len() {
            return Err(TrainError::Config("plain mode needs one seat per theory".into()));
        }
        let extras = config.extras(env);
        let input = input_len(env, seats, extras);
        let k = env.num_actions();
        let mut init = seeding::rng(config.seed, "init", 0);
        let mut seat_models = Vec::new();
        for _ in 0..seats {
            let p = Mlp::with_hidden(input, &config.hidden, k, OutputActivation::Identity, &mut init)?;
            let v = Mlp::with_hidden(input, &config.hidden, 1, OutputActivation::Identity, &mut init)?;
            seat_models.push(Seat {
                policy: Trainable::new(p, config.rule, config.learning_rate),
                log_std: ParamVector::new(vec![config.init_log_std; k], config.rule, config.learning_rate),
                value: Trainable::new(v, config.rule, config.learning_rate),
            });
        }
        let budget = config.budget.unwrap_or_else(|| default_budget(env));
        let mut t = NashTrainer {
            env,
            theories,
            config,
            exec,
            seats: seat_models,
            actors: Vec::new(),
            budget,
            extras,
            step: 0,
            updates: 0,
            episodes: 0,
        };
        t.spawn_actors(0);
        Ok(t)
    }

    fn spawn_actors(&mut self, generation: u64) {
        self.actors = (0..self.config.actors)
            .map(|i| {
                let mut rng = seeding::rng(self.config.seed, "nash-actor", generation * 1_000_003 + i as u64);
                let (state, credences, roles) = self.fresh_episode(&mut rng);
                NashActor {
                    rng,
                    state,
                    budgets: vec![Budget::new(self.budget); self.seats.len()],
                    credences,
                    roles,
                    returns: vec![0.0; self.seats.len()],
                }
            })
            .collect();
    }

    fn fresh_episode(&self, rng: &mut ChaCha8Rng) -> (E::State, CredenceVector, Vec<usize>) {
        fresh_episode(self.env, &self.config, self.theories.len(), self.seats.len(), rng)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn agent(&self) -> NashAgent {
        NashAgent {
            policies: self.seats.iter().map(|s| s.policy.model.clone()).collect(),
            roles: self.config.eval_roles.clone(),
            cost: self.config.cost,
            budget: self.budget,
            extras: self.extras,
        }
    }

    pub fn train_until(&mut self, step: u64, mut observe: impl FnMut(&NashStats)) -> Result<(), TrainError> {
        let step = step.min(self.config.total_steps);
        while self.step < step {
            let remaining = step - self.step;
            let per_actor = self
                .config
                .rollout
                .min(remaining.div_ceil(self.config.actors as u64) as usize)
                .max(1);
            let stats = self.iteration(per_actor)?;
            observe(&stats);
        }
        Ok(())
    }

    fn iteration(&mut self, horizon: usize) -> Result<NashStats, TrainError> {
        let seats = self.seats.len();
        let frozen: Vec<(Mlp, Vec<f64>, Mlp)> = self
            .seats
            .iter()
            .map(|s| (s.policy.model.clone(), s.log_std.values.clone(), s.value.model.clone()))
            .collect();
        let env = self.env;
        let theories = &self.theories;
        let config = &self.config;
        let extras = self.extras;
        let budget = self.budget;
        let mut outs: Vec<Result<RolloutOut, TrainError>> = (0..self.actors.len()).map(|_| Ok(RolloutOut::default())).collect();
        {
            let mut pairs: Vec<_> = self.actors.iter_mut().zip(outs.iter_mut()).collect();
            self.exec.for_each_mut(&mut pairs, |_, (actor, slot)| {
                **slot = rollout(env, theories, config, extras, budget, &frozen, actor, horizon);
            });
        }
        let outs = outs.into_iter().collect::<Result<Vec<_>, _>>()?;
        let steps: usize = outs.iter().map(|o| o.per_seat[0].len()).sum();
        self.step += steps as u64;

        let mut finished = vec![Vec::new(); seats];
        let mut spend = vec![0.0; seats];
        let mut scaled = vec![0usize; seats];
        for o in &outs {
            for s in 0..seats {
                finished[s].extend_from_slice(&o.finished_returns[s]);
                spend[s] += o.spend[s];
                scaled[s] += o.scaled[s];
            }
        }
        let new_episodes = finished[0].len() as u64;
        self.episodes += new_episodes;

        if self.config.anneal {
            let frac = 1.0 - self.step as f64 / self.config.total_steps.max(1) as f64;
            let lr = self.config.learning_rate * frac.max(0.0);
            for s in &mut self.seats {
                s.policy.opt.learning_rate = lr;
                s.log_std.opt.learning_rate = lr;
                s.value.opt.learning_rate = lr;
            }
        }
        let update_rng_seed = seeding::derive(self.config.seed, "ppo", self.updates);
        let config = self.config.clone();
        let results = {
            let seats_mut = &mut self.seats;
            let outs = &outs;
            let mut jobs: Vec<_> = seats_mut.iter_mut().enumerate().collect();
            let mut res: Vec<(f64, f64)> = vec![(0.0, 0.0); jobs.len()];
            let mut paired: Vec<_> = jobs.iter_mut().zip(res.iter_mut()).collect();
            self.exec.for_each_mut(&mut paired, |_, ((i, seat), r)| {
                **r = ppo_update(seat, *i, outs, &config, update_rng_seed);
            });
            res
        };
        self.updates += 1;
        let n = steps.max(1) as f64;
        Ok(NashStats {
            step: self.step,
            episodes: self.episodes,
            mean_return: finished
                .iter()
                .map(|f| if f.is_empty() { f64::NAN } else { f.iter().sum::<f64>() / f.len() as f64 })
                .collect(),
            spend: spend.iter().map(|s| s / (n * self.budget)).collect(),
            overspend: scaled.iter().map(|&c| c as f64 / n).collect(),
            policy_loss: results.iter().map(|r| r.0).collect(),
            value_loss: results.iter().map(|r| r.1).collect(),
            mean_log_std: self
                .seats
                .iter()
                .map(|s| s.log_std.values.iter().sum::<f64>() / s.log_std.values.len() as f64)
                .collect(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.step);
        for (i, s) in self.seats.iter().enumerate() {
            c.push_model(format!("policy{i}"), &s.policy);
            c.push_params(format!("log_std{i}"), &s.log_std);
            c.push_model(format!("value{i}"), &s.value);
        }
        c.push_vector("counters", vec![self.updates as f64, self.episodes as f64]);
        c
    }

    pub fn restore(&mut self, c: &Checkpoint) -> Result<(), TrainError> {
        for (i, s) in self.seats.iter_mut().enumerate() {
            s.policy = c.trainable(&format!("policy{i}"))?;
            s.log_std = c.params(&format!("log_std{i}"))?;
            s.value = c.trainable(&format!("value{i}"))?;
        }
        let counters = c.vector("counters")?;
        self.updates = counters.first().copied().unwrap_or(0.0) as u64;
        self.episodes = counters.get(1).copied().unwrap_or(0.0) as u64;
        self.step = c.step;
        self.spawn_actors(c.step + 1);
        Ok(())
    }
}

fn fresh_episode<E: Environment>(
    env: &E,
    config: &NashConfig,
    pool: usize,
    seats: usize,
    rng: &mut ChaCha8Rng,
) -> (E::State, CredenceVector, Vec<usize>) {
    let credences = config.credences.draw(rng, seats);
    let roles = match config.mode {
        NashMode::Plain => (0..seats).collect(),
        NashMode::UnknownAdversary => (0..seats).map(|_| rng.random_range(0..pool)).collect(),
    };
    let state = env.reset(rng.random(), None);
    (state, credences, roles)
}

#[allow(clippy::too_many_arguments)]
fn rollout<E: Environment>(
    env: &E,
    theories: &[TheorySpec],
    config: &NashConfig,
    extras: ExtrasSpec,
    budget: f64,
    frozen: &[(Mlp, Vec<f64>, Mlp)],
    actor: &mut NashActor<E::State>,
    horizon: usize,
) -> Result<RolloutOut, TrainError> {
    let seats = frozen.len();
    let mut out = RolloutOut {
        per_seat: vec![Vec::with_capacity(horizon); seats],
        last_value: vec![0.0; seats],
        finished_returns: vec![Vec::new(); seats],
        spend: vec![0.0; seats],
        scaled: vec![0; seats],
    };
    for _ in 0..horizon {
        let mut inputs = Vec::with_capacity(seats);
        let mut votes = Vec::with_capacity(seats);
        let mut logps = Vec::with_capacity(seats);
        let mut values = Vec::with_capacity(seats);
        for (s, (policy, log_std, value)) in frozen.iter().enumerate() {
            let x = seat_input(env, &actor.state, &actor.credences, &actor.budgets[s], actor.roles[s], extras);
            let mean = policy.forward(&x)?;
            let vote: Vec<f64> = mean
                .iter()
                .zip(log_std)
                .map(|(m, ls)| {
                    let z: f64 = StandardNormal.sample(&mut actor.rng);
                    m + ls.exp() * z
                })
                .collect();
            logps.push(gaussian_logp(&vote, &mean, log_std));
            values.push(value.forward(&x)?[0]);
            votes.push(vote);
            inputs.push(x);
        }
        let settled = settle_votes(&votes, &mut actor.budgets, actor.credences.values(), config.cost);
        let t = env.step(&actor.state, settled.chosen)?;
        for s in 0..seats {
            let reward = t.worthiness(&theories[actor.roles[s]])?;
            actor.returns[s] += reward;
            out.spend[s] += settled.spent[s];
            out.scaled[s] += settled.scaled[s] as usize;
            out.per_seat[s].push(Record {
                input: std::mem::take(&mut inputs[s]),
                vote: std::mem::take(&mut votes[s]),
                logp: logps[s],
                value: values[s],
                reward,
                done: t.done,
            });
        }
        if t.done {
            for s in 0..seats {
                out.finished_returns[s].push(actor.returns[s]);
                actor.returns[s] = 0.0;
            }
            let (state, credences, roles) = fresh_episode(env, config, theories.len(), seats, &mut actor.rng);
            actor.state = state;
            actor.credences = credences;
            actor.roles = roles;
            actor.budgets = vec![Budget::new(budget); seats];
        } else {
            actor.state = t.next_state;
        }
    }
    for (s, (_, _, value)) in frozen.iter().enumerate() {
        let x = seat_input(env, &actor.state, &actor.credences, &actor.budgets[s], actor.roles[s], extras);
        out.last_value[s] = value.forward(&x)?[0];
    }
    Ok(out)
}

/// One clipped-surrogate update of a seat. Returns mean policy and value
/// losses over the final epoch.
fn ppo_update(seat: &mut Seat, index: usize, outs: &[RolloutOut], config: &NashConfig, seed: u64) -> (f64, f64) {
    let mut data: Vec<(&Record, f64, f64)> = Vec::new();
    for o in outs {
        let recs = &o.per_seat[index];
        let mut adv = vec![0.0; recs.len()];
        let mut gae = 0.0;
        for t in (0..recs.len()).rev() {
            let next_value = if recs[t].done {
                0.0
            } else if t + 1 < recs.len() {
                recs[t + 1].value
            } else {
                o.last_value[index]
            };
            let delta = recs[t].reward + config.gamma * next_value - recs[t].value;
            let carry = if recs[t].done { 0.0 } else { gae };
            gae = delta + config.gamma * config.gae_lambda * carry;
            adv[t] = gae;
        }
        for (r, a) in recs.iter().zip(adv) {
            data.push((r, a, a + r.value));
        }
    }
    let n = data.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = data.iter().map(|d| d.1).sum::<f64>() / n as f64;
    let std = (data.iter().map(|d| (d.1 - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let norm: Vec<f64> = data.iter().map(|d| (d.1 - mean) / (std + 1e-8)).collect();

    let mut rng = seeding::rng(seed, "minibatch", index as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let mb = n.div_ceil(config.minibatches);
    let (mut pl, mut vl) = (0.0, 0.0);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let last = epoch + 1 == config.epochs;
        if last {
            pl = 0.0;
            vl = 0.0;
        }
        for chunk in order.chunks(mb) {
            let m = chunk.len() as f64;
            let mut gp = vec![0.0; seat.policy.model.num_params()];
            let mut gs = vec![0.0; seat.log_std.values.len()];
            let mut gv = vec![0.0; seat.value.model.num_params()];
            let ls = &seat.log_std.values;
            for &j in chunk {
                let (rec, _, ret) = data[j];
                let a = norm[j];
                let cache = seat.policy.model.forward_cached(&rec.input).expect("shape");
                let mu = cache.output();
                let logp = gaussian_logp(&rec.vote, mu, ls);
                let ratio = (logp - rec.logp).exp();
                let clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
                let loss = -(ratio * a).min(clipped * a);
                let active = !((a >= 0.0 && ratio > 1.0 + config.clip) || (a < 0.0 && ratio < 1.0 - config.clip));
                if last {
                    pl += loss / n as f64;
                }
                if active {
                    // ∂loss/∂logp = −A·ratio
                    let dl = -a * ratio / m;
                    let mut dmu = vec![0.0; mu.len()];
                    for k in 0..mu.len() {
                        let var = (2.0 * ls[k]).exp();
                        let diff = rec.vote[k] - mu[k];
                        dmu[k] = dl * diff / var;
                        gs[k] += dl * (diff * diff / var - 1.0);
                    }
                    seat.policy.model.backward(&cache, &dmu, &mut gp);
                }
                let vc = seat.value.model.forward_cached(&rec.input).expect("shape");
                let e = vc.output()[0] - ret;
                if last {
                    vl += 0.5 * e * e / n as f64;
                }
                seat.value.model.backward(&vc, &[e / m], &mut gv);
            }
            seat.policy.apply(&gp);
            seat.log_std.apply(&gs);
            for v in &mut seat.log_std.values {
                *v = v.clamp(-5.0, 2.0);
            }
            seat.value.apply(&gv);
        }
    }
    (pl, vl)
}
