//! Variance voting and Variance-SARSA.
//!
//! Each theory keeps a credence-conditioned Q network and a variance network
//! `σ²_i(C)`. The acting policy is
//!
//! ```text
//! π(s) = argmax_a Σ_i C_i (Q_i(s,a) − μ_i(s)) / (√σ²_i + ε)
//! ```
//!
//! and each Q_i is trained on the local SARSA target `W_i + γ_i Q_i(s′, a′)`
//! where `a′` is the action the joint policy takes at `s′`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{ApproxError, Checkpoint, Mlp, OutputActivation, Trainable, UpdateRule};
use crate::envs::{encode, input_len, ActionId, Controller, EnvError, Environment, Extras, ExtrasSpec};
use crate::exec::Execution;
use crate::seeding;
use crate::theories::{CredenceVector, TheoryError, TheorySpec};

/// Denominator guard in the vote normalisation.
pub const VOTE_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least one theory")]
    NoTheories,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

pub fn state_mean(q: &[f64]) -> f64 {
    q.iter().sum::<f64>() / q.len() as f64
}

/// Population variance of one Q row over actions.
pub fn state_variance(q: &[f64]) -> f64 {
    let mu = state_mean(q);
    q.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / q.len() as f64
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(Q − μ) / (√σ² + ε)` for one theory; zero when the denominator is zero.
pub fn normalized_votes(q: &[f64], sigma2: f64, eps: f64) -> Vec<f64> {
    let mu = state_mean(q);
    let denom = sigma2.max(0.0).sqrt() + eps;
    q.iter()
        .map(|v| if denom > 0.0 { (v - mu) / denom } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteResult {
    /// Credence-weighted normalised vote per action.
    pub total: Vec<f64>,
    pub chosen: ActionId,
}

pub fn vote<Q: AsRef<[f64]>>(q_rows: &[Q], sigma2: &[f64], credences: &[f64], eps: f64) -> VoteResult {
    let k = q_rows.first().map_or(0, |r| r.as_ref().len());
    let mut total = vec![0.0; k];
    for ((q, &s2), &c) in q_rows.iter().zip(sigma2).zip(credences) {
        if c == 0.0 {
            continue;
        }
        for (t, v) in total.iter_mut().zip(normalized_votes(q.as_ref(), s2, eps)) {
            *t += c * v;
        }
    }
    let chosen = ActionId(argmax(&total));
    VoteResult { total, chosen }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bootstrap {
    /// Bootstrap on the action the joint policy takes next.
    #[default]
    Sarsa,
    /// Bootstrap on each theory's own best next action.
    MaxQ,
}

/// `W + γ Q(s′, a′)`, or `W` at a terminal `s′`.
pub fn sarsa_target(w: f64, gamma: f64, next: Option<(&[f64], ActionId)>) -> f64 {
    match next {
        None => w,
        Some((q, a)) => w + gamma * q[a.0],
    }
}

/// `W + γ max_a Q(s′, a)`, or `W` at a terminal `s′`.
pub fn max_target(w: f64, gamma: f64, q_next: Option<&[f64]>) -> f64 {
    match q_next {
        None => w,
        Some(q) => w + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// How theories map to value heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    /// One Q and σ² model per theory, combined by variance voting.
    #[default]
    PerTheory,
    /// A single head trained on `Σ_i C_i W_i` and acted on greedily.
    Scalarized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "values")]
pub enum CredenceMode {
    /// Fresh credences drawn uniformly from the simplex every episode.
    Sampled,
    Fixed(CredenceVector),
}

impl CredenceMode {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> CredenceVector {
        match self {
            CredenceMode::Sampled => CredenceVector::sample(rng, n),
            CredenceMode::Fixed(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SarsaConfig {
    pub total_steps: u64,
    pub actors: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rule: UpdateRule,
    pub hidden: Vec<usize>,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub vote_epsilon: f64,
    pub bootstrap: Bootstrap,
    pub heads: Heads,
    pub credences: CredenceMode,
    pub seed: u64,
}

impl Default for SarsaConfig {
    fn default() -> Self {
        SarsaConfig {
            total_steps: 500_000,
            actors: 8,
            batch_size: 32,
            learning_rate: 0.001,
            rule: UpdateRule::Adam,
            hidden: vec![32, 32],
            epsilon_start: 0.1,
            epsilon_end: 0.0,
            vote_epsilon: VOTE_EPSILON,
            bootstrap: Bootstrap::Sarsa,
            heads: Heads::PerTheory,
            credences: CredenceMode::Sampled,
            seed: 0,
        }
    }
}

impl SarsaConfig {
    /// Linear ε schedule from `epsilon_start` at step 0 to `epsilon_end` at
    /// `total_steps`.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        let frac = (step as f64 / self.total_steps.max(1) as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let mut bad = Vec::new();
        if self.actors == 0 {
            bad.push("actors must be positive");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            bad.push("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            bad.push("epsilon must lie in [0, 1]");
        }
        if self.hidden.contains(&0) {
            bad.push("hidden widths must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(bad.join("; ")))
        }
    }
}

/// Frozen Q and σ² models used for acting and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceAgent {
    pub q: Vec<Mlp>,
    pub sigma2: Vec<Mlp>,
    pub heads: Heads,
    pub vote_epsilon: f64,
}

impl VarianceAgent {
    pub fn q_rows(&self, input: &[f64]) -> Vec<Vec<f64>> {
        self.q.iter().map(|m| m.forward(input).expect("input shape")).collect()
    }

    pub fn sigma2_at(&self, credences: &CredenceVector) -> Vec<f64> {
        self.sigma2
            .iter()
            .map(|m| m.forward(credences.values()).expect("credence shape")[0])
            .collect()
    }

    /// Joint vote at an encoded observation.
    pub fn decide(&self, input: &[f64], credences: &CredenceVector) -> VoteResult {
        let rows = self.q_rows(input);
        match self.heads {
            Heads::Scalarized => {
                let chosen = ActionId(argmax(&rows[0]));
                VoteResult {
                    total: rows.into_iter().next().unwrap(),
                    chosen,
                }
            }
            Heads::PerTheory => {
                let s2 = self.sigma2_at(credences);
                vote(&rows, &s2, credences.values(), self.vote_epsilon)
            }
        }
    }
}

impl<E: Environment> Controller<E> for VarianceAgent {
    type Memory = ();

    fn begin(&self, _env: &E, _c: &CredenceVector) {}

    fn act(&self, env: &E, s: &E::State, c: &CredenceVector, _m: &mut ()) -> ActionId {
        let input = encode(env, s, c, Extras::default()).to_input();
        self.decide(&input, c).chosen
    }
}

struct Sample {
    input: Vec<f64>,
    credences: Vec<f64>,
    action: usize,
    worth: Vec<f64>,
    /// Encoded next state and the joint policy's next action.
    next: Option<(Vec<f64>, usize)>,
}

struct Actor<S> {
    rng: ChaCha8Rng,
    state: S,
    credences: CredenceVector,
    action: ActionId,
    episodes: u64,
}

/// Per-update diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateStats {
    pub step: u64,
    pub q_loss: f64,
    pub sigma2_loss: f64,
    pub epsilon: f64,
    pub episodes: u64,
}

/// Variance-SARSA trainer (and, with [`Heads::Scalarized`], a plain
/// SARSA/Q-learning trainer on the credence-weighted reward).
pub struct SarsaTrainer<'a, E: Environment> {
    env: &'a E,
    theories: Vec<TheorySpec>,
    config: SarsaConfig,
    exec: Execution,
    q: Vec<Trainable>,
    sigma2: Vec<Trainable>,
    actors: Vec<Actor<E::State>>,
    step: u64,
    updates: u64,
    pending: Vec<Sample>,
}

impl<'a, E: Environment> SarsaTrainer<'a, E> {
    pub fn new(
        env: &'a E,
        theories: Vec<TheorySpec>,
        config: SarsaConfig,
        exec: Execution,
    ) -> Result<Self, TrainError> {
        if theories.is_empty() {
            return Err(TrainError::NoTheories);
        }
        config.validate()?;
        if let CredenceMode::Fixed(c) = &config.credences {
            if c.len() != theories.len() {
                return Err(TrainError::Config(format!(
                    "{} credences for {} theories",
                    c.len(),
                    theories.len()
                )));
            }
        }
        if config.heads == Heads::Scalarized && theories.iter().any(|t| t.gamma != theories[0].gamma) {
            return Err(TrainError::Config("scalarized heads need a shared discount".into()));
        }
        let n = theories.len();
        let heads = match config.heads {
            Heads::PerTheory => n,
            Heads::Scalarized => 1,
        };
        let q_in = input_len(env, n, ExtrasSpec::default());
        let mut init = seeding::rng(config.seed, "init", 0);
        let mut q = Vec::new();
        let mut sigma2 = Vec::new();
        for _ in 0..heads {
            let m = Mlp::with_hidden(q_in, &config.hidden, env.num_actions(), OutputActivation::Identity, &mut init)?;
            q.push(Trainable::new(m, config.rule, config.learning_rate));
            let m = Mlp::with_hidden(n, &config.hidden, 1, OutputActivation::Exp, &mut init)?;
            sigma2.push(Trainable::new(m, config.rule, config.learning_rate));
        }
        let mut t = SarsaTrainer {
            env,
            theories,
            config,
            exec,
            q,
            sigma2,
            actors: Vec::new(),
            step: 0,
            updates: 0,
            pending: Vec::new(),
        };
        t.spawn_actors(0);
        Ok(t)
    }

    fn spawn_actors(&mut self, generation: u64) {
        let agent = self.agent();
        let eps = self.config.epsilon_at(self.step);
        self.actors = (0..self.config.actors)
            .map(|i| {
                let mut rng = seeding::rng(self.config.seed, "actor", generation * 1_000_003 + i as u64);
                let (state, credences, action) = self.begin_episode(&agent, &mut rng, eps);
                Actor {
                    rng,
                    state,
                    credences,
                    action,
                    episodes: 0,
                }
            })
            .collect();
    }

    fn begin_episode(
        &self,
        agent: &VarianceAgent,
        rng: &mut ChaCha8Rng,
        eps: f64,
    ) -> (E::State, CredenceVector, ActionId) {
        let credences = self.config.credences.draw(rng, self.theories.len());
        let state = self.env.reset(rng.random(), None);
        let input = encode(self.env, &state, &credences, Extras::default()).to_input();
        let action = explore(agent, &input, &credences, eps, self.env.num_actions(), rng);
        (state, credences, action)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &SarsaConfig {
        &self.config
    }

    pub fn agent(&self) -> VarianceAgent {
        VarianceAgent {
            q: self.q.iter().map(|t| t.model.clone()).collect(),
            sigma2: self.sigma2.iter().map(|t| t.model.clone()).collect(),
            heads: self.config.heads,
            vote_epsilon: self.config.vote_epsilon,
        }
    }

    /// Trains until `step` transitions have been collected, calling
    /// `observe` after every update.
    pub fn train_until(
        &mut self,
        step: u64,
        mut observe: impl FnMut(&UpdateStats),
    ) -> Result<(), TrainError> {
        let step = step.min(self.config.total_steps);
        while self.step < step {
            let agent = self.agent();
            let eps = self.config.epsilon_at(self.step);
            let take = self.config.actors.min((step - self.step) as usize);
            let env = self.env;
            let theories = &self.theories;
            let config = &self.config;
            let results: Vec<Result<Sample, TrainError>> = {
                let actors = &mut self.actors[..take];
                let mut out: Vec<Option<Result<Sample, TrainError>>> = (0..take).map(|_| None).collect();
                let mut pairs: Vec<_> = actors.iter_mut().zip(out.iter_mut()).collect();
                self.exec.for_each_mut(&mut pairs, |_, (actor, slot)| {
                    **slot = Some(actor_step(env, theories, config, &agent, actor, eps));
                });
                out.into_iter().map(|o| o.expect("every actor stepped")).collect()
            };
            for r in results {
                self.pending.push(r?);
            }
            self.step += take as u64;
            if self.pending.len() >= self.config.batch_size || self.step >= step {
                let stats = self.update();
                observe(&stats);
            }
        }
        Ok(())
    }

    fn update(&mut self) -> UpdateStats {
        let batch = std::mem::take(&mut self.pending);
        let n = batch.len() as f64;
        let gammas: Vec<f64> = match self.config.heads {
            Heads::PerTheory => self.theories.iter().map(|t| t.gamma).collect(),
            Heads::Scalarized => vec![self.theories[0].gamma],
        };
        let bootstrap = self.config.bootstrap;
        let exec = self.exec;
        let q_models: Vec<Mlp> = self.q.iter().map(|t| t.model.clone()).collect();
        let s_models: Vec<Mlp> = self.sigma2.iter().map(|t| t.model.clone()).collect();
        let heads = q_models.len();
        // Job h < heads: Q loss of head h. Job heads + h: σ² loss of head h.
        let grads = exec.map_indexed(2 * heads, |job| {
            let h = job % heads;
            let qm = &q_models[h];
            if job < heads {
                let mut g = vec![0.0; qm.num_params()];
                let mut loss = 0.0;
                for s in &batch {
                    let target = match (&s.next, bootstrap) {
                        (None, _) => s.worth[h],
                        (Some((x, a)), Bootstrap::Sarsa) => {
                            let row = qm.forward(x).expect("shape");
                            sarsa_target(s.worth[h], gammas[h], Some((&row, ActionId(*a))))
                        }
                        (Some((x, _)), Bootstrap::MaxQ) => {
                            let row = qm.forward(x).expect("shape");
                            max_target(s.worth[h], gammas[h], Some(&row))
                        }
                    };
                    let cache = qm.forward_cached(&s.input).expect("shape");
                    let out = cache.output();
                    let e = out[s.action] - target;
                    loss += e * e;
                    let mut d = vec![0.0; out.len()];
                    d[s.action] = 2.0 * e / n;
                    qm.backward(&cache, &d, &mut g);
                }
                (loss / n, g)
            } else {
                let sm = &s_models[h];
                let mut g = vec![0.0; sm.num_params()];
                let mut loss = 0.0;
                for s in &batch {
                    let target = state_variance(&qm.forward(&s.input).expect("shape"));
                    let cache = sm.forward_cached(&s.credences).expect("shape");
                    let e = cache.output()[0] - target;
                    loss += e * e;
                    sm.backward(&cache, &[2.0 * e / n], &mut g);
                }
                (loss / n, g)
            }
        });
        let mut q_loss = 0.0;
        let mut s_loss = 0.0;
        for (job, (loss, g)) in grads.into_iter().enumerate() {
            if job < heads {
                q_loss += loss / heads as f64;
                self.q[job].apply(&g);
            } else {
                s_loss += loss / heads as f64;
                self.sigma2[job - heads].apply(&g);
            }
        }
        self.updates += 1;
        UpdateStats {
            step: self.step,
            q_loss,
            sigma2_loss: s_loss,
            epsilon: self.config.epsilon_at(self.step),
            episodes: self.actors.iter().map(|a| a.episodes).sum(),
        }
    }

    /// Trainable state at the current step.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.step);
        for (i, t) in self.q.iter().enumerate() {
            c.push_model(format!("q{i}"), t);
        }
        for (i, t) in self.sigma2.iter().enumerate() {
            c.push_model(format!("sigma2_{i}"), t);
        }
        c.push_vector("updates", vec![self.updates as f64]);
        c
    }

    /// Restores models and step counter. Actors restart from fresh
    /// episodes seeded by the restored step.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<(), TrainError> {
        for (i, t) in self.q.iter_mut().enumerate() {
            *t = c.trainable(&format!("q{i}"))?;
        }
        for (i, t) in self.sigma2.iter_mut().enumerate() {
            *t = c.trainable(&format!("sigma2_{i}"))?;
        }
        self.updates = c.vector("updates")?.first().copied().unwrap_or(0.0) as u64;
        self.step = c.step;
        self.pending.clear();
        self.spawn_actors(c.step + 1);
        Ok(())
    }
}

fn explore<R: Rng + ?Sized>(
    agent: &VarianceAgent,
    input: &[f64],
    credences: &CredenceVector,
    eps: f64,
    k: usize,
    rng: &mut R,
) -> ActionId {
    if eps > 0.0 && rng.random::<f64>() < eps {
        ActionId(rng.random_range(0..k))
    } else {
        agent.decide(input, credences).chosen
    }
}

fn actor_step<E: Environment>(
    env: &E,
    theories: &[TheorySpec],
    config: &SarsaConfig,
    agent: &VarianceAgent,
    actor: &mut Actor<E::State>,
    eps: f64,
) -> Result<Sample, TrainError> {
    let input = encode(env, &actor.state, &actor.credences, Extras::default()).to_input();
    let t = env.step(&actor.state, actor.action)?;
    let per_theory = theories
        .iter()
        .map(|th| t.worthiness(th))
        .collect::<Result<Vec<_>, _>>()?;
    let worth = match config.heads {
        Heads::PerTheory => per_theory,
        Heads::Scalarized => vec![per_theory
            .iter()
            .zip(actor.credences.values())
            .map(|(w, c)| w * c)
            .sum()],
    };
    let credences = actor.credences.values().to_vec();
    let action = actor.action.0;
    let next = if t.done {
        actor.episodes += 1;
        let c = config.credences.draw(&mut actor.rng, theories.len());
        let s = env.reset(actor.rng.random(), None);
        let x = encode(env, &s, &c, Extras::default()).to_input();
        actor.action = explore(agent, &x, &c, eps, env.num_actions(), &mut actor.rng);
        actor.state = s;
        actor.credences = c;
        None
    } else {
        let x = encode(env, &t.next_state, &actor.credences, Extras::default()).to_input();
        actor.action = explore(agent, &x, &actor.credences, eps, env.num_actions(), &mut actor.rng);
        actor.state = t.next_state;
        Some((x, actor.action.0))
    };
    Ok(Sample {
        input,
        credences,
        action,
        worth,
        next,
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Variance-PG direction on softmax logits for one sampled action:
/// `vote[a] · ∇ log π(a | s)`.
pub fn variance_pg_update(logits: &[f64], action: ActionId, votes: &[f64]) -> Vec<f64> {
    let p = softmax(logits);
    p.iter()
        .enumerate()
        .map(|(j, pj)| votes[action.0] * (if j == action.0 { 1.0 } else { 0.0 } - pj))
        .collect()
}

/// Expectation of [`variance_pg_update`] over `a ~ π`.
pub fn expected_pg_update(logits: &[f64], votes: &[f64]) -> Vec<f64> {
    let p = softmax(logits);
    let mut g = vec![0.0; logits.len()];
    for (a, pa) in p.iter().enumerate() {
        for (gj, uj) in g.iter_mut().zip(variance_pg_update(logits, ActionId(a), votes)) {
            *gj += pa * uj;
        }
    }
    g
}

pub fn action_probabilities(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}
