//! Maximize expected choice-worthiness.
//!
//! The theories' rewards are scalarized into `R = Σ_i C_i W_i` and a single
//! value function is learned on it, either on-policy (SARSA) or off-policy
//! (Q-learning). The trainer is [`SarsaTrainer`] with a scalarized head.

use serde::Serialize;

use crate::envs::{ActionId, Environment, Transition};
use crate::exec::Execution;
use crate::theories::{scale_theory, TheoryError, TheorySpec};
use crate::variance_voting::{argmax, Bootstrap, Heads, SarsaConfig, SarsaTrainer, TrainError};

/// Credence-weighted reward of one transition.
pub fn mec_reward<S>(t: &Transition<S>, theories: &[TheorySpec], credences: &[f64]) -> Result<f64, TheoryError> {
    let mut r = 0.0;
    for (th, c) in theories.iter().zip(credences) {
        r += c * t.worthiness(th)?;
    }
    Ok(r)
}

/// `config` with a single scalarized head and the given bootstrap.
pub fn mec_config(mut config: SarsaConfig, bootstrap: Bootstrap) -> SarsaConfig {
    config.heads = Heads::Scalarized;
    config.bootstrap = bootstrap;
    config
}

pub fn mec_trainer<'a, E: Environment>(
    env: &'a E,
    theories: Vec<TheorySpec>,
    config: SarsaConfig,
    bootstrap: Bootstrap,
    exec: Execution,
) -> Result<SarsaTrainer<'a, E>, TrainError> {
    SarsaTrainer::new(env, theories, mec_config(config, bootstrap), exec)
}

/// Expected choice-worthiness of every action in a one-shot decision.
pub fn expected_worth(worth_rows: &[Vec<f64>], credences: &[f64]) -> Vec<f64> {
    let k = worth_rows.first().map_or(0, Vec::len);
    (0..k)
        .map(|a| worth_rows.iter().zip(credences).map(|(r, c)| c * r[a]).sum())
        .collect()
}

pub fn mec_choice(worth_rows: &[Vec<f64>], credences: &[f64]) -> ActionId {
    ActionId(argmax(&expected_worth(worth_rows, credences)))
}

/// A copy of `t` whose choice-worthiness is multiplied by `factor`.
pub fn boosted(t: &TheorySpec, factor: f64) -> Result<TheorySpec, TheoryError> {
    scale_theory(t, factor, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleReport {
    pub x_people: f64,
    pub credence: f64,
    pub factor: f64,
    pub expected: Vec<f64>,
    pub expected_boosted: Vec<f64>,
    pub choice: ActionId,
    pub choice_boosted: ActionId,
}

/// Classic trolley decision (action 0 does nothing, action 1 switches)
/// before and after multiplying the second theory by `factor`.
pub fn scale_sensitivity(
    theories: &[TheorySpec],
    credence: f64,
    x_people: f64,
    factor: f64,
) -> Result<ScaleReport, TheoryError> {
    use crate::theories::Outcome;
    let row = |t: &TheorySpec| -> Result<Vec<f64>, TheoryError> {
        Ok(vec![
            t.evaluate(&[Outcome::CrashIntoX], x_people)?,
            t.evaluate(&[Outcome::CrashIntoOne], x_people)?,
        ])
    };
    let c = [credence, 1.0 - credence];
    let plain = vec![row(&theories[0])?, row(&theories[1])?];
    let boost = vec![row(&theories[0])?, row(&boosted(&theories[1], factor)?)?];
    let expected = expected_worth(&plain, &c);
    let expected_boosted = expected_worth(&boost, &c);
    Ok(ScaleReport {
        x_people,
        credence,
        factor,
        choice: ActionId(argmax(&expected)),
        choice_boosted: ActionId(argmax(&expected_boosted)),
        expected,
        expected_boosted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{bandit_of, Problem, Variant};
    use crate::theories::classic_table;
    use crate::variance_voting::CredenceMode;
    use crate::CredenceVector;
    use proptest::prelude::*;

    fn classic() -> Vec<TheorySpec> {
        classic_table().select(&["util", "deont"]).unwrap()
    }

    #[test]
    fn boost_flips_decision() {
        let r = scale_sensitivity(&classic(), 0.5, 5.0, 10.0).unwrap();
        assert_eq!(r.expected, vec![-2.5, -1.0]);
        assert_eq!(r.expected_boosted, vec![-2.5, -5.5]);
        assert_eq!(r.choice, ActionId(1));
        assert_eq!(r.choice_boosted, ActionId(0));
    }

    #[test]
    fn reward_is_weighted_sum() {
        let env = bandit_of(Variant::single(Problem::Classic));
        let s = env.reset(0, Some(4.0));
        let t = env.step(&s, ActionId(0)).unwrap();
        let r = mec_reward(&t, &classic(), &[0.25, 0.75]).unwrap();
        assert!((r - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn learns_fixed_credence_bandit() {
        let env = bandit_of(Variant::single(Problem::Classic));
        let config = SarsaConfig {
            total_steps: 20_000,
            credences: CredenceMode::Fixed(CredenceVector::pair(0.8).unwrap()),
            epsilon_start: 0.5,
            epsilon_end: 0.2,
            seed: 3,
            ..Default::default()
        };
        let mut t = mec_trainer(&env, classic(), config, Bootstrap::MaxQ, Execution::Sequential).unwrap();
        t.train_until(u64::MAX, |_| {}).unwrap();
        let agent = t.agent();
        let c = CredenceVector::pair(0.8).unwrap();
        let s = env.reset(0, Some(8.0));
        let input = crate::envs::encode(&env, &s, &c, Default::default()).to_input();
        assert_eq!(agent.decide(&input, &c).chosen, ActionId(1));
    }

    proptest! {
        #[test]
        fn invariant_to_common_affine(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2),
                                      c0 in 0.0f64..1.0, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let c = [c0, 1.0 - c0];
            let e = expected_worth(&rows, &c);
            let mut s = e.clone();
            s.sort_by(|x, y| y.partial_cmp(x).unwrap());
            prop_assume!(s[0] - s[1] > 1e-9);
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|w| a * w + b).collect()).collect();
            prop_assert_eq!(mec_choice(&rows, &c), mec_choice(&moved, &c));
        }
    }
}
