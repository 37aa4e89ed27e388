//! Moral theories, credences and the choice-worthiness tables used by the
//! trolley experiments.
//!
//! A theory scores transitions. In every shipped environment the score is
//! delivered as a single lump on the transition that realizes an outcome
//! (the trolley resolving, a push, a lie, the doomsday button); movement is
//! worth zero. Table entries are affine in the number of people on the
//! tracks so that "crash into X" can be expressed as `-X`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of a credence vector.
pub const CREDENCE_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("credence {index} is {value}, credences must be finite and non-negative")]
    NegativeCredence { index: usize, value: f64 },
    #[error("credences sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("credence vector is empty")]
    EmptyCredences,
    #[error("scale factor must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("theory {theory:?} has no entry for outcome {outcome}")]
    MissingOutcome { theory: String, outcome: Outcome },
    #[error("unknown theory {0:?}")]
    UnknownTheory(String),
    #[error("unknown outcome label {0:?}")]
    UnknownOutcome(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
}

/// Events a theory can assign choice-worthiness to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    /// The trolley is redirected onto the single bystander.
    #[serde(rename = "crash-into-1")]
    CrashIntoOne,
    /// The trolley is redirected onto the two bystanders (double variant).
    #[serde(rename = "crash-into-2")]
    CrashIntoTwo,
    /// No intervention: the trolley hits the X people on the main track.
    #[serde(rename = "crash-into-x")]
    CrashIntoX,
    #[serde(rename = "push")]
    Push,
    #[serde(rename = "lie")]
    Lie,
    #[serde(rename = "doomsday")]
    Doomsday,
}

impl Outcome {
    pub const ALL: [Outcome; 6] = [
        Outcome::CrashIntoOne,
        Outcome::CrashIntoTwo,
        Outcome::CrashIntoX,
        Outcome::Push,
        Outcome::Lie,
        Outcome::Doomsday,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Outcome::CrashIntoOne => "crash-into-1",
            Outcome::CrashIntoTwo => "crash-into-2",
            Outcome::CrashIntoX => "crash-into-x",
            Outcome::Push => "push",
            Outcome::Lie => "lie",
            Outcome::Doomsday => "doomsday",
        }
    }

    /// Lie is the only event that does not end a trolley problem.
    pub fn resolves(self) -> bool {
        self != Outcome::Lie
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Outcome {
    type Err = TheoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.label() == s)
            .ok_or_else(|| TheoryError::UnknownOutcome(s.to_string()))
    }
}

/// Choice-worthiness of one outcome: `constant + per_person * X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Worth {
    pub constant: f64,
    #[serde(default)]
    pub per_person: f64,
}

impl Worth {
    pub const fn fixed(constant: f64) -> Self {
        Worth {
            constant,
            per_person: 0.0,
        }
    }

    pub const fn per_person(per_person: f64) -> Self {
        Worth {
            constant: 0.0,
            per_person,
        }
    }

    pub fn at(&self, x_people: f64) -> f64 {
        self.constant + self.per_person * x_people
    }
}

/// Probability-like weights over theories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CredenceVector(Vec<f64>);

impl CredenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self, TheoryError> {
        if values.is_empty() {
            return Err(TheoryError::EmptyCredences);
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(TheoryError::NegativeCredence { index, value });
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > CREDENCE_SUM_TOLERANCE {
            return Err(TheoryError::NotNormalized(sum));
        }
        Ok(CredenceVector(values))
    }

    /// Two-theory split with `first` on theory 0.
    pub fn pair(first: f64) -> Result<Self, TheoryError> {
        Self::new(vec![first, 1.0 - first])
    }

    pub fn uniform(n: usize) -> Self {
        CredenceVector(vec![1.0 / n as f64; n])
    }

    /// Point mass on one theory.
    pub fn dictator(n: usize, theory: usize) -> Self {
        let mut v = vec![0.0; n];
        v[theory] = 1.0;
        CredenceVector(v)
    }

    /// Uniform draw from the probability simplex.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        let mut v: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                -(1.0 - u).ln()
            })
            .collect();
        let sum: f64 = v.iter().sum();
        if sum > 0.0 {
            v.iter_mut().for_each(|x| *x /= sum);
        } else {
            v = vec![1.0 / n as f64; n];
        }
        CredenceVector(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

impl TryFrom<Vec<f64>> for CredenceVector {
    type Error = TheoryError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        CredenceVector::new(value)
    }
}

impl From<CredenceVector> for Vec<f64> {
    fn from(c: CredenceVector) -> Self {
        c.0
    }
}

/// Preference table: `(theory, outcome) -> worth`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorthinessTable {
    pub name: String,
    theories: Vec<String>,
    outcomes: Vec<Outcome>,
    entries: BTreeMap<(usize, Outcome), Worth>,
}

const ABBREVIATIONS: [(&str, &str); 4] = [
    ("util", "utilitarianism"),
    ("deont", "deontology"),
    ("altered-deont", "altered-deontology"),
    ("boosted-deont", "boosted-deontology"),
];

impl WorthinessTable {
    /// Builds a table, checking that every theory covers every outcome.
    pub fn new(
        name: impl Into<String>,
        theories: Vec<String>,
        outcomes: Vec<Outcome>,
        entries: BTreeMap<(usize, Outcome), Worth>,
    ) -> Result<Self, TheoryError> {
        if theories.is_empty() {
            return Err(TheoryError::InvalidTable("no theories".into()));
        }
        for (id, theory) in theories.iter().enumerate() {
            for &outcome in &outcomes {
                if !entries.contains_key(&(id, outcome)) {
                    return Err(TheoryError::MissingOutcome {
                        theory: theory.clone(),
                        outcome,
                    });
                }
            }
        }
        if let Some(((id, o), _)) = entries.iter().find(|((_, o), _)| !outcomes.contains(o)) {
            return Err(TheoryError::InvalidTable(format!(
                "entry for {} / {o} outside the declared outcomes",
                theories.get(*id).map(String::as_str).unwrap_or("?")
            )));
        }
        Ok(WorthinessTable {
            name: name.into(),
            theories,
            outcomes,
            entries,
        })
    }

    fn build(name: &str, outcomes: &[Outcome], rows: &[(&str, &[Worth])]) -> Self {
        let mut entries = BTreeMap::new();
        for (id, (_, worths)) in rows.iter().enumerate() {
            for (&o, &w) in outcomes.iter().zip(worths.iter()) {
                entries.insert((id, o), w);
            }
        }
        let theories = rows.iter().map(|(n, _)| n.to_string()).collect();
        WorthinessTable::new(name, theories, outcomes.to_vec(), entries)
            .expect("built-in tables are complete")
    }

    pub fn theories(&self) -> &[String] {
        &self.theories
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn num_theories(&self) -> usize {
        self.theories.len()
    }

    /// Resolves a theory name or a common abbreviation (`util`, `deont`, ...).
    pub fn theory_id(&self, name: &str) -> Result<usize, TheoryError> {
        let full = ABBREVIATIONS
            .iter()
            .find(|(short, _)| *short == name)
            .map(|(_, long)| *long)
            .unwrap_or(name);
        self.theories
            .iter()
            .position(|t| t == full || t == name)
            .ok_or_else(|| TheoryError::UnknownTheory(name.to_string()))
    }

    pub fn worth(&self, theory: usize, outcome: Outcome) -> Result<Worth, TheoryError> {
        self.entries
            .get(&(theory, outcome))
            .copied()
            .ok_or_else(|| TheoryError::MissingOutcome {
                theory: self
                    .theories
                    .get(theory)
                    .cloned()
                    .unwrap_or_else(|| format!("#{theory}")),
                outcome,
            })
    }

    pub fn lookup(&self, theory: usize, outcome: Outcome, x_people: f64) -> Result<f64, TheoryError> {
        Ok(self.worth(theory, outcome)?.at(x_people))
    }

    /// Theory `id` as a standalone scorer with unit scale and `gamma = 1`.
    pub fn theory(&self, id: usize) -> Result<TheorySpec, TheoryError> {
        let name = self
            .theories
            .get(id)
            .ok_or_else(|| TheoryError::UnknownTheory(format!("#{id}")))?
            .clone();
        let row = self
            .entries
            .iter()
            .filter(|((t, _), _)| *t == id)
            .map(|((_, o), w)| (*o, *w))
            .collect();
        Ok(TheorySpec {
            id,
            name,
            gamma: 1.0,
            row,
            scale: 1.0,
            shift: 0.0,
        })
    }

    /// All theories of the table, dense ids in table order.
    pub fn all_theories(&self) -> Vec<TheorySpec> {
        (0..self.theories.len())
            .map(|i| self.theory(i).expect("id in range"))
            .collect()
    }

    /// Theories picked by name, re-numbered densely in the given order.
    pub fn select(&self, names: &[impl AsRef<str>]) -> Result<Vec<TheorySpec>, TheoryError> {
        names
            .iter()
            .enumerate()
            .map(|(dense, n)| {
                let mut t = self.theory(self.theory_id(n.as_ref())?)?;
                t.id = dense;
                Ok(t)
            })
            .collect()
    }

    /// Parses a table from TOML:
    ///
    /// ```toml
    /// name = "classic"
    /// [[entry]]
    /// theory = "utilitarianism"
    /// outcome = "crash-into-x"
    /// value = 0.0
    /// per_x = -1.0
    /// ```
    ///
    /// Theories and outcomes are taken in order of first appearance.
    pub fn from_toml(text: &str) -> Result<Self, TheoryError> {
        let file: TableFile =
            toml::from_str(text).map_err(|e| TheoryError::InvalidTable(e.to_string()))?;
        let mut theories: Vec<String> = Vec::new();
        let mut outcomes: Vec<Outcome> = Vec::new();
        let mut entries = BTreeMap::new();
        for e in &file.entry {
            let outcome: Outcome = e.outcome.parse()?;
            let id = match theories.iter().position(|t| *t == e.theory) {
                Some(id) => id,
                None => {
                    theories.push(e.theory.clone());
                    theories.len() - 1
                }
            };
            if !outcomes.contains(&outcome) {
                outcomes.push(outcome);
            }
            let worth = Worth {
                constant: e.value,
                per_person: e.per_x,
            };
            if entries.insert((id, outcome), worth).is_some() {
                return Err(TheoryError::InvalidTable(format!(
                    "duplicate entry {} / {outcome}",
                    e.theory
                )));
            }
        }
        WorthinessTable::new(file.name, theories, outcomes, entries)
    }

    pub fn to_toml(&self) -> String {
        let entry = self
            .entries
            .iter()
            .map(|((t, o), w)| TableEntry {
                theory: self.theories[*t].clone(),
                outcome: o.label().to_string(),
                value: w.constant,
                per_x: w.per_person,
            })
            .collect();
        toml::to_string(&TableFile {
            name: self.name.clone(),
            entry,
        })
        .expect("table serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    name: String,
    #[serde(default)]
    entry: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    theory: String,
    outcome: String,
    value: f64,
    #[serde(default)]
    per_x: f64,
}

/// Classic trolley: redirecting onto one bystander vs. letting X die.
pub fn classic_table() -> WorthinessTable {
    use Outcome::*;
    WorthinessTable::build(
        "classic",
        &[CrashIntoOne, CrashIntoX],
        &[
            ("utilitarianism", &[Worth::fixed(-1.0), Worth::per_person(-1.0)]),
            ("deontology", &[Worth::fixed(-1.0), Worth::fixed(0.0)]),
        ],
    )
}

/// Double trolley: push the large man, switch onto two, or do nothing.
pub fn double_table() -> WorthinessTable {
    use Outcome::*;
    WorthinessTable::build(
        "double",
        &[Push, CrashIntoTwo, CrashIntoX],
        &[
            (
                "utilitarianism",
                &[Worth::fixed(-1.0), Worth::fixed(-2.0), Worth::per_person(-1.0)],
            ),
            (
                "deontology",
                &[Worth::fixed(-4.0), Worth::fixed(-1.0), Worth::fixed(0.0)],
            ),
            (
                "altered-deontology",
                &[Worth::fixed(-1.0), Worth::fixed(-4.0), Worth::fixed(0.0)],
            ),
        ],
    )
}

/// Classic trolley plus a doomsday button nobody wants pressed.
pub fn doomsday_table() -> WorthinessTable {
    use Outcome::*;
    WorthinessTable::build(
        "doomsday",
        &[CrashIntoOne, CrashIntoX, Doomsday],
        &[
            (
                "utilitarianism",
                &[Worth::fixed(-1.0), Worth::per_person(-1.0), Worth::fixed(-300.0)],
            ),
            (
                "deontology",
                &[Worth::fixed(-1.0), Worth::fixed(0.0), Worth::fixed(-10.0)],
            ),
        ],
    )
}

/// Guard trolley: lying to the guard is needed before the push.
pub fn guard_table() -> WorthinessTable {
    use Outcome::*;
    WorthinessTable::build(
        "guard",
        &[Lie, Push, CrashIntoX],
        &[
            (
                "utilitarianism",
                &[Worth::fixed(0.0), Worth::fixed(-1.0), Worth::per_person(-1.0)],
            ),
            (
                "deontology",
                &[Worth::fixed(-0.5), Worth::fixed(-4.0), Worth::fixed(0.0)],
            ),
        ],
    )
}

/// A moral theory: a choice-worthiness function plus its discount.
///
/// The function is `scale * (sum of table entries of the transition's
/// events) + shift`, evaluated on every transition including plain moves.
#[derive(Debug, Clone, PartialEq)]
pub struct TheorySpec {
    pub id: usize,
    pub name: String,
    pub gamma: f64,
    row: BTreeMap<Outcome, Worth>,
    scale: f64,
    shift: f64,
}

impl TheorySpec {
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn worth(&self, outcome: Outcome) -> Result<Worth, TheoryError> {
        self.row
            .get(&outcome)
            .copied()
            .ok_or_else(|| TheoryError::MissingOutcome {
                theory: self.name.clone(),
                outcome,
            })
    }

    /// Choice-worthiness of a transition carrying `events` with X people at stake.
    pub fn evaluate(&self, events: &[Outcome], x_people: f64) -> Result<f64, TheoryError> {
        let mut raw = 0.0;
        for &e in events {
            raw += self.worth(e)?.at(x_people);
        }
        Ok(self.scale * raw + self.shift)
    }

    pub fn covers(&self, outcome: Outcome) -> bool {
        self.row.contains_key(&outcome)
    }
}

/// Returns the theory with worthiness `a * W + b`.
pub fn scale_theory(t: &TheorySpec, a: f64, b: f64) -> Result<TheorySpec, TheoryError> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(TheoryError::NonPositiveScale(a));
    }
    let mut out = t.clone();
    out.scale = a * t.scale;
    out.shift = a * t.shift + b;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Outcome::*;

    fn util(t: &WorthinessTable) -> TheorySpec {
        t.theory(t.theory_id("util").unwrap()).unwrap()
    }

    fn deont(t: &WorthinessTable) -> TheorySpec {
        t.theory(t.theory_id("deont").unwrap()).unwrap()
    }

    #[test]
    fn classic_values() {
        let t = classic_table();
        assert_eq!(util(&t).evaluate(&[CrashIntoX], 7.0).unwrap(), -7.0);
        assert_eq!(deont(&t).evaluate(&[CrashIntoX], 7.0).unwrap(), 0.0);
        assert_eq!(deont(&t).evaluate(&[CrashIntoOne], 7.0).unwrap(), -1.0);
        assert_eq!(util(&t).evaluate(&[], 7.0).unwrap(), 0.0);
    }

    #[test]
    fn double_values() {
        let t = double_table();
        assert_eq!(deont(&t).evaluate(&[Push], 5.0).unwrap(), -4.0);
        let alt = t.theory(t.theory_id("altered-deont").unwrap()).unwrap();
        assert_eq!(alt.evaluate(&[CrashIntoTwo], 5.0).unwrap(), -4.0);
        assert_eq!(alt.evaluate(&[Push], 5.0).unwrap(), -1.0);
        assert_eq!(util(&t).evaluate(&[CrashIntoX], 2.0).unwrap(), -2.0);
    }

    #[test]
    fn doomsday_values() {
        let t = doomsday_table();
        assert_eq!(util(&t).evaluate(&[Doomsday], 3.0).unwrap(), -300.0);
        assert_eq!(deont(&t).evaluate(&[Doomsday], 3.0).unwrap(), -10.0);
        assert_eq!(deont(&t).evaluate(&[CrashIntoX], 3.0).unwrap(), 0.0);
    }

    #[test]
    fn guard_values() {
        let t = guard_table();
        assert_eq!(deont(&t).evaluate(&[Lie], 3.0).unwrap(), -0.5);
        assert_eq!(util(&t).evaluate(&[Lie], 3.0).unwrap(), 0.0);
        assert_eq!(deont(&t).evaluate(&[Push], 3.0).unwrap(), -4.0);
    }

    #[test]
    fn missing_outcome_is_an_error() {
        let t = classic_table();
        assert!(matches!(
            util(&t).evaluate(&[Doomsday], 1.0),
            Err(TheoryError::MissingOutcome { .. })
        ));
        assert!(t.lookup(0, Push, 1.0).is_err());
    }

    #[test]
    fn boosted_deontology() {
        let d = scale_theory(&deont(&classic_table()), 10.0, 0.0).unwrap();
        assert_eq!(d.evaluate(&[CrashIntoOne], 4.0).unwrap(), -10.0);
    }

    #[test]
    fn scale_examples() {
        let t = classic_table();
        let u = util(&t);
        let same = scale_theory(&u, 1.0, 0.0).unwrap();
        for x in [1.0, 4.5, 10.0] {
            for ev in [&[][..], &[CrashIntoX][..], &[CrashIntoOne][..]] {
                assert_eq!(same.evaluate(ev, x).unwrap(), u.evaluate(ev, x).unwrap());
            }
        }
        let s = scale_theory(&u, 2.0, 3.0).unwrap();
        assert_eq!(s.evaluate(&[CrashIntoX], 4.0).unwrap(), -5.0);
        assert!(scale_theory(&u, 0.0, 1.0).is_err());
        assert!(scale_theory(&u, -2.0, 1.0).is_err());
    }

    #[test]
    fn credence_validation() {
        assert!(CredenceVector::new(vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            CredenceVector::new(vec![-0.1, 1.1]),
            Err(TheoryError::NegativeCredence { index: 0, .. })
        ));
        assert!(matches!(
            CredenceVector::new(vec![0.4, 0.4]),
            Err(TheoryError::NotNormalized(_))
        ));
        assert!(CredenceVector::new(vec![]).is_err());
        assert!(CredenceVector::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn abbreviations_resolve() {
        let t = double_table();
        assert_eq!(t.theory_id("util").unwrap(), 0);
        assert_eq!(t.theory_id("deontology").unwrap(), 1);
        assert_eq!(t.theory_id("altered-deont").unwrap(), 2);
        assert!(t.theory_id("kant").is_err());
        let picked = t.select(&["deont", "util"]).unwrap();
        assert_eq!(picked[0].name, "deontology");
        assert_eq!(picked[0].id, 0);
    }

    #[test]
    fn toml_round_trip() {
        for t in [classic_table(), double_table(), doomsday_table(), guard_table()] {
            let back = WorthinessTable::from_toml(&t.to_toml()).unwrap();
            assert_eq!(back.theories(), t.theories());
            for id in 0..t.num_theories() {
                for &o in t.outcomes() {
                    assert_eq!(back.worth(id, o).unwrap(), t.worth(id, o).unwrap());
                }
            }
        }
    }

    #[test]
    fn toml_rejects_incomplete_rows() {
        let text = r#"
            name = "broken"
            [[entry]]
            theory = "a"
            outcome = "push"
            value = -1.0
            [[entry]]
            theory = "b"
            outcome = "crash-into-x"
            value = 0.0
        "#;
        assert!(matches!(
            WorthinessTable::from_toml(text),
            Err(TheoryError::MissingOutcome { .. })
        ));
    }

    proptest! {
        #[test]
        fn scale_composes(a in 0.01f64..100.0, b in -10.0f64..10.0,
                          c in 0.01f64..100.0, d in -10.0f64..10.0,
                          x in 1.0f64..10.0, which in 0usize..3) {
            let u = util(&classic_table());
            let ev: &[Outcome] = [&[][..], &[CrashIntoX][..], &[CrashIntoOne][..]][which];
            let nested = scale_theory(&scale_theory(&u, a, b).unwrap(), c, d).unwrap();
            let direct = scale_theory(&u, a * c, c * b + d).unwrap();
            let (l, r) = (nested.evaluate(ev, x).unwrap(), direct.evaluate(ev, x).unwrap());
            prop_assert!((l - r).abs() <= 1e-9 * (1.0 + l.abs()));
        }

        #[test]
        fn sampled_credences_are_valid(seed in any::<u64>(), n in 1usize..6) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = CredenceVector::sample(&mut rng, n);
            prop_assert!(CredenceVector::new(c.values().to_vec()).is_ok());
        }
    }
}
