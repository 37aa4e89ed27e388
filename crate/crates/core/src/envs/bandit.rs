use serde::Serialize;

use super::{grid::sample_x, ActionId, Choice, EnvError, Environment, Problem, Transition, Variant};
use crate::theories::Outcome;

/// Effect of one action at a decision node.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditEdge {
    /// Non-resolving events, such as a lie.
    pub events: Vec<Outcome>,
    /// Resolves the problem with this outcome.
    pub resolution: Option<Outcome>,
    /// Next node when not resolving.
    pub next: Option<usize>,
}

impl BanditEdge {
    fn resolve(o: Outcome) -> Self {
        BanditEdge {
            events: Vec::new(),
            resolution: Some(o),
            next: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditNode {
    pub edges: Vec<BanditEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BanditState {
    pub node: usize,
    pub x_people: f64,
    pub lied: bool,
    pub resolved: bool,
    pub problems_remaining: u32,
    pub iteration: u32,
    pub step: usize,
    pub seed: u64,
}

/// Decision-tree abstraction of a gridworld: each node is a point where
/// the agent's choice matters, each edge one affordance.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandit {
    variant: Variant,
    nodes: Vec<BanditNode>,
    num_actions: usize,
}

/// The bandit abstraction of `variant`.
pub fn bandit_of(variant: Variant) -> Bandit {
    use Outcome::*;
    let nodes = match variant.problem {
        Problem::Classic => vec![BanditNode {
            edges: vec![BanditEdge::resolve(CrashIntoX), BanditEdge::resolve(CrashIntoOne)],
        }],
        Problem::Double => vec![BanditNode {
            edges: vec![
                BanditEdge::resolve(CrashIntoX),
                BanditEdge::resolve(CrashIntoTwo),
                BanditEdge::resolve(Push),
            ],
        }],
        Problem::Doomsday => vec![BanditNode {
            edges: vec![
                BanditEdge::resolve(CrashIntoX),
                BanditEdge::resolve(CrashIntoOne),
                BanditEdge::resolve(Doomsday),
            ],
        }],
        Problem::Guard => vec![
            BanditNode {
                edges: vec![
                    BanditEdge::resolve(CrashIntoX),
                    BanditEdge {
                        events: vec![Lie],
                        resolution: None,
                        next: Some(1),
                    },
                ],
            },
            BanditNode {
                edges: vec![BanditEdge::resolve(CrashIntoX), BanditEdge::resolve(Push)],
            },
        ],
    };
    Bandit::new(variant, nodes)
}

impl Bandit {
    pub fn new(variant: Variant, nodes: Vec<BanditNode>) -> Self {
        let num_actions = nodes.iter().map(|n| n.edges.len()).max().unwrap_or(0);
        Bandit {
            variant,
            nodes,
            num_actions,
        }
    }

    pub fn single(problem: Problem) -> Self {
        bandit_of(Variant::single(problem))
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn nodes(&self) -> &[BanditNode] {
        &self.nodes
    }

    /// Actions available at `node`; indices past this are invalid there.
    pub fn actions_at(&self, node: usize) -> usize {
        self.nodes[node].edges.len()
    }

    fn depth(&self) -> usize {
        fn walk(nodes: &[BanditNode], i: usize) -> usize {
            1 + nodes[i]
                .edges
                .iter()
                .filter_map(|e| e.next)
                .map(|n| walk(nodes, n))
                .max()
                .unwrap_or(0)
        }
        walk(&self.nodes, 0)
    }
}

impl Environment for Bandit {
    type State = BanditState;

    fn problem(&self) -> Problem {
        self.variant.problem
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn horizon(&self) -> usize {
        self.depth() * self.variant.iterations as usize
    }

    fn iterations(&self) -> u32 {
        self.variant.iterations
    }

    fn reset(&self, seed: u64, x_override: Option<f64>) -> BanditState {
        BanditState {
            node: 0,
            x_people: x_override.unwrap_or_else(|| sample_x(seed, 0)),
            lied: false,
            resolved: false,
            problems_remaining: self.variant.iterations,
            iteration: 0,
            step: 0,
            seed,
        }
    }

    fn step(&self, s: &BanditState, action: ActionId) -> Result<Transition<BanditState>, EnvError> {
        if s.resolved {
            return Err(EnvError::Terminal);
        }
        let node = &self.nodes[s.node];
        let edge = node.edges.get(action.0).ok_or(EnvError::InvalidAction {
            action: action.0,
            num_actions: node.edges.len(),
        })?;
        let mut next = s.clone();
        next.step += 1;
        let mut events = edge.events.clone();
        if events.contains(&Outcome::Lie) {
            next.lied = true;
        }
        let mut choice = None;
        let mut done = false;
        match (edge.resolution, edge.next) {
            (Some(o), _) => {
                events.push(o);
                choice = Some(Choice::from_resolution(o, next.lied));
                if s.problems_remaining > 1 {
                    next.iteration += 1;
                    next.problems_remaining -= 1;
                    next.node = 0;
                    next.lied = false;
                    next.x_people = sample_x(s.seed, next.iteration);
                } else {
                    next.problems_remaining = 0;
                    next.resolved = true;
                    done = true;
                }
            }
            (None, Some(n)) => next.node = n,
            (None, None) => {}
        }
        Ok(Transition {
            state: s.clone(),
            action,
            next_state: next,
            events,
            outcome: edge.resolution,
            choice,
            x_people: s.x_people,
            done,
        })
    }

    fn is_terminal(&self, s: &BanditState) -> bool {
        s.resolved
    }

    fn x_people(&self, s: &BanditState) -> f64 {
        s.x_people
    }

    fn problems_remaining(&self, s: &BanditState) -> u32 {
        s.problems_remaining
    }

    fn feature_len(&self) -> usize {
        self.nodes.len()
    }

    fn write_features(&self, s: &BanditState, out: &mut Vec<f64>) {
        out.extend((0..self.nodes.len()).map(|i| if i == s.node { 1.0 } else { 0.0 }));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{worthiness_of, Gridworld};

    /// Every action sequence of a gridworld, grouped by (choice, return).
    fn grid_outcomes(problem: Problem, x: f64) -> Vec<(Choice, Vec<f64>)> {
        let g = Gridworld::new(Variant::single(problem));
        let table = problem.table();
        let mut found = Vec::new();
        let mut stack = vec![(g.reset(0, Some(x)), vec![0.0; table.num_theories()])];
        while let Some((s, ret)) = stack.pop() {
            for a in 0..g.num_actions() {
                let t = g.step(&s, ActionId(a)).unwrap();
                let mut r = ret.clone();
                for (i, v) in r.iter_mut().enumerate() {
                    *v += worthiness_of(&t, &table, i).unwrap();
                }
                if t.done {
                    let entry = (t.choice.unwrap(), r);
                    if !found.contains(&entry) {
                        found.push(entry);
                    }
                } else {
                    stack.push((t.next_state, r));
                }
            }
        }
        found.sort_by(|a, b| a.0.cmp(&b.0));
        found
    }

    fn bandit_outcomes(problem: Problem, x: f64) -> Vec<(Choice, Vec<f64>)> {
        let b = Bandit::single(problem);
        let table = problem.table();
        let mut found = Vec::new();
        let mut stack = vec![(b.reset(0, Some(x)), vec![0.0; table.num_theories()])];
        while let Some((s, ret)) = stack.pop() {
            for a in 0..b.actions_at(s.node) {
                let t = b.step(&s, ActionId(a)).unwrap();
                let mut r = ret.clone();
                for (i, v) in r.iter_mut().enumerate() {
                    *v += worthiness_of(&t, &table, i).unwrap();
                }
                if t.done {
                    found.push((t.choice.unwrap(), r));
                } else {
                    stack.push((t.next_state, r));
                }
            }
        }
        found.sort_by(|a, b| a.0.cmp(&b.0));
        found
    }

    #[test]
    fn bandit_matches_gridworld_returns() {
        for p in Problem::ALL {
            for x in [1.0, 3.7, 10.0] {
                assert_eq!(grid_outcomes(p, x), bandit_outcomes(p, x), "{p} at x={x}");
            }
        }
    }

    #[test]
    fn guard_lie_then_decline() {
        let b = Bandit::single(Problem::Guard);
        let s = b.reset(0, Some(4.0));
        let t = b.step(&s, ActionId(1)).unwrap();
        assert_eq!(t.events, vec![Outcome::Lie]);
        assert!(!t.done);
        let t = b.step(&t.next_state, ActionId(0)).unwrap();
        assert_eq!(t.choice, Some(Choice::LieOnly));
        assert!(t.done);
    }

    #[test]
    fn invalid_action_rejected() {
        let b = Bandit::single(Problem::Classic);
        let s = b.reset(0, None);
        assert!(matches!(b.step(&s, ActionId(2)), Err(EnvError::InvalidAction { .. })));
    }

    #[test]
    fn iterated_bandit_runs_m_problems() {
        let b = bandit_of("double-iterated-3".parse().unwrap());
        assert_eq!(b.horizon(), 3);
        let mut s = b.reset(9, Some(2.0));
        let mut xs = Vec::new();
        while !b.is_terminal(&s) {
            xs.push(s.x_people);
            s = b.step(&s, ActionId(2)).unwrap().next_state;
        }
        assert_eq!(xs.len(), 3);
        assert_eq!(xs[0], 2.0);
        assert_eq!(xs[1], sample_x(9, 1));
    }
}
