//! One PASS/FAIL line per acceptance criterion.
//!
//! Lines are written straight to stdout so they appear in the normal
//! `cargo test` log without `--nocapture`.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moral_core::approx::{Checkpoint, Mlp, OutputActivation, UpdateRule};
use moral_core::envs::{bandit_of, Bandit, Gridworld, Problem, Variant};
use moral_core::mec::boosted;
use moral_core::nash_voting::{budget_scaling_demo, forced_affine_votes, CostFn, NashConfig, NashTrainer};
use moral_core::oracle::{
    bandit_mdp, boundary_oracle, cycling_mdp, exact_q, exact_sigma, variance_fixed_point, FixedPoint,
    OracleMethod, Policy,
};
use moral_core::sweep::{default_axes, diff_grids, run_sweep, BoundaryGrid, GridMeta};
use moral_core::theories::scale_theory;
use moral_core::variance_voting::{normalized_votes, vote, Bootstrap, SarsaConfig, SarsaTrainer, VOTE_EPSILON};
use moral_core::{Choice, Execution, TheorySpec};

const GRID: usize = 60;

const TOL_CYCLE_VOTE: f64 = 1e-4;
const TOL_CYCLE_SIGMA: f64 = 1e-9;
const TOL_SHARE: f64 = 1e-4;
const TOL_FORCED: f64 = 1e-9;
const RESCALINGS: usize = 200;
const MIN_AGREEMENT: f64 = 0.90;
const MAX_MONOTONE_VIOLATIONS: f64 = 0.05;
const MAX_NASH_SWITCH: f64 = 0.02;
const MIN_VARIANCE_SWITCH: f64 = 0.10;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_CASES_PER_NET: usize = 100;

const SARSA_STEPS: u64 = 500_000;
const SARSA_BUDGET: Duration = Duration::from_secs(600);
const GRID_SARSA_STEPS: u64 = 300_000;
const NASH_STEPS: u64 = 1_000_000;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn exact() -> OracleMethod {
    OracleMethod::Variance {
        bootstrap: Bootstrap::Sarsa,
        eps: VOTE_EPSILON,
    }
}

fn pair(p: Problem) -> Vec<TheorySpec> {
    p.table().select(&["util", "deont"]).unwrap()
}

fn oracle(bandit: &Bandit, theories: &[TheorySpec], method: OracleMethod) -> BoundaryGrid {
    let (c, x) = default_axes(GRID, GRID);
    boundary_oracle(bandit, theories, c, x, method, GridMeta::default(), Execution::Parallel).unwrap()
}

fn single(p: Problem) -> Bandit {
    bandit_of(Variant::single(p))
}

fn c1_cycling() -> Outcome {
    let t0 = Instant::now();
    let mdp = cycling_mdp();
    let p = Policy::deterministic(&mdp, &[0, 0, 0]);
    let s2 = exact_sigma(&mdp, &p, Bootstrap::Sarsa);
    let q = exact_q(&mdp, &p);
    let total = vote(&rows_at(&q, &[0])[0], &s2, &[0.5, 0.5], 0.0).total[0];
    // Hand-derived: s₀ rows (0, 100) and (100, 0); s₁ rows (0, −4), (100, 80).
    let want_s2: [f64; 2] = [(2500.0 + 4.0) / 2.0, (2500.0 + 100.0) / 2.0];
    let want_vote = 0.5 * (-50.0 / want_s2[0].sqrt() + 50.0 / want_s2[1].sqrt());
    let cycle = match variance_fixed_point(&mdp, &[0.5, 0.5], 0.0, Bootstrap::Sarsa, vec![0, 0, 0], 16) {
        FixedPoint::Cycle { policies, .. } => policies.len(),
        _ => 0,
    };
    let dt = t0.elapsed();
    ensure(
        (s2[0] - 1252.0).abs() < TOL_CYCLE_SIGMA
            && (s2[1] - 1300.0).abs() < TOL_CYCLE_SIGMA
            && (s2[0] - want_s2[0]).abs() < TOL_CYCLE_SIGMA
            && (total - -0.01317).abs() < TOL_CYCLE_VOTE
            && (total - want_vote).abs() < 1e-12
            && cycle == 2
            && dt < Duration::from_secs(1),
        format!("sigma2 = {s2:?}, vote(a0) = {total:.5}, cycle period {cycle}, {dt:?}"),
    )
}

fn c2_budget_scaling() -> Outcome {
    let t0 = Instant::now();
    let r = budget_scaling_demo();
    let dt = t0.elapsed();
    let un = r.budget_scaling_unsplit.switch;
    let sp = r.budget_scaling_split.nothing;
    let want_un = 0.6f64.sqrt() / (0.6f64.sqrt() + 0.4f64.sqrt());
    let want_sp = 2.0 * 0.2f64.sqrt() / (2.0 * 0.2f64.sqrt() + 0.6f64.sqrt());
    ensure(
        (un - 0.5505).abs() < TOL_SHARE
            && (sp - 0.5359).abs() < TOL_SHARE
            && (un - want_un).abs() < 1e-12
            && (sp - want_sp).abs() < 1e-12
            && r.individuation_invariant()
            && dt < Duration::from_secs(1),
        format!(
            "unsplit switch {un:.4}, split nothing {sp:.4}, vote scaling invariant {}, {dt:?}",
            r.individuation_invariant()
        ),
    )
}

/// `q[theory][state]` regrouped as `[state][theory]` for `states`.
fn rows_at(q: &[Vec<Vec<f64>>], states: &[usize]) -> Vec<Vec<Vec<f64>>> {
    states.iter().map(|&s| q.iter().map(|t| t[s].clone()).collect()).collect()
}

/// Largest gap between forced votes and normalized votes, and the largest
/// budget residual, for a visited-state sequence taken from `q`.
fn forced_gap(rows: &[Vec<Vec<f64>>], s2: &[f64]) -> (f64, f64) {
    let f = forced_affine_votes(rows);
    let mut gap: f64 = 0.0;
    for (s, state) in rows.iter().enumerate() {
        for (i, r) in state.iter().enumerate() {
            let want = normalized_votes(r, s2[i], 0.0);
            for (a, w) in want.iter().enumerate() {
                gap = gap.max((f.votes[s][i][a] - w).abs());
            }
        }
    }
    let residual = f.cost.iter().map(|c| (c - f.budget).abs()).fold(0.0, f64::max);
    (gap, residual)
}

fn c3_forced_votes() -> Outcome {
    let mdp = cycling_mdp();
    let p = Policy::deterministic(&mdp, &[0, 0, 0]);
    let q = exact_q(&mdp, &p);
    let s2 = exact_sigma(&mdp, &p, Bootstrap::Sarsa);
    let visited = rows_at(&q, &[0, 1]);
    let (g1, r1) = forced_gap(&visited, &s2);
    let alpha = forced_affine_votes(&visited).alpha;
    let alpha_ok = (alpha[0] - 1252f64.sqrt()).abs() < 1e-9 && (alpha[1] - 1300f64.sqrt()).abs() < 1e-9;

    let bandit = single(Problem::Classic);
    let n = 50;
    let xs: Vec<(f64, f64)> = (0..n).map(|j| (1.0 + 9.0 * (j as f64 + 0.5) / n as f64, 1.0 / n as f64)).collect();
    let bmdp = bandit_mdp(&bandit, &pair(Problem::Classic), &xs).unwrap();
    let bp = Policy::deterministic(&bmdp, &vec![0; bmdp.states().len()]);
    let bq = exact_q(&bmdp, &bp);
    let bs2 = exact_sigma(&bmdp, &bp, Bootstrap::Sarsa);
    let states: Vec<usize> = (0..bmdp.states().len()).collect();
    let (g2, r2) = forced_gap(&rows_at(&bq, &states), &bs2);
    let gap = g1.max(g2);
    let residual = r1.max(r2);
    ensure(
        gap <= TOL_FORCED && residual <= TOL_FORCED && alpha_ok,
        format!("max |forced - normalized| = {gap:.2e}, max |cost - n k| = {residual:.2e}, alpha = {alpha:?}"),
    )
}

fn c4_scale_invariance() -> Outcome {
    let bandit = single(Problem::Classic);
    let base_theories = pair(Problem::Classic);
    let base = oracle(&bandit, &base_theories, exact());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut changed_runs = 0;
    let mut worst = 0;
    for _ in 0..RESCALINGS {
        let which = rng.random_range(0..2);
        let a = 10f64.powf(rng.random_range(-2.0..=2.0));
        let b = rng.random_range(-10.0..10.0);
        let mut th = base_theories.clone();
        th[which] = scale_theory(&th[which], a, b).unwrap();
        let g = oracle(&bandit, &th, exact());
        let d = diff_grids(&base, &g).unwrap().changed;
        if d > 0 {
            changed_runs += 1;
            worst = worst.max(d);
        }
    }
    let mec_base = oracle(&bandit, &base_theories, OracleMethod::Mec);
    let mut th = base_theories.clone();
    th[1] = boosted(&th[1], 10.0).unwrap();
    let mec_boost = oracle(&bandit, &th, OracleMethod::Mec);
    let flips = diff_grids(&mec_base, &mec_boost).unwrap().changed;
    ensure(
        changed_runs == 0 && flips >= 1,
        format!("{changed_runs}/{RESCALINGS} rescalings moved a cell (worst {worst}), MEC boosted-deontology flips {flips} cells"),
    )
}

fn c5_pareto() -> Outcome {
    let doom = oracle(&single(Problem::Doomsday), &pair(Problem::Doomsday), exact());
    let guard = single(Problem::Guard);
    let local = oracle(&guard, &pair(Problem::Guard), exact());
    let maxq = oracle(
        &guard,
        &pair(Problem::Guard),
        OracleMethod::Variance {
            bootstrap: Bootstrap::MaxQ,
            eps: VOTE_EPSILON,
        },
    );
    let d = doom.count(Choice::Doomsday);
    let l = local.count(Choice::LieOnly);
    let m = maxq.count(Choice::LieOnly);
    ensure(
        d == 0 && l == 0 && m >= 1,
        format!("doomsday cells {d}, local-SARSA lie-only cells {l}, Q-learning lie-only cells {m}"),
    )
}

fn c6_iia() -> Outcome {
    let classic = oracle(&single(Problem::Classic), &pair(Problem::Classic), exact());
    let doom = oracle(&single(Problem::Doomsday), &pair(Problem::Doomsday), exact());
    let d = diff_grids(&classic, &doom).unwrap();
    let s2n = d.count(Choice::Switch, Choice::Nothing);
    ensure(
        d.changed > 0 && s2n == d.changed,
        format!("{} cells differ, {} of them switch -> nothing", d.changed, s2n),
    )
}

/// First column labelled `c` in `row`, or `cols` when there is none.
fn first_col(g: &BoundaryGrid, row: usize, c: Choice) -> usize {
    (0..g.cols()).find(|&col| g.get(row, col) == c).unwrap_or(g.cols())
}

fn c7_stakes() -> Outcome {
    let bandit = single(Problem::Classic);
    let theories = pair(Problem::Classic);
    let g = oracle(&bandit, &theories, exact());
    let (cred, xs) = default_axes(GRID, GRID);

    // Brute force: σ² by a fine midpoint rule over X ~ U(1, 10), then the
    // vote at every cell.
    let m = 200_000;
    let mut s2 = [0.0; 2];
    for j in 0..m {
        let x = 1.0 + 9.0 * (j as f64 + 0.5) / m as f64;
        s2[0] += ((x - 1.0) / 2.0).powi(2) / m as f64;
        s2[1] += 0.25 / m as f64;
    }
    let mut worst_closed = 0usize;
    let mut worst_brute = 0usize;
    for (row, &x) in xs.iter().enumerate() {
        let closed = (27f64.sqrt()) / (27f64.sqrt() + (x - 1.0));
        let closed_col = cred.iter().position(|&c| c > closed).unwrap_or(GRID);
        let brute_col = cred
            .iter()
            .position(|&c| {
                let rows = [vec![-x, -1.0], vec![0.0, -1.0]];
                vote(&rows, &s2, &[c, 1.0 - c], VOTE_EPSILON).chosen.0 == 1
            })
            .unwrap_or(GRID);
        let got = first_col(&g, row, Choice::Switch);
        worst_closed = worst_closed.max(got.abs_diff(closed_col));
        worst_brute = worst_brute.max(brute_col.abs_diff(closed_col));
    }

    let nash = oracle(&bandit, &theories, OracleMethod::NashOneShot { cost: CostFn::Absolute });
    let mut nash_ok = true;
    for (row, &x) in xs.iter().enumerate() {
        for (col, &c) in cred.iter().enumerate() {
            let want = if x > 1.0 && c > 0.5 { Choice::Switch } else { Choice::Nothing };
            nash_ok &= nash.get(row, col) == want;
        }
    }
    ensure(
        worst_closed <= 1 && worst_brute <= 1 && nash_ok,
        format!(
            "oracle vs closed form off by at most {worst_closed} cell(s), brute force vs closed form {worst_brute}, Nash one-shot vertical at 0.5: {nash_ok}"
        ),
    )
}

fn c8_learned() -> Outcome {
    let t0 = Instant::now();
    let bandit = single(Problem::Classic);
    let theories = pair(Problem::Classic);
    let config = SarsaConfig {
        total_steps: SARSA_STEPS,
        seed: 8,
        ..Default::default()
    };
    let mut t = SarsaTrainer::new(&bandit, theories.clone(), config.clone(), Execution::Parallel).unwrap();
    t.train_until(u64::MAX, |_| {}).unwrap();
    let (c, x) = default_axes(GRID, GRID);
    let learned = run_sweep(&bandit, &t.agent(), &theories, c, x, GridMeta::default(), Execution::Parallel).unwrap();
    let truth = oracle(&bandit, &theories, exact());
    let agreement = 1.0 - diff_grids(&learned, &truth).unwrap().fraction;
    let dt = t0.elapsed();

    let world = Gridworld::new(Variant::single(Problem::Classic));
    let gconfig = SarsaConfig {
        total_steps: GRID_SARSA_STEPS,
        ..config
    };
    let mut gt = SarsaTrainer::new(&world, theories.clone(), gconfig, Execution::Parallel).unwrap();
    gt.train_until(u64::MAX, |_| {}).unwrap();
    let (c, x) = default_axes(GRID, GRID);
    let gg = run_sweep(&world, &gt.agent(), &theories, c, x, GridMeta::default(), Execution::Parallel).unwrap();
    let viol = gg.monotonicity_violations(Choice::Switch);
    ensure(
        agreement >= MIN_AGREEMENT && dt <= SARSA_BUDGET && viol <= MAX_MONOTONE_VIOLATIONS,
        format!(
            "bandit agreement {:.2}% in {dt:.1?}; gridworld switch {:.1}%, monotonicity violations {:.2}%",
            100.0 * agreement,
            100.0 * gg.fraction(Choice::Switch),
            100.0 * viol
        ),
    )
}

/// Rows in which `c` occupies one unbroken run of columns.
fn contiguous_rows(g: &BoundaryGrid, c: Choice) -> (usize, usize) {
    let mut with = 0;
    let mut contiguous = 0;
    for row in 0..g.rows() {
        let cols: Vec<usize> = (0..g.cols()).filter(|&col| g.get(row, col) == c).collect();
        if let (Some(&a), Some(&b)) = (cols.first(), cols.last()) {
            with += 1;
            contiguous += (b - a + 1 == cols.len()) as usize;
        }
    }
    (with, contiguous)
}

fn c9_no_compromise() -> Outcome {
    let bandit = single(Problem::Double);
    let theories = pair(Problem::Double);
    let config = NashConfig {
        total_steps: NASH_STEPS,
        seed: 1,
        ..Default::default()
    };
    let mut t = NashTrainer::new(&bandit, theories.clone(), config, Execution::Parallel).unwrap();
    t.train_until(u64::MAX, |_| {}).unwrap();
    let (c, x) = default_axes(GRID, GRID);
    let nash = run_sweep(&bandit, &t.agent(), &theories, c, x, GridMeta::default(), Execution::Parallel).unwrap();
    let nash_switch = nash.fraction(Choice::Switch);

    let exact_grid = oracle(&bandit, &theories, exact());
    let var_switch = exact_grid.fraction(Choice::Switch);
    let (with, contiguous) = contiguous_rows(&exact_grid, Choice::Switch);
    // The band's left edge moves towards lower utilitarian credence as X grows.
    let edges: Vec<usize> = (0..exact_grid.rows())
        .map(|r| first_col(&exact_grid, r, Choice::Switch))
        .filter(|&c| c < GRID)
        .collect();
    let diagonal = edges.windows(2).all(|w| w[1] <= w[0]) && edges.first() != edges.last();
    ensure(
        nash_switch <= MAX_NASH_SWITCH
            && var_switch >= MIN_VARIANCE_SWITCH
            && with > 0
            && contiguous == with
            && diagonal,
        format!(
            "trained Nash switch {:.2}%; exact variance switch {:.1}% in {with} rows, contiguous in {contiguous}, diagonal {diagonal}",
            100.0 * nash_switch,
            100.0 * var_switch
        ),
    )
}

/// Central-difference check of one random network, input and loss.
fn fd_case(rng: &mut ChaCha8Rng, width: usize, act: OutputActivation) -> f64 {
    let input = rng.random_range(2..8);
    let out = rng.random_range(1..5);
    let mut net = Mlp::with_hidden(input, &[width, width], out, act, rng).unwrap();
    // Move biases off zero so no unit sits on the rectifier's kink.
    for p in net.params_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let x: Vec<f64> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |y: &[f64]| -> f64 {
        y.iter()
            .zip(&w)
            .zip(&target)
            .map(|((y, w), t)| w * (y - t) * (y - t) + 0.3 * y)
            .sum()
    };
    let (_, g) = net
        .grad(&x, |y| {
            let d = y
                .iter()
                .zip(&w)
                .zip(&target)
                .map(|((y, w), t)| 2.0 * w * (y - t) + 0.3)
                .collect();
            (loss(y), d)
        })
        .unwrap();
    let mut fd = vec![0.0; g.len()];
    for i in 0..g.len() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + FD_STEP;
        let up = loss(&net.forward(&x).unwrap());
        net.params_mut()[i] = orig - FD_STEP;
        let down = loss(&net.forward(&x).unwrap());
        net.params_mut()[i] = orig;
        fd[i] = (up - down) / (2.0 * FD_STEP);
    }
    let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn c10_infrastructure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for width in [32, 64] {
        for act in [OutputActivation::Identity, OutputActivation::Exp] {
            for _ in 0..FD_CASES_PER_NET {
                worst = worst.max(fd_case(&mut rng, width, act));
                cases += 1;
            }
        }
    }

    let bandit = single(Problem::Guard);
    let theories = pair(Problem::Guard);
    let sarsa = SarsaConfig {
        total_steps: 5_000,
        seed: 10,
        rule: UpdateRule::Adam,
        ..Default::default()
    };
    let run_sarsa = |exec| {
        let mut t = SarsaTrainer::new(&bandit, theories.clone(), sarsa.clone(), exec).unwrap();
        t.train_until(u64::MAX, |_| {}).unwrap();
        t.checkpoint()
    };
    let a = run_sarsa(Execution::Sequential);
    let b = run_sarsa(Execution::Sequential);
    let p = run_sarsa(Execution::Parallel);
    let double = single(Problem::Double);
    let dtheories = pair(Problem::Double);
    let nash = NashConfig {
        total_steps: 2_048,
        rollout: 64,
        seed: 10,
        ..Default::default()
    };
    let run_nash = |exec| {
        let mut t = NashTrainer::new(&double, dtheories.clone(), nash.clone(), exec).unwrap();
        t.train_until(u64::MAX, |_| {}).unwrap();
        t.checkpoint()
    };
    let na = run_nash(Execution::Sequential);
    let nb = run_nash(Execution::Sequential);
    let reruns = a.to_bytes() == b.to_bytes() && a.to_bytes() == p.to_bytes() && na.to_bytes() == nb.to_bytes();

    let dir = tempfile::tempdir().unwrap();
    let mut round = true;
    for (name, ck) in [("sarsa", &a), ("nash", &na)] {
        let path = dir.path().join(format!("{name}.ckpt"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        round &= &back == ck && back.to_bytes() == ck.to_bytes();
    }
    ensure(
        worst <= FD_REL_TOL && cases >= 4 * FD_CASES_PER_NET && reruns && round,
        format!(
            "{cases} finite-difference cases, worst relative error {worst:.2e}; single-thread reruns bit-exact {reruns}; checkpoint round trip bit-exact {round}"
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("cycling worked example", c1_cycling),
        ("budget scaling worked example", c2_budget_scaling),
        ("forced votes equal variance votes", c3_forced_votes),
        ("scale invariance", c4_scale_invariance),
        ("Pareto and dominated actions", c5_pareto),
        ("IIA violation witness", c6_iia),
        ("stakes sensitivity", c7_stakes),
        ("learned vs oracle", c8_learned),
        ("no compromise contrast", c9_no_compromise),
        ("infrastructure", c10_infrastructure),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let line = format!("criterion {:>2} {tag} {name}: {detail} [{:.1?}]\n", i + 1, t0.elapsed());
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if r.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
