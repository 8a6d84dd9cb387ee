//! Seeded tabular environments.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Error, Result};
use crate::Rng;

/// Rollouts longer than this are reported as [`Error::RolloutOverflow`].
pub const MAX_ROLLOUT_STEPS: usize = 10_000;

/// Law of the reward paid on one transition.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum RewardSpec {
    Constant {
        value: f64,
    },
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// `(weight, mean, std)` triples.
    GaussianMixture {
        components: Vec<(f64, f64, f64)>,
    },
}

impl RewardSpec {
    pub fn constant(value: f64) -> Self {
        Self::Constant { value }
    }

    pub fn gaussian(mean: f64, std: f64) -> Self {
        Self::Gaussian { mean, std }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Constant { value } if value.is_finite() => Ok(()),
            Self::Constant { value } => Err(domain(format!("reward {value} is not finite"))),
            Self::Gaussian { mean, std } => check_gaussian(*mean, *std),
            Self::GaussianMixture { components } => {
                if components.is_empty() {
                    return Err(domain("reward mixture has no components"));
                }
                let total: f64 = components.iter().map(|c| c.0).sum();
                if components.iter().any(|c| !(c.0 >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                    return Err(domain("reward mixture weights must be a probability vector"));
                }
                components.iter().try_for_each(|&(_, m, s)| check_gaussian(m, s))
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Gaussian { mean, .. } => *mean,
            Self::GaussianMixture { components } => components.iter().map(|c| c.0 * c.1).sum(),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Gaussian { mean, std } => mean + std * normal(rng),
            Self::GaussianMixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = components[components.len() - 1];
                for &c in components {
                    acc += c.0;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                pick.1 + pick.2 * normal(rng)
            }
        }
    }
}

fn check_gaussian(mean: f64, std: f64) -> Result<()> {
    if mean.is_finite() && std.is_finite() && std > 0.0 {
        Ok(())
    } else {
        Err(domain(format!("invalid Gaussian reward N({mean}, {std})")))
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One possible result of taking an action.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Outcome {
    pub next_state: usize,
    pub probability: f64,
    pub reward: RewardSpec,
}

/// Replay record of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

/// Finite MDP with categorical transitions and per-outcome reward laws.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Row `state * n_actions + action`.
    outcomes: Vec<Vec<Outcome>>,
    terminal: Vec<bool>,
    gamma: f64,
    start: usize,
}

impl TabularMdp {
    /// Validates the model. Terminal states are given a zero-reward self-loop
    /// for every action, whatever rows were supplied for them.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        mut outcomes: Vec<Vec<Outcome>>,
        terminal: Vec<bool>,
        gamma: f64,
        start: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(domain("MDP needs at least one state and one action"));
        }
        if outcomes.len() != n_states * n_actions {
            return Err(Error::Dimension {
                expected: n_states * n_actions,
                got: outcomes.len(),
            });
        }
        if terminal.len() != n_states {
            return Err(Error::Dimension {
                expected: n_states,
                got: terminal.len(),
            });
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(domain(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if start >= n_states || terminal[start] {
            return Err(domain(format!(
                "start state {start} must be a valid non-terminal state"
            )));
        }
        for (row_index, row) in outcomes.iter_mut().enumerate() {
            let state = row_index / n_actions;
            if terminal[state] {
                *row = vec![Outcome {
                    next_state: state,
                    probability: 1.0,
                    reward: RewardSpec::constant(0.0),
                }];
                continue;
            }
            let mut total = 0.0;
            for o in row.iter() {
                if o.next_state >= n_states {
                    return Err(domain(format!("next state {} out of range", o.next_state)));
                }
                if !(o.probability >= 0.0) {
                    return Err(domain("transition probabilities must be non-negative"));
                }
                o.reward.validate()?;
                total += o.probability;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(domain(format!("transition row {row_index} sums to {total}")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            outcomes,
            terminal,
            gamma,
            start,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn terminal_flags(&self) -> &[bool] {
        &self.terminal
    }

    pub fn outcomes(&self, state: usize, action: usize) -> &[Outcome] {
        &self.outcomes[state * self.n_actions + action]
    }

    /// Same MDP with a different discount.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(domain(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn non_terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states).filter(|&s| !self.terminal[s])
    }

    fn check_ids(&self, state: usize, action: usize) -> Result<()> {
        if state >= self.n_states {
            return Err(Error::Dimension {
                expected: self.n_states,
                got: state,
            });
        }
        if action >= self.n_actions {
            return Err(Error::Dimension {
                expected: self.n_actions,
                got: action,
            });
        }
        Ok(())
    }
}

/// Sample one transition from a non-terminal state.
pub fn step(mdp: &TabularMdp, state: usize, action: usize, rng: &mut Rng) -> Result<Transition> {
    mdp.check_ids(state, action)?;
    if mdp.is_terminal(state) {
        return Err(Error::TerminalState(state));
    }
    let row = mdp.outcomes(state, action);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = &row[row.len() - 1];
    for o in row {
        acc += o.probability;
        if u < acc {
            chosen = o;
            break;
        }
    }
    Ok(Transition {
        state,
        action,
        reward: chosen.reward.sample(rng),
        next_state: chosen.next_state,
        done: mdp.is_terminal(chosen.next_state),
    })
}

/// Discounted returns of `n_rollouts` episodes that take `action` in `state`
/// and then follow `policy` (one action per state).
pub fn true_return_distribution(
    mdp: &TabularMdp,
    state: usize,
    action: usize,
    policy: &[usize],
    n_rollouts: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if n_rollouts == 0 {
        return Err(domain("need at least one rollout"));
    }
    if policy.len() != mdp.n_states() {
        return Err(Error::Dimension {
            expected: mdp.n_states(),
            got: policy.len(),
        });
    }
    let mut out = Vec::with_capacity(n_rollouts);
    for _ in 0..n_rollouts {
        let mut t = step(mdp, state, action, rng)?;
        let mut ret = t.reward;
        let mut discount = 1.0;
        let mut steps = 1;
        while !t.done {
            if steps >= MAX_ROLLOUT_STEPS {
                return Err(Error::RolloutOverflow(MAX_ROLLOUT_STEPS));
            }
            discount *= mdp.gamma();
            t = step(mdp, t.next_state, policy[t.next_state], rng)?;
            ret += discount * t.reward;
            steps += 1;
        }
        out.push(ret);
    }
    Ok(out)
}

/// Optimal state values and a greedy policy (lowest action id on ties) from
/// value iteration on expected rewards, run until the sup-norm update is
/// below `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> (Vec<f64>, Vec<usize>) {
    let mut v = vec![0.0; mdp.n_states()];
    for _ in 0..max_iters {
        let mut delta = 0.0f64;
        let mut next = v.clone();
        for s in mdp.non_terminal_states() {
            let best = (0..mdp.n_actions())
                .map(|a| q_value(mdp, &v, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            next[s] = best;
        }
        v = next;
        if delta < tol {
            break;
        }
    }
    let policy = greedy_policy(mdp, |s, a| q_value(mdp, &v, s, a));
    (v, policy)
}

fn q_value(mdp: &TabularMdp, v: &[f64], s: usize, a: usize) -> f64 {
    mdp.outcomes(s, a)
        .iter()
        .map(|o| o.probability * (o.reward.mean() + mdp.gamma() * v[o.next_state]))
        .sum()
}

fn greedy_policy(mdp: &TabularMdp, q: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                return 0;
            }
            let mut best = (f64::NEG_INFINITY, 0);
            for a in 0..mdp.n_actions() {
                let qa = q(s, a);
                if qa > best.0 + 1e-12 {
                    best = (qa, a);
                }
            }
            best.1
        })
        .collect()
}

/// Probability that `policy`, started at the MDP's start state, enters
/// `goal` within `horizon` steps.
pub fn reach_probability(mdp: &TabularMdp, policy: &[usize], goal: usize, horizon: usize) -> f64 {
    let mut reach = vec![0.0; mdp.n_states()];
    reach[goal] = 1.0;
    for _ in 0..horizon {
        let mut next = reach.clone();
        for s in mdp.non_terminal_states() {
            next[s] = mdp
                .outcomes(s, policy[s])
                .iter()
                .map(|o| o.probability * reach[o.next_state])
                .sum();
        }
        reach = next;
    }
    reach[mdp.start()]
}

/// Largest probability of entering `goal` within `horizon` steps from the
/// start state, by finite-horizon value iteration, and a stationary policy
/// that is greedy for the full horizon.
pub fn optimal_reach_probability(mdp: &TabularMdp, goal: usize, horizon: usize) -> (f64, Vec<usize>) {
    let mut reach = vec![0.0; mdp.n_states()];
    reach[goal] = 1.0;
    let backup = |reach: &[f64], s: usize, a: usize| -> f64 {
        mdp.outcomes(s, a)
            .iter()
            .map(|o| o.probability * reach[o.next_state])
            .sum()
    };
    let mut policy = vec![0; mdp.n_states()];
    for _ in 0..horizon {
        let mut next = reach.clone();
        for s in mdp.non_terminal_states() {
            next[s] = (0..mdp.n_actions()).map(|a| backup(&reach, s, a)).fold(0.0, f64::max);
        }
        policy = greedy_policy(mdp, |s, a| backup(&reach, s, a));
        reach = next;
    }
    (reach[mdp.start()], policy)
}

fn chain(rewards: Vec<RewardSpec>, gamma: f64) -> Result<TabularMdp> {
    let n = rewards.len() + 1;
    let mut outcomes: Vec<Vec<Outcome>> = rewards
        .into_iter()
        .enumerate()
        .map(|(s, reward)| {
            vec![Outcome {
                next_state: s + 1,
                probability: 1.0,
                reward,
            }]
        })
        .collect();
    outcomes.push(Vec::new());
    let mut terminal = vec![false; n];
    terminal[n - 1] = true;
    TabularMdp::new(n, 1, outcomes, terminal, gamma, 0)
}

/// Three-state chain `s1 -> s2 -> s3`, one action, discount 0.9, with
/// rewards `N(r1, std)` and `N(r2, std)`.
pub fn make_mdp1_with(r1: f64, r2: f64, reward_std: f64) -> Result<TabularMdp> {
    chain(
        vec![
            RewardSpec::gaussian(r1, reward_std),
            RewardSpec::gaussian(r2, reward_std),
        ],
        0.9,
    )
}

/// [`make_mdp1_with`] at `r1 = -0.8`, `r2 = 0.3`, std 0.1.
pub fn make_mdp1() -> TabularMdp {
    make_mdp1_with(-0.8, 0.3, 0.1).expect("built-in MDP is valid")
}

/// One decision state that moves to either of two terminal states with
/// probability 1/2, paying `N(r_a, std)` or `N(r_b, std)`. Discount 0.9.
pub fn make_mdp2_with(r_a: f64, r_b: f64, reward_std: f64) -> Result<TabularMdp> {
    let outcomes = vec![
        vec![
            Outcome {
                next_state: 1,
                probability: 0.5,
                reward: RewardSpec::gaussian(r_a, reward_std),
            },
            Outcome {
                next_state: 2,
                probability: 0.5,
                reward: RewardSpec::gaussian(r_b, reward_std),
            },
        ],
        Vec::new(),
        Vec::new(),
    ];
    TabularMdp::new(3, 1, outcomes, vec![false, true, true], 0.9, 0)
}

/// [`make_mdp2_with`] at `0.8` / `0.3`, std 0.1.
pub fn make_mdp2() -> TabularMdp {
    make_mdp2_with(0.8, 0.3, 0.1).expect("built-in MDP is valid")
}

/// Four-state chain with zero rewards except the last step, which pays
/// `1/2 N(-2, std) + 1/2 N(2, std)`. The fifth state is the terminal sink.
/// Undiscounted.
pub fn make_mdp3_with(component_std: f64) -> Result<TabularMdp> {
    let zero = RewardSpec::constant(0.0);
    let last = RewardSpec::GaussianMixture {
        components: vec![(0.5, -2.0, component_std), (0.5, 2.0, component_std)],
    };
    chain(vec![zero.clone(), zero.clone(), zero, last], 1.0)
}

/// [`make_mdp3_with`] at unit component std.
pub fn make_mdp3() -> TabularMdp {
    make_mdp3_with(1.0).expect("built-in MDP is valid")
}

/// The last non-terminal state of a chain built by [`make_mdp3_with`].
pub const MDP3_FINAL_STATE: usize = 3;

/// One state, one action, two equally likely terminal branches paying
/// exactly 0 and 1. Undiscounted.
pub fn make_bernoulli_mdp() -> TabularMdp {
    let outcomes = vec![
        vec![
            Outcome {
                next_state: 1,
                probability: 0.5,
                reward: RewardSpec::constant(0.0),
            },
            Outcome {
                next_state: 2,
                probability: 0.5,
                reward: RewardSpec::constant(1.0),
            },
        ],
        Vec::new(),
        Vec::new(),
    ];
    TabularMdp::new(3, 1, outcomes, vec![false, true, true], 1.0, 0).expect("built-in MDP is valid")
}

/// FrozenLake layout, row-major from the top-left start.
pub const FROZEN_LAKE_MAP: [&str; 4] = ["SFFF", "FHFH", "FFFH", "HFFG"];
pub const FROZEN_LAKE_GOAL: usize = 15;

/// 4x4 FrozenLake. Actions are 0 left, 1 down, 2 right, 3 up. When slippery,
/// the intended move and both perpendicular moves each happen with
/// probability 1/3. Moves into a wall leave the agent in place. Entering the
/// goal pays 1; holes and the goal are terminal. Discount 0.99.
pub fn make_frozen_lake(slippery: bool) -> TabularMdp {
    let cells: Vec<u8> = FROZEN_LAKE_MAP.iter().flat_map(|row| row.bytes()).collect();
    let terminal: Vec<bool> = cells.iter().map(|&c| c == b'H' || c == b'G').collect();
    let moved = |s: usize, dir: usize| -> usize {
        let (r, c) = (s / 4, s % 4);
        match dir {
            0 => r * 4 + c.saturating_sub(1),
            1 => (r + 1).min(3) * 4 + c,
            2 => r * 4 + (c + 1).min(3),
            _ => r.saturating_sub(1) * 4 + c,
        }
    };
    let mut outcomes = Vec::with_capacity(64);
    for s in 0..16 {
        for a in 0..4 {
            let dirs: Vec<usize> = if slippery {
                vec![(a + 3) % 4, a, (a + 1) % 4]
            } else {
                vec![a]
            };
            let p = 1.0 / dirs.len() as f64;
            let mut row: Vec<Outcome> = Vec::new();
            for d in dirs {
                let next = moved(s, d);
                if let Some(o) = row.iter_mut().find(|o| o.next_state == next) {
                    o.probability += p;
                } else {
                    let r = if next == FROZEN_LAKE_GOAL { 1.0 } else { 0.0 };
                    row.push(Outcome {
                        next_state: next,
                        probability: p,
                        reward: RewardSpec::constant(r),
                    });
                }
            }
            let total: f64 = row.iter().map(|o| o.probability).sum();
            // absorb the rounding of 1/3 + 1/3 + 1/3 into the last outcome
            let last = row.len() - 1;
            row[last].probability += 1.0 - total;
            outcomes.push(row);
        }
    }
    TabularMdp::new(16, 4, outcomes, terminal, 0.99, 0).expect("built-in MDP is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn rows_are_probability_vectors() {
        for mdp in [
            make_mdp1(),
            make_mdp2(),
            make_mdp3(),
            make_bernoulli_mdp(),
            make_frozen_lake(true),
            make_frozen_lake(false),
        ] {
            for s in 0..mdp.n_states() {
                for a in 0..mdp.n_actions() {
                    let total: f64 = mdp.outcomes(s, a).iter().map(|o| o.probability).sum();
                    assert!((total - 1.0).abs() <= 1e-12);
                    if mdp.is_terminal(s) {
                        assert_eq!(mdp.outcomes(s, a)[0].next_state, s);
                    }
                }
            }
        }
    }

    #[test]
    fn mdp1_chain() {
        let mdp = make_mdp1();
        let mut rng = seeded_rng(1, 0);
        for _ in 0..100 {
            assert_eq!(step(&mdp, 0, 0, &mut rng).unwrap().next_state, 1);
        }
        assert!(matches!(step(&mdp, 2, 0, &mut rng), Err(Error::TerminalState(2))));
        let (v, _) = value_iteration(&mdp, 1e-14, 100);
        assert!((v[1] - 0.3).abs() < 1e-12);
        assert!((v[0] - (-0.53)).abs() < 1e-12);
        let sharp = make_mdp1_with(-0.8, 0.3, 1e-9).unwrap();
        let g = true_return_distribution(&sharp, 0, 0, &[0; 3], 200, &mut rng).unwrap();
        assert!(g.iter().all(|x| (x + 0.53).abs() < 1e-8));
    }

    #[test]
    fn mdp2_branches() {
        let mdp = make_mdp2();
        let (v, _) = value_iteration(&mdp, 1e-14, 100);
        assert!((v[0] - 0.55).abs() < 1e-12);
        let mut rng = seeded_rng(2, 0);
        let n = 100_000;
        let left = (0..n)
            .filter(|_| step(&mdp, 0, 0, &mut rng).unwrap().next_state == 1)
            .count();
        assert!((left as f64 / n as f64 - 0.5).abs() < 0.01);
        let g = true_return_distribution(&mdp, 0, 0, &[0; 3], 20_000, &mut rng).unwrap();
        let near = |c: f64| g.iter().filter(|x| (*x - c).abs() < 0.1).count() as f64 / g.len() as f64;
        assert!(near(0.8) > 0.3 && near(0.3) > 0.3 && near(0.55) < 0.2);
    }

    #[test]
    fn mdp3_moments() {
        let mdp = make_mdp3();
        assert_eq!(mdp.gamma(), 1.0);
        let mut rng = seeded_rng(3, 0);
        let g = true_return_distribution(&mdp, 0, 0, &[0; 5], 100_000, &mut rng).unwrap();
        let m = mean(&g);
        assert!(m.abs() < 0.02);
        let var = g.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / g.len() as f64;
        assert!((var - 5.0).abs() < 0.1);
    }

    #[test]
    fn bernoulli_law() {
        let mdp = make_bernoulli_mdp();
        let mut rng = seeded_rng(4, 0);
        let g = true_return_distribution(&mdp, 0, 0, &[0; 3], 10_000, &mut rng).unwrap();
        assert!(g.iter().all(|&x| x == 0.0 || x == 1.0));
        assert!((mean(&g) - 0.5).abs() < 0.03);
    }

    #[test]
    fn frozen_lake_layout() {
        let lake = make_frozen_lake(true);
        let terminal: Vec<usize> = (0..16).filter(|&s| lake.is_terminal(s)).collect();
        assert_eq!(terminal, vec![5, 7, 11, 12, 15]);
        // moving right from 14 slips up, right or down with 1/3 each
        let row = lake.outcomes(14, 2);
        let p = |n: usize| row.iter().find(|o| o.next_state == n).map_or(0.0, |o| o.probability);
        assert!((p(15) - 1.0 / 3.0).abs() < 1e-12);
        assert!((p(10) - 1.0 / 3.0).abs() < 1e-12);
        assert!((p(14) - 1.0 / 3.0).abs() < 1e-12);
        // corner: left and up both bounce back
        assert!(
            (lake
                .outcomes(0, 0)
                .iter()
                .find(|o| o.next_state == 0)
                .unwrap()
                .probability
                - 2.0 / 3.0)
                .abs()
                < 1e-12
        );

        let det = make_frozen_lake(false);
        let (p, _) = optimal_reach_probability(&det, FROZEN_LAKE_GOAL, 100);
        assert_eq!(p, 1.0);
        let (_, policy) = value_iteration(&det, 1e-12, 1000);
        assert_eq!(reach_probability(&det, &policy, FROZEN_LAKE_GOAL, 100), 1.0);

        let (p, reach_policy) = optimal_reach_probability(&lake, FROZEN_LAKE_GOAL, 100);
        assert!(p > 0.6 && p < 0.9, "{p}");
        assert!((reach_probability(&lake, &reach_policy, FROZEN_LAKE_GOAL, 100) - p).abs() < 0.02);
    }

    #[test]
    fn seeded_streams_repeat() {
        let lake = make_frozen_lake(true);
        let run = |seed| {
            let mut rng = seeded_rng(seed, 0);
            (0..50)
                .map(|i| step(&lake, 0, i % 4, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }
}
