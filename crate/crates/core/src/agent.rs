//! Training loop: replay buffer, epsilon-greedy acting on flow-estimated Q
//! values, batched loss steps against a target network, and evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::{self, step, TabularMdp, Transition};
use crate::error::{domain, Error, Result};
use crate::flow::{density_at, MixtureFlowParams};
use crate::grad::{loss_and_grad, sgd_adam_step, sync_target, AdamState, LossConfig, NetworkDims, NetworkParams};
use crate::loss::LossKind;
use crate::stats::cramer_to_samples;
use crate::target::TargetConfig;
use crate::{seeded_rng, Rng};

/// Points of the grid used by [`export_distribution`].
pub const EXPORT_POINTS: usize = 512;

/// Hyperparameters of one training run. Field names follow the usual DQN
/// hyperparameter table; defaults are sized for the toy MDPs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub total_timesteps: usize,
    pub learning_rate: f64,
    pub max_norm: f64,
    pub num_envs: usize,
    pub buffer_size: usize,
    /// Discount; `None` uses the environment's own.
    pub gamma: Option<f64>,
    pub target_network_frequency: usize,
    pub batch_size: usize,
    pub start_e: f64,
    pub end_e: f64,
    pub exploration_fraction: f64,
    pub learning_starts: usize,
    pub train_frequency: usize,
    pub hidden_size_1: usize,
    pub hidden_size_2: usize,
    pub n_flows: usize,
    pub n_components: usize,
    pub n_samples: usize,
    /// Standard deviation of the Gaussian that stands in for the terminal
    /// reward in targets.
    pub final_reward_variance: f64,
    pub bandwidth: f64,
    pub loss_kind: LossKind,
    pub cramer_p: f64,
    pub grid_size: usize,
    pub seed: u64,
    pub eval_interval: usize,
    /// Monte-Carlo rollouts per state-action pair for the evaluation ground truth.
    pub eval_rollouts: usize,
    /// Greedy episodes per evaluation.
    pub eval_episodes: usize,
    /// Episodes are cut after this many steps (without a terminal flag).
    pub max_episode_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_timesteps: 30_000,
            learning_rate: 1e-3,
            max_norm: 3.0,
            num_envs: 4,
            buffer_size: 10_000,
            gamma: None,
            target_network_frequency: 1,
            batch_size: 32,
            start_e: 1.0,
            end_e: 0.01,
            exploration_fraction: 0.2,
            learning_starts: 500,
            train_frequency: 4,
            hidden_size_1: 64,
            hidden_size_2: 64,
            n_flows: 1,
            n_components: 4,
            n_samples: 100,
            final_reward_variance: 0.1,
            bandwidth: 0.05,
            loss_kind: LossKind::Surrogate,
            cramer_p: 2.0,
            grid_size: 256,
            seed: 0,
            eval_interval: 1_000,
            eval_rollouts: 2_000,
            eval_episodes: 100,
            max_episode_steps: 100,
        }
    }
}

fn bad(field: &'static str, reason: &str) -> Error {
    Error::Config {
        field,
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("total_timesteps", self.total_timesteps),
            ("num_envs", self.num_envs),
            ("buffer_size", self.buffer_size),
            ("target_network_frequency", self.target_network_frequency),
            ("batch_size", self.batch_size),
            ("train_frequency", self.train_frequency),
            ("hidden_size_1", self.hidden_size_1),
            ("hidden_size_2", self.hidden_size_2),
            ("n_components", self.n_components),
            ("eval_interval", self.eval_interval),
            ("eval_rollouts", self.eval_rollouts),
            ("eval_episodes", self.eval_episodes),
            ("max_episode_steps", self.max_episode_steps),
        ];
        for (field, v) in positive_counts {
            if v == 0 {
                return Err(bad(field, "must be at least 1"));
            }
        }
        let positive_reals = [
            ("learning_rate", self.learning_rate),
            ("max_norm", self.max_norm),
            ("final_reward_variance", self.final_reward_variance),
            ("bandwidth", self.bandwidth),
            ("cramer_p", self.cramer_p),
        ];
        for (field, v) in positive_reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(field, "must be positive and finite"));
            }
        }
        if self.n_flows != 1 {
            return Err(bad("n_flows", "only a single CDF flow layer is supported"));
        }
        if self.n_samples < 2 {
            return Err(bad("n_samples", "must be at least 2"));
        }
        if self.grid_size < 2 {
            return Err(bad("grid_size", "must be at least 2"));
        }
        if self.buffer_size < self.batch_size {
            return Err(bad("buffer_size", "must hold at least one batch"));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(bad("gamma", "must lie in (0, 1]"));
            }
        }
        if !(self.start_e <= 1.0) {
            return Err(bad("start_e", "must be at most 1"));
        }
        if !(self.end_e > 0.0 && self.end_e <= self.start_e) {
            return Err(bad("end_e", "must satisfy 0 < end_e <= start_e"));
        }
        if !(0.0..=1.0).contains(&self.exploration_fraction) {
            return Err(bad("exploration_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn network_dims(&self, mdp: &TabularMdp) -> NetworkDims {
        NetworkDims {
            n_states: mdp.n_states(),
            hidden1: self.hidden_size_1,
            hidden2: self.hidden_size_2,
            n_actions: mdp.n_actions(),
            n_components: self.n_components,
        }
    }

    pub fn loss_config(&self, gamma: f64) -> LossConfig {
        LossConfig {
            kind: self.loss_kind,
            cramer_p: self.cramer_p,
            target: TargetConfig {
                gamma,
                sigma_final: self.final_reward_variance,
                bandwidth: self.bandwidth,
                grid_size: self.grid_size,
            },
        }
    }
}

/// Fixed-capacity ring of transitions; the oldest entry is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(domain("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// `batch_size` draws with replacement; `None` until enough are stored.
    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Option<Vec<Transition>> {
        if batch_size == 0 || self.items.len() < batch_size {
            return None;
        }
        Some(
            (0..batch_size)
                .map(|_| self.items[rng.random_range(0..self.items.len())])
                .collect(),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

/// Draw `n` base samples.
pub fn draw_base(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Monte-Carlo expected return: the mean mapped return over `z_batch`.
pub fn estimate_q(params: &MixtureFlowParams, z_batch: &[f64]) -> Result<f64> {
    if z_batch.is_empty() {
        return Err(domain("z batch must be non-empty"));
    }
    let mut total = 0.0;
    for &z in z_batch {
        if !z.is_finite() {
            return Err(domain(format!("base draw {z} is not finite")));
        }
        total += params.map(z);
    }
    Ok(total / z_batch.len() as f64)
}

/// Action with the largest estimated Q; the lowest id wins ties.
pub fn greedy_action(net: &NetworkParams, state: usize, z_batch: &[f64]) -> Result<usize> {
    let mut best = (f64::NEG_INFINITY, 0);
    for (a, params) in net.flows_for_state(state)?.iter().enumerate() {
        let q = estimate_q(params, z_batch)?;
        if q > best.0 {
            best = (q, a);
        }
    }
    Ok(best.1)
}

/// Epsilon-greedy action.
pub fn select_action(net: &NetworkParams, state: usize, epsilon: f64, z_batch: &[f64], rng: &mut Rng) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(domain(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let explore: f64 = rng.random();
    if explore < epsilon {
        Ok(rng.random_range(0..net.dims().n_actions))
    } else {
        greedy_action(net, state, z_batch)
    }
}

/// Linear decay from `start_e` to `end_e` over the first
/// `exploration_fraction * total_timesteps` steps, constant afterwards.
pub fn epsilon_schedule(step: usize, config: &TrainConfig) -> f64 {
    let duration = config.exploration_fraction * config.total_timesteps as f64;
    if duration <= 0.0 || step as f64 >= duration {
        return config.end_e;
    }
    config.start_e + (config.end_e - config.start_e) * step as f64 / duration
}

/// Greedy action for every state.
pub fn greedy_policy(net: &NetworkParams, mdp: &TabularMdp, z_batch: &[f64]) -> Result<Vec<usize>> {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                Ok(0)
            } else {
                greedy_action(net, s, z_batch)
            }
        })
        .collect()
}

/// Averages over episodes run from the start state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub mean_discounted_return: f64,
    pub mean_total_reward: f64,
}

/// Run `episodes` episodes of a fixed policy, each cut after `horizon` steps.
pub fn run_policy(
    mdp: &TabularMdp,
    policy: &[usize],
    episodes: usize,
    horizon: usize,
    rng: &mut Rng,
) -> Result<EpisodeStats> {
    if episodes == 0 {
        return Err(domain("need at least one episode"));
    }
    let (mut disc, mut total) = (0.0, 0.0);
    for _ in 0..episodes {
        let mut s = mdp.start();
        let mut discount = 1.0;
        for _ in 0..horizon {
            let t = step(mdp, s, policy[s], rng)?;
            disc += discount * t.reward;
            total += t.reward;
            discount *= mdp.gamma();
            if t.done {
                break;
            }
            s = t.next_state;
        }
    }
    let n = episodes as f64;
    Ok(EpisodeStats {
        mean_discounted_return: disc / n,
        mean_total_reward: total / n,
    })
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training loss since the previous row (0 before learning starts).
    pub loss: f64,
    /// Mean exact Cramér distance between learned and Monte-Carlo return laws
    /// over all non-terminal state-action pairs.
    pub eval_cramer_mean: f64,
    pub greedy_return_mean: f64,
    pub epsilon: f64,
}

/// Monte-Carlo return samples for every non-terminal state-action pair,
/// following the value-iteration policy after the first step.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pairs: Vec<((usize, usize), Vec<f64>)>,
}

impl GroundTruth {
    pub fn new(mdp: &TabularMdp, rollouts: usize, rng: &mut Rng) -> Result<Self> {
        let (_, policy) = envs::value_iteration(mdp, 1e-12, 100_000);
        let mut pairs = Vec::new();
        for s in mdp.non_terminal_states() {
            for a in 0..mdp.n_actions() {
                let samples = envs::true_return_distribution(mdp, s, a, &policy, rollouts, rng)?;
                pairs.push(((s, a), samples));
            }
        }
        Ok(Self { pairs })
    }

    pub fn samples(&self, state: usize, action: usize) -> Option<&[f64]> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == (state, action))
            .map(|(_, v)| v.as_slice())
    }

    /// Exact Cramér distance of order `p` from the learned law of every pair
    /// to its samples.
    pub fn distances(&self, net: &NetworkParams, p: f64) -> Result<Vec<((usize, usize), f64)>> {
        let mut out = Vec::with_capacity(self.pairs.len());
        let mut cache: Option<(usize, Vec<MixtureFlowParams>)> = None;
        for ((s, a), samples) in &self.pairs {
            if cache.as_ref().is_none_or(|(cs, _)| cs != s) {
                cache = Some((*s, net.flows_for_state(*s)?));
            }
            let flows = &cache.as_ref().expect("filled above").1;
            out.push(((*s, *a), cramer_to_samples(&flows[*a], samples, p)?));
        }
        Ok(out)
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: NetworkParams,
    pub target_net: NetworkParams,
    pub optimizer: AdamState,
    pub metrics: Vec<MetricsRow>,
    /// Loss of every training step, in order.
    pub losses: Vec<f64>,
    /// Timestep at which each entry of `losses` was taken.
    pub loss_steps: Vec<usize>,
    /// Base draws used for acting and greedy evaluation.
    pub acting_z: Vec<f64>,
}

/// Random streams of a run: `0` for replay, exploration and fresh base
/// draws, `1` for the acting batch, `2` for evaluation, `3` for the ground
/// truth, `16 + i` for environment copy `i`.
const STREAM_ENV: u64 = 16;

/// Train on `mdp` with `config`, recording metrics every `eval_interval`
/// timesteps. Each timestep steps every environment copy once.
pub fn train(mdp: &TabularMdp, config: &TrainConfig) -> Result<TrainOutput> {
    train_with_progress(mdp, config, |_| {})
}

/// [`train`] with a callback receiving each metrics row as it is produced.
pub fn train_with_progress(
    mdp: &TabularMdp,
    config: &TrainConfig,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<TrainOutput> {
    config.validate()?;
    let gamma = config.gamma.unwrap_or(mdp.gamma());
    let mdp = mdp.clone().with_gamma(gamma)?;
    let loss_config = config.loss_config(gamma);

    let mut rng = seeded_rng(config.seed, 0);
    let mut init_rng = seeded_rng(config.seed, 4);
    let acting_z = draw_base(config.n_samples, &mut seeded_rng(config.seed, 1));
    let mut eval_rng = seeded_rng(config.seed, 2);
    let truth = GroundTruth::new(&mdp, config.eval_rollouts, &mut seeded_rng(config.seed, 3))?;
    let mut env_rngs: Vec<Rng> = (0..config.num_envs as u64)
        .map(|i| seeded_rng(config.seed, STREAM_ENV + i))
        .collect();

    let mut net = NetworkParams::init(config.network_dims(&mdp), &mut init_rng)?;
    let mut target_net = sync_target(&net);
    let mut optimizer = AdamState::new(&net);
    let mut buffer = ReplayBuffer::new(config.buffer_size)?;

    let mut states = vec![mdp.start(); config.num_envs];
    let mut lengths = vec![0usize; config.num_envs];
    let mut metrics = Vec::new();
    let mut losses = Vec::new();
    let mut loss_steps = Vec::new();
    let mut losses_since_eval = (0.0, 0usize);
    let mut train_steps = 0usize;

    for global_step in 0..config.total_timesteps {
        let epsilon = epsilon_schedule(global_step, config);
        for i in 0..config.num_envs {
            let action = select_action(&net, states[i], epsilon, &acting_z, &mut rng)?;
            let t = step(&mdp, states[i], action, &mut env_rngs[i])?;
            buffer.push(t);
            lengths[i] += 1;
            if t.done || lengths[i] >= config.max_episode_steps {
                states[i] = mdp.start();
                lengths[i] = 0;
            } else {
                states[i] = t.next_state;
            }
        }

        if global_step >= config.learning_starts && global_step % config.train_frequency == 0 {
            if let Some(batch) = buffer.sample(config.batch_size, &mut rng) {
                let z = draw_base(config.n_samples, &mut rng);
                let (loss, grads) = loss_and_grad(&net, &target_net, &batch, &z, &loss_config)?;
                sgd_adam_step(&mut net, &grads, &mut optimizer, config.learning_rate, config.max_norm)?;
                train_steps += 1;
                if train_steps.is_multiple_of(config.target_network_frequency) {
                    target_net = sync_target(&net);
                }
                losses.push(loss);
                loss_steps.push(global_step);
                losses_since_eval.0 += loss;
                losses_since_eval.1 += 1;
            }
        }

        if (global_step + 1) % config.eval_interval == 0 || global_step + 1 == config.total_timesteps {
            let distances = truth.distances(&net, config.cramer_p)?;
            let eval_cramer_mean = distances.iter().map(|d| d.1).sum::<f64>() / distances.len() as f64;
            let policy = greedy_policy(&net, &mdp, &acting_z)?;
            let stats = run_policy(
                &mdp,
                &policy,
                config.eval_episodes,
                config.max_episode_steps,
                &mut eval_rng,
            )?;
            let (sum, count) = losses_since_eval;
            let row = MetricsRow {
                step: global_step + 1,
                loss: if count > 0 { sum / count as f64 } else { 0.0 },
                eval_cramer_mean,
                greedy_return_mean: stats.mean_discounted_return,
                epsilon,
            };
            progress(&row);
            metrics.push(row);
            losses_since_eval = (0.0, 0);
        }
    }

    Ok(TrainOutput {
        net,
        target_net,
        optimizer,
        metrics,
        losses,
        loss_steps,
        acting_z,
    })
}

/// Learned density of one pair on a uniform [`EXPORT_POINTS`]-point grid
/// spanning `[-g_max, g_max]`.
pub fn export_distribution(net: &NetworkParams, state: usize, action: usize) -> Result<Vec<(f64, f64)>> {
    let flows = net.flows_for_state(state)?;
    let params = flows.get(action).ok_or(Error::Dimension {
        expected: flows.len(),
        got: action,
    })?;
    export_flow(params, EXPORT_POINTS)
}

/// Density of a flow on `points` evenly spaced returns over `[-g_max, g_max]`.
pub fn export_flow(params: &MixtureFlowParams, points: usize) -> Result<Vec<(f64, f64)>> {
    if points < 2 {
        return Err(domain("export grid needs at least 2 points"));
    }
    let g = params.g_max();
    (0..points)
        .map(|i| {
            let y = if i + 1 == points {
                g
            } else {
                -g + 2.0 * g * i as f64 / (points - 1) as f64
            };
            Ok((y, density_at(params, y)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::forward_sample;

    #[test]
    fn q_estimates() {
        let flow = MixtureFlowParams::standard(1.0).unwrap();
        let z = draw_base(500, &mut seeded_rng(11, 0));
        assert!(estimate_q(&flow, &z).unwrap().abs() <= 0.05);
        let mut rev = z.clone();
        rev.reverse();
        let (a, b) = (estimate_q(&flow, &z).unwrap(), estimate_q(&flow, &rev).unwrap());
        assert!((a - b).abs() < 1e-15);
        assert!(estimate_q(&flow, &[]).is_err());
        // three draws whose returns are exactly 1, 2, 3 under g_max = 4
        let wide = MixtureFlowParams::standard(4.0).unwrap();
        let zs: Vec<f64> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&y| crate::flow::invert_flow(&wide, y).unwrap())
            .collect();
        let ys: Vec<f64> = zs.iter().map(|&z| forward_sample(&wide, z).unwrap().y).collect();
        assert!((estimate_q(&wide, &zs).unwrap() - ys.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        assert!((estimate_q(&wide, &zs).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn epsilon_schedule_examples() {
        let c = TrainConfig {
            total_timesteps: 1000,
            exploration_fraction: 0.2,
            start_e: 1.0,
            end_e: 0.01,
            ..Default::default()
        };
        assert_eq!(epsilon_schedule(0, &c), 1.0);
        assert_eq!(epsilon_schedule(200, &c), 0.01);
        assert!((epsilon_schedule(100, &c) - 0.505).abs() < 1e-15);
        assert_eq!(epsilon_schedule(900, &c), 0.01);
    }

    #[test]
    fn replay_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        let t = |s| Transition {
            state: s,
            action: 0,
            reward: 0.0,
            next_state: 0,
            done: false,
        };
        let mut rng = seeded_rng(0, 0);
        b.push(t(0));
        assert!(b.sample(2, &mut rng).is_none());
        for s in 1..5 {
            b.push(t(s));
        }
        let mut kept: Vec<usize> = b.iter().map(|x| x.state).collect();
        kept.sort();
        assert_eq!(kept, vec![2, 3, 4]);
        let drawn = b.sample(100, &mut rng);
        assert!(drawn.is_none());
        let drawn = b.sample(3, &mut rng).unwrap();
        assert!(drawn.iter().all(|x| (2..5).contains(&x.state)));
    }

    #[test]
    fn config_validation_names_the_field() {
        let bad = TrainConfig {
            end_e: 2.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "end_e", .. })));
        let bad = TrainConfig {
            n_samples: 1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "n_samples", .. })));
        let bad = TrainConfig {
            gamma: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "gamma", .. })));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn export_covers_the_support() {
        let flow = MixtureFlowParams::new(vec![0.3, 0.7], vec![-1.0, 0.5], vec![0.6, 1.2], 2.0).unwrap();
        let table = export_flow(&flow, EXPORT_POINTS).unwrap();
        assert_eq!(table.len(), 512);
        assert_eq!(table[0], (-2.0, 0.0));
        assert_eq!(table[511], (2.0, 0.0));
        let mass = crate::stats::trapezoid(
            &table.iter().map(|r| r.0).collect::<Vec<_>>(),
            &table.iter().map(|r| r.1).collect::<Vec<_>>(),
        );
        assert!((mass - 1.0).abs() < 1e-2);
    }
}
