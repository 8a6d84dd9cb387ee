#![allow(dead_code)]

use nfdrl_core::envs::Transition;
use nfdrl_core::grad::{build_context, frozen_batch_loss, loss_and_grad, LossConfig, NetworkDims, NetworkParams};
use nfdrl_core::loss::LossKind;
use nfdrl_core::target::TargetConfig;
use nfdrl_core::{seeded_rng, Rng};
use rand::Rng as _;

pub fn tiny_dims() -> NetworkDims {
    NetworkDims {
        n_states: 3,
        hidden1: 8,
        hidden2: 8,
        n_actions: 2,
        n_components: 2,
    }
}

/// Initialized network with every parameter jittered, so that head weights
/// and biases are all non-trivial.
pub fn random_net(dims: NetworkDims, rng: &mut Rng, jitter: f64) -> NetworkParams {
    let mut net = NetworkParams::init(dims, rng).unwrap();
    let flat: Vec<f64> = net
        .flat()
        .iter()
        .map(|v| v + rng.random_range(-jitter..jitter))
        .collect();
    net.set_flat(&flat).unwrap();
    net
}

pub fn loss_config(kind: LossKind, grid_size: usize) -> LossConfig {
    LossConfig {
        kind,
        cramer_p: 2.0,
        target: TargetConfig {
            gamma: 0.9,
            sigma_final: 0.1,
            bandwidth: 0.05,
            grid_size,
        },
    }
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over every
/// parameter whose derivative reaches `floor` in magnitude; smaller entries
/// are compared absolutely against `floor`. Numeric derivatives are central
/// differences of the loss with its constant parts frozen at the current
/// parameters.
pub fn max_relative_error(
    net: &NetworkParams,
    target_net: &NetworkParams,
    batch: &[Transition],
    z: &[f64],
    config: &LossConfig,
    step: f64,
    floor: f64,
) -> f64 {
    let (_, grads) = loss_and_grad(net, target_net, batch, z, config).unwrap();
    let contexts: Vec<_> = batch
        .iter()
        .map(|t| build_context(net, target_net, t, z, config).unwrap())
        .collect();
    let base = net.flat();
    let analytic = grads.flat();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + step;
        probe.set_flat(&x).unwrap();
        let up = frozen_batch_loss(&probe, &contexts, config).unwrap();
        x[i] = base[i] - step;
        probe.set_flat(&x).unwrap();
        let down = frozen_batch_loss(&probe, &contexts, config).unwrap();
        let numeric = (up - down) / (2.0 * step);
        let scale = analytic[i].abs().max(numeric.abs());
        let gap = (analytic[i] - numeric).abs();
        let err = if scale >= floor {
            gap / scale
        } else if gap <= floor {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(err);
    }
    worst
}

pub fn base_draws(n: usize, seed: u64) -> Vec<f64> {
    nfdrl_core::agent::draw_base(n, &mut seeded_rng(seed, 99))
}
