mod common;

use common::*;
use nfdrl_core::envs::Transition;
use nfdrl_core::grad::loss_and_grad;
use nfdrl_core::loss::LossKind;
use nfdrl_core::seeded_rng;

fn transition(done: bool) -> Transition {
    Transition {
        state: 1,
        action: 1,
        reward: 0.4,
        next_state: 2,
        done,
    }
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    for kind in [LossKind::Surrogate, LossKind::Exact] {
        for seed in 0..20 {
            let mut rng = seeded_rng(seed, 7);
            let net = random_net(tiny_dims(), &mut rng, 0.3);
            let target_net = random_net(tiny_dims(), &mut rng, 0.3);
            assert!(net.dims().n_parameters() <= 500);
            let z = base_draws(40, seed);
            let batch = [transition(seed % 2 == 0)];
            let err = max_relative_error(&net, &target_net, &batch, &z, &loss_config(kind, 64), 1e-5, 1e-7);
            assert!(err <= 1e-4, "{kind:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn duplicated_batch_leaves_loss_and_gradient_unchanged() {
    let mut rng = seeded_rng(3, 7);
    let net = random_net(tiny_dims(), &mut rng, 0.3);
    let target_net = random_net(tiny_dims(), &mut rng, 0.3);
    let z = base_draws(40, 3);
    let cfg = loss_config(LossKind::Surrogate, 64);
    let one = [transition(false)];
    let two = [transition(false), transition(false)];
    let (l1, g1) = loss_and_grad(&net, &target_net, &one, &z, &cfg).unwrap();
    let (l2, g2) = loss_and_grad(&net, &target_net, &two, &z, &cfg).unwrap();
    assert!((l1 - l2).abs() <= 1e-15 * l1.abs());
    for (a, b) in g1.flat().iter().zip(g2.flat()) {
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300));
    }
}
