mod common;

use cbp_core::net::{init_network, Activation, Gradients};
use cbp_core::optim::{adam_step, sgd_step, AdamConfig, AdamState, SgdConfig};
use cbp_core::rng::{stream, Stream};
use proptest::prelude::*;
use rand::Rng;

use common::checks::{adam_reset_matches_fresh_weight, two_weight_grads, two_weight_net};
use common::ScalarAdam;

proptest! {
    #[test]
    fn sgd_step_then_negated_step_restores_weights(
        seed in any::<u64>(),
        alpha in 1e-4f64..0.5,
        scale in 1e-3f64..10.0,
    ) {
        let acts = [Activation::Tanh, Activation::Linear];
        let start = init_network(&[4, 3, 2], &acts, seed).unwrap();
        let mut net = start.clone();
        let mut rng = stream(seed, Stream::Data);
        let mut g = Gradients::zeros_like(&net);
        for l in &mut g.layers {
            for v in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *v = rng.gen_range(-scale..scale);
            }
        }
        let cfg = SgdConfig::new(alpha);
        sgd_step(&mut net, &g, &cfg).unwrap();
        for l in &mut g.layers {
            for v in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *v = -*v;
            }
        }
        sgd_step(&mut net, &g, &cfg).unwrap();
        for (a, b) in net.layers().iter().zip(start.layers()) {
            for (x, y) in a.weights().iter().zip(b.weights()).chain(a.biases().iter().zip(b.biases())) {
                prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn adam_matches_scalar_reference(
        grads in prop::collection::vec(-5.0f64..5.0, 1..60),
        alpha in 1e-4f64..0.1,
    ) {
        let cfg = AdamConfig::new(alpha);
        let mut net = two_weight_net([0.3, -0.2]);
        let mut st = AdamState::new(&net);
        let mut reference = [ScalarAdam::new(), ScalarAdam::new()];
        let mut w = [0.3, -0.2];
        for (i, &g) in grads.iter().enumerate() {
            let gw = [g, -0.5 * g + i as f64 * 0.01];
            adam_step(&mut net, &two_weight_grads(&gw), &mut st, &cfg).unwrap();
            for k in 0..2 {
                w[k] = reference[k].step(w[k], gw[k], alpha, cfg.beta1, cfg.beta2, cfg.eps);
            }
            prop_assert!((net.layer(0).weights()[0] - w[0]).abs() < 1e-14);
            prop_assert!((net.layer(0).weights()[1] - w[1]).abs() < 1e-14);
        }
    }

    /// Every single update is bounded by `α·|m̂|/(√v̂+ε)` and by a
    /// closed-form multiple of `α` that depends only on the step count.
    #[test]
    fn adam_update_magnitude_is_bounded(
        mags in prop::collection::vec(1e-3f64..10.0, 1..200),
        sign in prop::bool::ANY,
    ) {
        let alpha = 0.01;
        let cfg = AdamConfig::new(alpha);
        let mut net = two_weight_net([0.0, 0.0]);
        let mut st = AdamState::new(&net);
        let mut reference = ScalarAdam::new();
        let s = if sign { 1.0 } else { -1.0 };
        for &g in &mags {
            let before = net.layer(0).weights()[0];
            adam_step(&mut net, &two_weight_grads(&[s * g, 0.0]), &mut st, &cfg).unwrap();
            let delta = (net.layer(0).weights()[0] - before).abs();
            reference.step(0.0, s * g, alpha, cfg.beta1, cfg.beta2, cfg.eps);
            let t = reference.t;
            let mh = reference.m / (1.0 - cfg.beta1.powi(t));
            let vh = reference.v / (1.0 - cfg.beta2.powi(t));
            prop_assert!(delta <= alpha * mh.abs() / (vh.sqrt() + cfg.eps) * (1.0 + 1e-12));
            // Cauchy–Schwarz on the two weighted sums bounds |m̂|/√v̂ by a
            // closed form in β1, β2 and t (γ = β1²/β2 < 1).
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            let gamma = b1 * b1 / b2;
            let transient = (1.0 - b1) / (1.0 - b1.powi(t))
                * ((1.0 - b2.powi(t)) / (1.0 - b2)).sqrt()
                * ((1.0 - gamma.powi(t)) / (1.0 - gamma)).sqrt();
            prop_assert!(delta <= alpha * transient * (1.0 + 1e-12), "delta {delta}");
        }
    }
}

/// A weight reset mid-run must evolve exactly like a fresh weight that sees
/// the same later gradients, while its neighbour keeps its history.
#[test]
fn reset_weight_is_bit_identical_to_fresh_weight() {
    adam_reset_matches_fresh_weight(50);
}

#[test]
fn sgd_with_l2_shrinks_toward_zero() {
    let mut net = two_weight_net([2.0, -4.0]);
    let g = Gradients::zeros_like(&net);
    let cfg = SgdConfig {
        step_size: 0.1,
        weight_decay: 0.5,
    };
    sgd_step(&mut net, &g, &cfg).unwrap();
    assert_eq!(
        net.layer(0).weights(),
        &[2.0 - 0.1 * 0.5 * 2.0, -4.0 + 0.1 * 0.5 * 4.0]
    );
}
