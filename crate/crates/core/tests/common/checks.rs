//! Deterministic property checks shared by the property suites and the
//! acceptance run. Each check panics with a description on the first
//! violation and otherwise returns how much it exercised.

use std::fs;
use std::io::Write;

use cbp_core::gnt::{
    replace_features, select_replacements, FeatureLayer, Gnt, GntConfig, GntState, UtilityKind,
};
use cbp_core::net::{init_network, Activation, Gradients, Layer, LayerGrad, Network};
use cbp_core::optim::{adam_step, AdamConfig, AdamState, Optimizer, ParamId, SgdConfig};
use cbp_core::problems::mnist::{encode_idx_images, encode_idx_labels, load_mnist_dir};
use cbp_core::problems::mnist::{TRAIN_IMAGES, TRAIN_LABELS};
use cbp_core::problems::{BitFlipConfig, BitFlipEnv, MnistDataset};
use cbp_core::rng::{stream, Stream};
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng;

use super::{fd_gradients, rel_err, FeatureHistory};

pub fn learner_activations() -> Vec<Activation> {
    vec![
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Relu,
        Activation::leaky_relu(),
        Activation::LeakyRelu { slope: 0.3 },
        Activation::elu(),
        Activation::Elu { alpha: 0.5 },
        Activation::Swish,
        Activation::Linear,
    ]
}

pub fn hidden_acts(n_hidden: usize, act: Activation) -> Vec<Activation> {
    let mut acts = vec![act; n_hidden];
    acts.push(Activation::Linear);
    acts
}

/// Random network whose biases are also random, so every activation region
/// is exercised.
pub fn random_net(widths: &[usize], act: &Activation, seed: u64) -> Network {
    let mut net = init_network(widths, &hidden_acts(widths.len() - 2, act.clone()), seed).unwrap();
    let mut rng = stream(seed, Stream::Data);
    for l in net.layers_mut() {
        for b in l.biases_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    net
}

fn near_kink(net: &Network, x: &[f64]) -> bool {
    let trace = net.forward(x).unwrap();
    trace
        .pre
        .iter()
        .take(net.num_hidden_layers())
        .flatten()
        .any(|z| z.abs() < 1e-4)
}

/// Random regression example for a network with `n_in` inputs.
pub fn example<R: Rng>(rng: &mut R, n_in: usize) -> (Vec<f64>, f64) {
    let x = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (x, rng.gen_range(-1.0..1.0))
}

pub fn assert_close(a: f64, b: f64, what: &str) {
    assert!(
        (a - b).abs() <= 1e-10 * b.abs().max(1.0),
        "{what}: got {a}, oracle {b}"
    );
}

/// Analytic gradients against central finite differences for every learner
/// activation over several shapes. Returns the number of values compared.
pub fn gradients_match_finite_differences(trials: u64) -> usize {
    let shapes: [&[usize]; 3] = [&[3, 1], &[4, 5, 2], &[3, 4, 3, 2]];
    let mut checked = 0;
    for act in learner_activations() {
        for (s, widths) in shapes.iter().enumerate() {
            for trial in 0..trials {
                let seed = 100 * s as u64 + trial;
                let net = random_net(widths, &act, seed);
                let mut rng = stream(seed, Stream::Replacement);
                let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-1.5..1.5)).collect();
                // Piecewise activations: keep clear of the kink so the
                // finite difference does not straddle it.
                if near_kink(&net, &x) {
                    continue;
                }
                let c: Vec<f64> = (0..net.output_width())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                let trace = net.forward(&x).unwrap();
                let grads = net.backward(&trace, &c).unwrap();
                let fd = fd_gradients(&net, &x, &c, 1e-6);
                for (l, (gw, gb)) in fd.iter().enumerate() {
                    let an = &grads.layers[l];
                    for (a, n) in an.weights.iter().zip(gw).chain(an.biases.iter().zip(gb)) {
                        let e = rel_err(*a, *n, 1e-4);
                        assert!(
                            e < 1e-5,
                            "{} widths {widths:?} seed {seed} layer {l}: analytic {a} fd {n} rel {e}",
                            act.name()
                        );
                        checked += 1;
                    }
                }
            }
        }
    }
    checked
}

/// Replacing `picks` in hidden layer `layer` of a [4, 6, 6, 3] tanh network
/// gives exactly the outputs of the same network with those features'
/// outgoing weights zeroed.
pub fn replacement_matches_disconnected(seed: u64, layer: usize, picks: &[usize], probe_seed: u64) {
    let widths = [4, 6, 6, 3];
    let mut net = init_network(&widths, &hidden_acts(2, Activation::Tanh), seed).unwrap();
    let mut pruned = net.clone();
    for &i in picks {
        for k in 0..widths[layer + 2] {
            pruned.layer_mut(layer + 1).set_weight(i, k, 0.0);
        }
    }
    let mut state = GntState::new(&net);
    let mut rng = stream(seed, Stream::Replacement);
    replace_features(
        &mut net,
        None,
        &mut state.layers[layer],
        layer,
        picks,
        &mut rng,
    )
    .unwrap();
    let mut prng = stream(probe_seed, Stream::Data);
    for _ in 0..5 {
        let x: Vec<f64> = (0..4).map(|_| prng.gen_range(-2.0..2.0)).collect();
        let got = net.forward(&x).unwrap();
        let want = pruned.forward(&x).unwrap();
        let (got, want) = (got.output(), want.output());
        assert!(
            got.iter()
                .zip(want)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "seed {seed} layer {layer} picks {picks:?}: {got:?} vs {want:?}"
        );
    }
}

/// `rounds` selection rounds with random scores and maturity thresholds
/// cycling through 0, 1, 5 and 50: nothing at or below the threshold is
/// ever chosen. Returns the number of features picked.
pub fn selection_respects_maturity(rounds: u64) -> u64 {
    let mut rng = stream(17, Stream::Data);
    let n = 12;
    let mut layer = FeatureLayer::new(n);
    let mut picked = 0u64;
    let quarter = rounds.div_ceil(4);
    for round in 0..rounds {
        let m = [0, 1, 5, 50][(round / quarter) as usize];
        let cfg = GntConfig {
            replacement_rate: 0.05,
            maturity_threshold: m,
            ..GntConfig::default()
        };
        for i in 0..n {
            layer.age[i] += 1;
            layer.score[i] = rng.gen();
        }
        for i in select_replacements(&mut layer, &cfg) {
            assert!(
                layer.age[i] > m,
                "round {round}: feature {i} age {}",
                layer.age[i]
            );
            layer.age[i] = 0;
            picked += 1;
        }
    }
    picked
}

/// With every feature mature, each step replaces `⌊nρ⌋` or `⌊nρ⌋+1`
/// features and the total after `steps` steps is exactly `⌊steps·n·ρ⌋`.
pub fn budget_is_floor_of_accrued_rate(n: usize, rho: f64, steps: u64) {
    let cfg = GntConfig {
        replacement_rate: rho,
        maturity_threshold: 0,
        ..GntConfig::default()
    };
    let mut layer = FeatureLayer::new(n);
    layer.age.fill(1);
    let per_step = (n as f64 * rho).floor() as usize;
    let mut total = 0u64;
    for _ in 0..steps {
        let k = select_replacements(&mut layer, &cfg).len();
        assert!(
            k == per_step || k == per_step + 1,
            "n {n} rho {rho}: k {k} per step {per_step}"
        );
        total += k as u64;
        let acc = layer.frac_acc(rho);
        assert!(
            (0.0..1.0).contains(&acc),
            "n {n} rho {rho}: accumulator {acc}"
        );
    }
    let want = ((steps * n as u64) as f64 * rho).floor() as u64;
    assert_eq!(total, want, "n {n} rho {rho} steps {steps}");
    assert_eq!(layer.replacements_granted(), want);
}

pub fn two_weight_net(w: [f64; 2]) -> Network {
    Network::from_layers(vec![Layer::from_parts(
        2,
        1,
        w.to_vec(),
        vec![0.0],
        Activation::Linear,
        1.0,
    )
    .unwrap()])
    .unwrap()
}

pub fn two_weight_grads(gw: &[f64]) -> Gradients {
    Gradients {
        layers: vec![LayerGrad::new(gw.to_vec(), vec![0.0])],
    }
}

/// A weight whose Adam state is reset mid-run evolves bit-identically to a
/// fresh weight fed the same later gradients, while its neighbour keeps its
/// history. Runs `trials` random gradient sequences.
pub fn adam_reset_matches_fresh_weight(trials: usize) {
    let cfg = AdamConfig::new(0.01);
    let mut rng = stream(3, Stream::Data);
    for trial in 0..trials {
        let warmup = rng.gen_range(1..500);
        let tail = rng.gen_range(1..500);
        let w_reset = rng.gen_range(-1.0..1.0);
        let seq: Vec<[f64; 2]> = (0..warmup + tail)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect();

        let mut net = two_weight_net([0.5, -0.5]);
        let mut st = AdamState::new(&net);
        let mut neighbour = two_weight_net([0.5, -0.5]);
        let mut nst = AdamState::new(&neighbour);
        for g in &seq[..warmup] {
            adam_step(&mut net, &two_weight_grads(g), &mut st, &cfg).unwrap();
            adam_step(&mut neighbour, &two_weight_grads(g), &mut nst, &cfg).unwrap();
        }
        net.layer_mut(0).set_weight(0, 0, w_reset);
        st.reset(
            &net,
            &[ParamId::Weight {
                layer: 0,
                input: 0,
                unit: 0,
            }],
        )
        .unwrap();

        let mut fresh = two_weight_net([w_reset, 0.0]);
        let mut fst = AdamState::new(&fresh);
        for g in &seq[warmup..] {
            adam_step(&mut net, &two_weight_grads(g), &mut st, &cfg).unwrap();
            adam_step(&mut fresh, &two_weight_grads(&[g[0], 0.0]), &mut fst, &cfg).unwrap();
            adam_step(&mut neighbour, &two_weight_grads(g), &mut nst, &cfg).unwrap();
            assert_eq!(
                net.layer(0).weight(0, 0).to_bits(),
                fresh.layer(0).weight(0, 0).to_bits(),
                "trial {trial}"
            );
            assert_eq!(st.layers[0].weights.t[0], fst.layers[0].weights.t[0]);
            // The untouched weight is unaffected by its neighbour's reset.
            assert_eq!(
                net.layer(0).weight(1, 0).to_bits(),
                neighbour.layer(0).weight(1, 0).to_bits()
            );
        }
    }
}

/// Tracks per-feature histories next to a running learner and checks every
/// running utility against the explicit-sum oracle to 1e-10. Replaced
/// features start a fresh history, so resets are checked too. Returns the
/// number of replacements.
pub fn replay_utilities(kind: UtilityKind, steps: usize, rate: f64) -> u64 {
    let widths = [4, 5, 4, 1];
    let acts = [Activation::Tanh, Activation::Relu, Activation::Linear];
    let mut net = init_network(&widths, &acts, 21).unwrap();
    let eta = 0.9;
    let maturity = 15;
    let cfg = GntConfig {
        replacement_rate: rate,
        decay_rate: eta,
        maturity_threshold: maturity,
        utility: kind,
    };
    let mut opt = Optimizer::sgd(SgdConfig::new(0.02)).unwrap();
    let mut gnt = Gnt::new(&net, cfg, stream(21, Stream::Replacement)).unwrap();
    let mut hist: Vec<Vec<FeatureHistory>> = (0..2)
        .map(|l| vec![FeatureHistory::new(); widths[l + 1]])
        .collect();
    let mut rng = stream(21, Stream::Data);
    let checkpoints = [1, 2, 3, 10, 50, 200, 500, steps];
    for step in 1..=steps {
        let (x, y) = example(&mut rng, 4);
        let trace = net.forward(&x).unwrap();
        let g = net
            .backward(&trace, &[2.0 * (trace.output()[0] - y)])
            .unwrap();
        opt.step(&mut net, &g).unwrap();
        // Outgoing sums are read after the optimizer step and before any
        // replacement in a later layer can redraw them.
        let out_mag: Vec<Vec<f64>> = (0..2)
            .map(|l| {
                let mut v = vec![0.0; widths[l + 1]];
                net.layer(l + 1).outgoing_magnitudes(&mut v);
                v
            })
            .collect();
        let ages_before: Vec<Vec<u64>> = gnt.state.layers.iter().map(|s| s.age.clone()).collect();
        gnt.update_and_replace(&mut net, &trace, None).unwrap();

        for l in 0..2 {
            // Incoming sums of surviving features are untouched by their
            // own layer's replacements but do see an earlier layer's.
            let mut in_mag = vec![0.0; widths[l + 1]];
            net.layer(l).incoming_magnitudes(&mut in_mag);
            let st = &gnt.state.layers[l];
            for i in 0..widths[l + 1] {
                if st.age[i] == 0 {
                    assert!(
                        ages_before[l][i] + 1 > maturity,
                        "immature feature replaced"
                    );
                    let b = net.layer(l).init_bound();
                    assert!(net.layer(l).column(i).all(|w| w.abs() < b));
                    hist[l][i] = FeatureHistory::new();
                    continue;
                }
                assert_eq!(st.age[i], ages_before[l][i] + 1);
                let fh = &mut hist[l][i];
                fh.h.push(trace.hidden(l)[i]);
                fh.in_mag.push(in_mag[i]);
                fh.out_mag.push(out_mag[l][i]);
                assert_eq!(fh.age() as u64, st.age[i]);
                if !checkpoints.contains(&step) && !fh.age().is_multiple_of(97) {
                    continue;
                }
                let what = format!("{} step {step} layer {l} feature {i}", kind.name());
                let u = st.utility[i];
                match kind {
                    UtilityKind::Contribution => assert_close(u, fh.contribution(eta), &what),
                    UtilityKind::MeanCorrectedContribution => {
                        assert_close(u, fh.mean_corrected(eta), &what);
                        assert_close(st.mean_act[i], fh.mean_activation(eta), &what);
                    }
                    UtilityKind::Adaptation => assert_close(u, fh.adaptation(eta), &what),
                    UtilityKind::WeightMagnitude => {
                        assert_close(u, fh.weight_magnitude(eta), &what)
                    }
                    UtilityKind::Overall => {
                        assert_close(u, fh.overall(eta), &what);
                        assert_close(st.score[i], fh.overall_hat(eta), &what);
                        assert_close(st.mean_act[i], fh.mean_activation(eta), &what);
                    }
                    UtilityKind::Random => unreachable!(),
                }
            }
        }
    }
    gnt.replaced_total()
}

/// Exactly one flipping bit changes at every multiple of `period` and none
/// in between; inputs are binary and mirror the flipping bits.
pub fn flip_schedule_is_exact(seed: u64, period: u64) {
    let cfg = BitFlipConfig {
        m: 12,
        f: 7,
        period,
        beta: 0.7,
        target_width: 30,
    };
    let mut env = BitFlipEnv::new(&cfg, seed).unwrap();
    let mut prev = env.flip_bits().to_vec();
    let steps = 25 * period + period / 2;
    for t in 1..=steps {
        let (x, _) = env.next_sample();
        let now = env.flip_bits().to_vec();
        let changed = prev.iter().zip(&now).filter(|(a, b)| a != b).count();
        let want = usize::from(t % period == 0);
        assert_eq!(changed, want, "seed {seed} period {period} step {t}");
        for (xi, &b) in x.iter().zip(&now) {
            assert_eq!(*xi, f64::from(b));
        }
        assert!(x.iter().all(|&v| v == 0.0 || v == 1.0));
        prev = now;
    }
    assert_eq!(env.flips(), steps / period);
    assert_eq!(env.step(), steps);
}

pub fn synthetic_mnist(n: usize, rows: usize, cols: usize) -> MnistDataset {
    MnistDataset {
        rows,
        cols,
        pixels: (0..n * rows * cols).map(|i| (i * 53 % 256) as u8).collect(),
        labels: (0..n).map(|i| (i * 7 % 10) as u8).collect(),
    }
}

/// IDX bytes assembled by hand: big-endian magic and dimensions, then the
/// raw body.
pub fn raw_idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(body);
    out
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

/// A synthetic dataset encodes to the hand-built IDX layout and loads back
/// unchanged from plain and gzipped files.
pub fn idx_round_trip(n: usize, rows: usize, cols: usize) {
    let d = synthetic_mnist(n, rows, cols);
    let images = raw_idx(0x0803, &[n as u32, rows as u32, cols as u32], &d.pixels);
    let labels = raw_idx(0x0801, &[n as u32], &d.labels);
    assert_eq!(encode_idx_images(rows, cols, &d.pixels), images);
    assert_eq!(encode_idx_labels(&d.labels), labels);

    let plain = tempfile::tempdir().unwrap();
    fs::write(plain.path().join(TRAIN_IMAGES), &images).unwrap();
    fs::write(plain.path().join(TRAIN_LABELS), &labels).unwrap();
    assert_eq!(load_mnist_dir(plain.path()).unwrap(), d);

    let gz = tempfile::tempdir().unwrap();
    fs::write(gz.path().join(format!("{TRAIN_IMAGES}.gz")), gzip(&images)).unwrap();
    fs::write(gz.path().join(format!("{TRAIN_LABELS}.gz")), gzip(&labels)).unwrap();
    assert_eq!(load_mnist_dir(gz.path()).unwrap(), d);
}
