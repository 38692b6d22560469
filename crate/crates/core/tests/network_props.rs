use lottery_landscape::data::synth_blobs;
use lottery_landscape::nn::{filter_view, ParamRole};
use lottery_landscape::optim::{evaluate, train, TrainConfig};
use lottery_landscape::pruning::Mask;
use lottery_landscape::rng::seeded;
use lottery_landscape::{build_network, ArchSpec, LayerSpec, Mode, Network, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn inputs(shape: &[usize], batch: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    let n = full.iter().product();
    Tensor::new(full, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

fn small_conv() -> ArchSpec {
    ArchSpec::new(
        vec![2, 6, 6],
        vec![
            LayerSpec::conv2d(2, 3, 3),
            LayerSpec::batch_norm(3),
            LayerSpec::Relu,
            LayerSpec::avg_pool(2),
            LayerSpec::Flatten,
            LayerSpec::dense(12, 8),
            LayerSpec::Relu,
            LayerSpec::dropout(0.3),
            LayerSpec::dense(8, 4),
        ],
    )
}

fn random_mask(net: &Network, keep: f64, seed: u64) -> Mask {
    let mut rng = seeded(seed);
    let mut mask = Mask::ones(net.theta());
    for k in 0..mask.layer_count() {
        for bit in mask.layer_mut(k).unwrap() {
            *bit = rng.random::<f64>() < keep;
        }
    }
    mask
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_bit_deterministic(net_seed in 0u64..1000, x_seed in 0u64..1000, rng_seed in 0u64..1000, train_mode: bool) {
        let net = build_network(&small_conv(), net_seed).unwrap();
        let x = inputs(&[2, 6, 6], 5, x_seed);
        let mode = if train_mode { Mode::Train } else { Mode::Eval };
        let a = net.forward(None, &x, mode, &mut seeded(rng_seed)).unwrap();
        let b = net.forward(None, &x, mode, &mut seeded(rng_seed)).unwrap();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn mask_equals_premultiplied_weights(net_seed in 0u64..1000, mask_seed in 0u64..1000, keep in 0.0f64..1.0, train_mode: bool) {
        let net = build_network(&small_conv(), net_seed).unwrap();
        let mask = random_mask(&net, keep, mask_seed);
        let mut pre = net.clone();
        mask.apply(pre.theta_mut()).unwrap();
        let x = inputs(&[2, 6, 6], 4, mask_seed ^ 7);
        let mode = if train_mode { Mode::Train } else { Mode::Eval };
        let masked = net.forward(Some(&mask), &x, mode, &mut seeded(3)).unwrap();
        let direct = pre.forward(None, &x, mode, &mut seeded(3)).unwrap();
        prop_assert_eq!(bits(&masked), bits(&direct));
    }

    #[test]
    fn compensated_scaling_keeps_logits(seed in 0u64..1000, c in 0.05f64..20.0, pair in 0usize..2) {
        let spec = ArchSpec::new(
            vec![6],
            vec![
                LayerSpec::dense(6, 10),
                LayerSpec::Relu,
                LayerSpec::dense(10, 7),
                LayerSpec::Relu,
                LayerSpec::dense(7, 3),
            ],
        );
        let net = build_network(&spec, seed).unwrap();
        let mut scaled = net.clone();
        // slots come in (weight, bias) pairs per dense layer
        let (w, b, next_w) = (2 * pair, 2 * pair + 1, 2 * pair + 2);
        scaled.theta_mut().get_mut(w).iter_mut().for_each(|v| *v *= c);
        scaled.theta_mut().get_mut(b).iter_mut().for_each(|v| *v *= c);
        scaled.theta_mut().get_mut(next_w).iter_mut().for_each(|v| *v /= c);
        let x = inputs(&[6], 16, seed + 1);
        let a = net.forward(None, &x, Mode::Eval, &mut seeded(0)).unwrap();
        let s = scaled.forward(None, &x, Mode::Eval, &mut seeded(0)).unwrap();
        for (u, v) in a.data().iter().zip(s.data()) {
            prop_assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0), "{} vs {}", u, v);
        }
    }

    #[test]
    fn filters_partition_weight_tensors(
        inputs_n in 1usize..6,
        hidden in 1usize..9,
        channels in 1usize..4,
        out_channels in 1usize..5,
        kernel in 1usize..4,
    ) {
        let side = 5;
        let conv_side = side - kernel + 1;
        let spec = ArchSpec::new(
            vec![channels, side, side],
            vec![
                LayerSpec::conv2d(channels, out_channels, kernel),
                LayerSpec::batch_norm(out_channels),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(out_channels * conv_side * conv_side, hidden),
                LayerSpec::Relu,
                LayerSpec::dense(hidden, inputs_n + 1),
            ],
        );
        let net = build_network(&spec, 0).unwrap();
        let theta = net.theta();
        let mut from_filters: Vec<(usize, Vec<u64>)> = Vec::new();
        for f in filter_view(theta) {
            match from_filters.last_mut() {
                Some((slot, vals)) if *slot == f.slot => vals.extend(f.values.iter().map(|v| v.to_bits())),
                _ => from_filters.push((f.slot, f.values.iter().map(|v| v.to_bits()).collect())),
            }
        }
        let expected: Vec<(usize, Vec<u64>)> = theta
            .iter()
            .enumerate()
            .filter(|(_, (slot, _))| slot.role == ParamRole::Weight)
            .map(|(k, (_, vals))| (k, vals.iter().map(|v| v.to_bits()).collect()))
            .collect();
        prop_assert_eq!(from_filters, expected);
    }
}

#[test]
fn filter_view_examples() {
    let dense = build_network(&ArchSpec::new(vec![10], vec![LayerSpec::dense(10, 5)]), 0).unwrap();
    let lens: Vec<usize> = filter_view(dense.theta()).map(|f| f.values.len()).collect();
    assert_eq!(lens, vec![10; 5]);

    let conv = build_network(
        &ArchSpec::new(
            vec![3, 5, 5],
            vec![LayerSpec::conv2d(3, 8, 5), LayerSpec::batch_norm(8), LayerSpec::Flatten, LayerSpec::dense(8, 2)],
        ),
        0,
    )
    .unwrap();
    let conv_filters: Vec<_> = filter_view(conv.theta()).filter(|f| f.layer == 0).collect();
    assert_eq!(conv_filters.len(), 8);
    assert!(conv_filters.iter().all(|f| f.values.len() == 75));
    assert!(filter_view(conv.theta()).all(|f| f.layer != 1));
}

fn blob_splits(seed: u64) -> (lottery_landscape::data::Dataset, lottery_landscape::data::Dataset) {
    let (train_set, _) = synth_blobs(3, 60, 5, 3.0, seed).unwrap();
    train_set.holdout(0.2, seed).unwrap()
}

fn mlp(seed: u64) -> Network {
    let spec = ArchSpec::new(
        vec![5],
        vec![LayerSpec::dense(5, 12), LayerSpec::Relu, LayerSpec::dense(12, 3)],
    );
    build_network(&spec, seed).unwrap()
}

#[test]
fn masked_entries_stay_zero_and_epochs_are_reproducible() {
    let (tr, val) = blob_splits(4);
    let net = mlp(4);
    let mask = random_mask(&net, 0.6, 9);
    let full_cfg = TrainConfig {
        max_epochs: 5,
        batch_size: 16,
        seed: 2,
        ..TrainConfig::default()
    };
    let (_, full) = train(&net, Some(&mask), &tr, &val, &full_cfg).unwrap();
    for epochs in 1..=5 {
        let cfg = TrainConfig {
            max_epochs: epochs,
            ..full_cfg.clone()
        };
        let (a, ra) = train(&net, Some(&mask), &tr, &val, &cfg).unwrap();
        let (b, rb) = train(&net, Some(&mask), &tr, &val, &cfg).unwrap();
        assert!(mask.preserves_zeros(a.theta()), "masked entry revived by epoch {epochs}");
        assert_eq!(a.theta().to_le_bytes(), b.theta().to_le_bytes());
        assert!(ra.same_trajectory(&rb));
        let prefix: Vec<u64> = full.val_loss[..epochs].iter().map(|v| v.to_bits()).collect();
        let got: Vec<u64> = ra.val_loss.iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, prefix);
    }
}

#[test]
fn returned_network_has_minimum_validation_loss() {
    for (seed, patience, lr) in [(0u64, 0usize, 0.05), (1, 2, 0.2), (2, 3, 0.01)] {
        let (tr, val) = blob_splits(seed);
        let cfg = TrainConfig {
            max_epochs: 12,
            batch_size: 8,
            learning_rate: lr,
            early_stop_patience: patience,
            seed,
            ..TrainConfig::default()
        };
        let (best, report) = train(&mlp(seed), None, &tr, &val, &cfg).unwrap();
        let min = report.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        let (loss, _) = evaluate(&best, None, &val).unwrap();
        assert_eq!(loss.to_bits(), min.to_bits());
        assert_eq!(report.val_loss[report.best_epoch].to_bits(), min.to_bits());
        assert_eq!(report.train_loss.len(), report.epochs());
        if patience > 0 {
            assert!(report.epochs() <= report.best_epoch + patience + 1);
        }
    }
}
