use ficklenet::cam::{aggregate, claimed_pixels, LocalizationMap, SeedLabel, Thresholds};
use ficklenet::config::ExperimentConfig;
use ficklenet::fickle::{center, forward_expanded, forward_naive, ClassifierHead, DropoutMaskSet};
use ficklenet::synthetic::{generate, GeneratorConfig};
use ficklenet::training::full_supervision_loss;
use ficklenet::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed;
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn maps(n: usize, classes: usize, h: usize, w: usize, seed: u64) -> Vec<LocalizationMap> {
    (0..n * classes)
        .map(|i| LocalizationMap {
            class_id: i % classes,
            scores: tensor(&[h, w], seed.wrapping_add(i as u64)).map(|v| v.max(0.0)),
            pass_seed: (i / classes) as u64,
            normalized: true,
        })
        .collect()
}

fn odd_kernel() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(3), Just(5), Just(7), Just(9)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mask_centres_survive_and_masks_replay(
        h in 1usize..10, w in 1usize..10, s in odd_kernel(), p in 0.0f64..0.99, seed in any::<u64>(),
    ) {
        let m = DropoutMaskSet::sample(h, w, s, p, seed).unwrap();
        let c = center(s);
        for i in 0..h {
            for j in 0..w {
                prop_assert!(m.is_kept(i, j, c, c));
            }
        }
        prop_assert_eq!(m, DropoutMaskSet::sample(h, w, s, p, seed).unwrap());
    }

    #[test]
    fn masking_is_uniform_across_channels(
        k in 1usize..5, h in 1usize..6, w in 1usize..6, s in odd_kernel(), p in 0.0f64..0.95, seed in any::<u64>(),
    ) {
        let m = DropoutMaskSet::sample(h, w, s, p, seed).unwrap();
        let mut tape = Tape::new();
        // strictly positive features so a zero can only come from the mask or padding
        let x = tape.leaf(tensor(&[k, h, w], seed).map(|v| v.abs() + 0.5));
        let ones = tape.leaf(Tensor::full(&[k, h, w], 1.0));
        let e = tape.expand(x, s).unwrap();
        let e_ones = tape.expand(ones, s).unwrap();
        let plane = std::sync::Arc::new(m.expanded_plane(1.0));
        let masked = tape.channel_mask(e, plane).unwrap();
        let (out, support) = (tape.value(masked), tape.value(e_ones));
        let n = h * s * w * s;
        for idx in 0..n {
            let (row, col) = (idx / (w * s), idx % (w * s));
            let kept = m.is_kept(row / s, col / s, row % s, col % s);
            let inside = support.data()[idx] != 0.0;
            for ch in 0..k {
                prop_assert_eq!(out.data()[ch * n + idx] != 0.0, kept && inside);
            }
        }
    }

    #[test]
    fn naive_and_expanded_heads_agree(
        k in 1usize..5, h in 1usize..7, w in 1usize..7, s in prop_oneof![Just(3usize), Just(5)],
        p in prop_oneof![Just(0.0), Just(0.5), Just(0.9)], rescale in any::<bool>(), seed in any::<u64>(),
    ) {
        let x = tensor(&[k, h, w], seed);
        let head = ClassifierHead::new(tensor(&[2, k, s, s], seed ^ 1), tensor(&[2], seed ^ 2)).unwrap();
        let masks = DropoutMaskSet::sample(h, w, s, p, seed).unwrap();
        let run = |naive: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let hv = head.register(&mut tape, true);
            let out = if naive {
                forward_naive(&mut tape, xv, &hv, &masks, rescale)
            } else {
                forward_expanded(&mut tape, xv, &hv, &masks, rescale)
            }
            .unwrap();
            let loss = tape.sigmoid_cross_entropy(out.logits, &Tensor::new(&[2], vec![1.0, 0.0]).unwrap()).unwrap();
            let g = tape.backward(loss).unwrap();
            vec![
                tape.value(out.scores).clone(),
                g.wrt(xv).unwrap().clone(),
                g.wrt(hv.weight).unwrap().clone(),
                g.wrt(hv.bias).unwrap().clone(),
            ]
        };
        for (a, b) in run(true).iter().zip(&run(false)) {
            prop_assert!(a.max_abs_diff(b).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn claimed_pixels_grow_with_passes(
        n in 1usize..12, classes in 1usize..4, theta in 0.05f64..0.95, seed in any::<u64>(),
    ) {
        let all = maps(n, classes, 5, 6, seed);
        let present: Vec<usize> = (0..classes).collect();
        let mut previous = vec![false; 30];
        for m in 1..=n {
            let claimed = claimed_pixels(&all[..m * classes], &present, theta).unwrap();
            for (before, now) in previous.iter().zip(&claimed) {
                prop_assert!(!before || *now);
            }
            previous = claimed;
        }
    }

    #[test]
    fn seed_pixels_carry_one_valid_label(
        n in 1usize..6, classes in 1usize..4, theta in 0.05f64..0.95, seed in any::<u64>(),
    ) {
        let present: Vec<usize> = (0..classes).collect();
        let seeds = aggregate(&maps(n, classes, 4, 4, seed), &present, Thresholds { theta, background: Some(0.05) }).unwrap();
        prop_assert_eq!(seeds.labels().len(), 16);
        for l in seeds.labels() {
            match l {
                SeedLabel::Class(c) => prop_assert!((*c as usize) < classes),
                SeedLabel::Background | SeedLabel::Ignore => {}
            }
        }
    }

    #[test]
    fn full_loss_ignores_pixel_order_and_duplication(
        labels in prop::collection::vec(prop_oneof![Just(255u8), 0u8..3], 12), seed in any::<u64>(), shift in 0usize..12,
    ) {
        prop_assume!(labels.iter().any(|&l| l != 255));
        let raw = tensor(&[3, 1, 12], seed).map(f64::exp);
        let probs = Tensor::from_fn(&[3, 1, 12], |i| {
            let u = i % 12;
            raw.data()[i] / (0..3).map(|c| raw.data()[c * 12 + u]).sum::<f64>()
        });
        let base = full_supervision_loss(&probs, &labels).unwrap();

        let rotated_labels: Vec<u8> = (0..12).map(|u| labels[(u + shift) % 12]).collect();
        let rotated = Tensor::from_fn(&[3, 1, 12], |i| probs.data()[(i / 12) * 12 + (i % 12 + shift) % 12]);
        prop_assert!((full_supervision_loss(&rotated, &rotated_labels).unwrap() - base).abs() < 1e-12);

        let doubled_labels: Vec<u8> = labels.iter().chain(&labels).copied().collect();
        let doubled = Tensor::from_fn(&[3, 1, 24], |i| probs.data()[(i / 24) * 12 + (i % 24) % 12]);
        prop_assert!((full_supervision_loss(&doubled, &doubled_labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips(
        s in prop_oneof![Just(3usize), Just(5), Just(7)], p in 0.0f64..0.99, n in 1usize..500,
        theta in 0.0f64..0.99, alpha in 0.0f64..10.0, epochs in 0usize..50, seed in any::<u64>(),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.fickle.kernel_size = s;
        cfg.fickle.dropout_rate = p;
        cfg.inference.n_passes = n;
        cfg.inference.theta = theta;
        cfg.loss.alpha = alpha;
        cfg.optimizer.epochs = epochs;
        cfg.seeds.experiment = seed;
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_labels_match_masks(seed in any::<u64>(), classes in 3usize..7) {
        let config = GeneratorConfig { num_classes: classes, ..GeneratorConfig::default() };
        let samples = generate(&config, 3, seed).unwrap();
        prop_assert_eq!(&samples, &generate(&config, 3, seed).unwrap());
        for s in &samples {
            for c in 0..classes {
                prop_assert_eq!(s.image_labels[c] == 1.0, s.gt_mask.class_pixels(c) > 0);
            }
        }
    }
}
