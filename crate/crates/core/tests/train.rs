mod support;

use demoe::net::{demoe_forward, soft_forward, RouterWeights, Stage};
use demoe::ops::{flip_horizontal, flip_vertical};
use demoe::synth::synthesize_pairs;
use demoe::train::*;
use demoe::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::fixtures;

fn short_config() -> TrainConfig {
    TrainConfig {
        epochs_stage1: 3,
        epochs_stage2: 2,
        ..TrainConfig::toy()
    }
}

fn samples(per_class: usize, seed: u64) -> Vec<Sample> {
    synthesize_pairs(5, per_class, 32, seed)
        .unwrap()
        .into_iter()
        .map(Sample::from)
        .collect()
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

#[test]
fn loss_arithmetic() {
    let a = Tensor::full([1, 3, 4, 4], 0.3f32);
    let b = a.map(|v| v + 0.1);
    let uni = RouterWeights::uniform(5);
    assert!((class_loss(&uni, 2).unwrap() - 5f64.ln()).abs() < 1e-6);
    let half = RouterWeights::new(vec![0.5, 0.25, 0.25, 0.0, 0.0]).unwrap();
    assert!((class_loss(&half, 0).unwrap() - 2f64.ln()).abs() < 1e-7);
    let hot = RouterWeights::new(vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(class_loss(&hot, 1).unwrap(), 0.0);
    assert!(class_loss(&hot, 5).is_err());

    let cfg = LossConfig::default();
    let total = combined_loss(&a, &b, &uni, 0, &cfg).unwrap();
    assert!((total - (0.1 + 0.001 * 5f64.ln())).abs() < 1e-6);
    assert!((total - 0.10161).abs() < 1e-5);
    let pixel_only = LossConfig {
        lambda_class: 0.0,
        ..cfg
    };
    assert_eq!(
        combined_loss(&a, &b, &uni, 0, &pixel_only).unwrap(),
        pixel_loss(&a, &b).unwrap()
    );
    assert_eq!(combined_loss(&a, &a, &hot, 1, &cfg).unwrap(), 0.0);
    let bad = LossConfig {
        lambda_pixel: -1.0,
        ..cfg
    };
    assert!(combined_loss(&a, &b, &uni, 0, &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_properties(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = fixtures::image(&mut rng, 1, 8, 8);
        let c = fixtures::image(&mut rng, 1, 8, 8);
        let (d0, c0) = augment(&d, &c, false, false, &mut rng);
        prop_assert!(d0.bitwise_eq(&d) && c0.bitwise_eq(&c));
        prop_assert!(flip_horizontal(&flip_horizontal(&d)).bitwise_eq(&d));
        prop_assert!(flip_vertical(&flip_vertical(&d)).bitwise_eq(&d));
        let (d1, c1) = augment(&d, &c, true, true, &mut rng);
        let sorted = |t: &Tensor<f32>| {
            let mut v: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            v.sort_unstable();
            v
        };
        prop_assert_eq!(sorted(&d1), sorted(&d));
        // the pair is flipped together
        let same_h = flip_horizontal(&d).bitwise_eq(&d1) == flip_horizontal(&c).bitwise_eq(&c1);
        prop_assert!(same_h);
    }

    #[test]
    fn balanced_epochs_cover_classes(seed in any::<u64>(), sizes in prop::collection::vec(1usize..7, 2..5)) {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(l, &n)| std::iter::repeat(l).take(n)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order = balanced_epoch(&labels, &mut rng);
        let top = *sizes.iter().max().unwrap();
        prop_assert_eq!(order.len(), top * sizes.len());
        for l in 0..sizes.len() {
            prop_assert_eq!(order.iter().filter(|&&i| labels[i] == l).count(), top);
        }
    }
}

#[test]
fn rejects_bad_inputs() {
    let cfg = short_config();
    assert!(matches!(stage1_train(&[], &cfg), Err(Error::Dataset(_))));
    let one_class: Vec<Sample> = samples(2, 0).into_iter().filter(|s| s.label != 3).collect();
    assert!(stage1_train(&one_class, &cfg).is_err());
    let bad_patch = TrainConfig { patch: 30, ..cfg };
    assert!(stage1_train(&samples(1, 0), &bad_patch).is_err());
    let bad_lr = TrainConfig { lr_min: 0.0, ..cfg };
    assert!(bad_lr.validate().is_err());
}

#[test]
fn stages_follow_their_contracts() {
    let cfg = short_config();
    let train = samples(4, 1000);
    let (s1, log1) = stage1_train(&train, &cfg).unwrap();
    assert_eq!(s1.stage(), Stage::Stage1);
    assert_eq!(s1.config().num_experts, 1);
    assert_eq!(log1.epoch_loss.len(), 3);
    assert!(log1.epoch_loss.iter().all(|l| l.is_finite() && *l >= 0.0));
    assert!(
        log1.epoch_loss.last() < log1.epoch_loss.first(),
        "{:?}",
        log1.epoch_loss
    );

    // same seed, same bits
    let (again, _) = stage1_train(&train, &cfg).unwrap();
    assert!(s1.bitwise_eq(&again));

    // replicated experts reproduce the stage-1 network
    let init = stage2_init(&s1).unwrap();
    assert_eq!(init.config().num_experts, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let y = fixtures::image(&mut rng, 2, 32, 32);
        let base = demoe_forward(&s1, &y, 1, None).unwrap().restored;
        assert!(max_abs_diff(&soft_forward(&init, &y).unwrap().restored, &base) <= 1e-6);
        for k in [1, 2, 5] {
            let r = demoe_forward(&init, &y, k, None).unwrap().restored;
            assert!(max_abs_diff(&r, &base) <= 1e-6, "k={k}");
        }
    }

    let (s2, log2) = stage2_finetune(&s1, &train, &cfg).unwrap();
    assert_eq!(s2.stage(), Stage::Stage2);
    assert_eq!(log2.epoch_loss.len(), 2);
    let mut moved = 0;
    for r in s2.records() {
        if is_decoder_param(&r.name) {
            let before = init.require(&r.name).unwrap();
            moved += usize::from(before.data != r.data);
        } else {
            let before = s1.require(&r.name).unwrap();
            let same = before.data.iter().zip(&r.data).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{} changed in stage 2", r.name);
        }
    }
    assert!(moved > 0);
    assert!(stage2_finetune(&s2, &train, &cfg).is_err());

    let eval = evaluate(&s2, &samples(1, 2000), 1).unwrap();
    assert!(eval.router_accuracy.is_some());
    assert!(eval.psnr_restored.db().is_finite());
    assert!((-1.0..=1.0).contains(&eval.ssim_restored));
}
