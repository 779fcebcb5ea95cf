use dynexit::decoder::TokenSource;
use dynexit::encoder::FeatureMap;
use dynexit::model::{Model, ModelConfig};
use dynexit::selector::{
    apply_mask, gumbel_noise, mask_from_logits, saliency_image, select, SelectMode, SelectionLogits, SelectionMask,
    KEEP, OBS_PREFIX,
};
use dynexit::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_logits(h: usize, w: usize, c: usize, scale: f64, seed: u64) -> SelectionLogits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * c * 2).map(|_| rng.gen_range(-scale..scale)).collect();
    SelectionLogits::new(Tensor::new(vec![h, w, c, 2], data).unwrap()).unwrap()
}

fn random_features(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap())
        .unwrap()
}

#[test]
fn category_pairs_sum_to_one() {
    // 10^4 positions, with and without noise, over a range of temperatures
    let logits = random_logits(25, 25, 16, 8.0, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (tau, mode) in [(1.0, SelectMode::Train), (0.3, SelectMode::Eval), (5.0, SelectMode::Train)] {
        let mask = mask_from_logits(&logits, tau, mode, &mut rng).unwrap();
        assert_eq!(mask.soft.numel(), 10_000);
        // drop probability computed independently from the same logits
        for (pair, &keep) in logits.values().data().chunks(2).zip(mask.soft.data()) {
            assert!((0.0..=1.0).contains(&keep));
            if mode == SelectMode::Eval {
                let drop = 1.0 / (1.0 + ((pair[KEEP] - pair[1 - KEEP]) / tau).exp());
                assert!((keep + drop - 1.0).abs() < 1e-9);
            }
        }
    }
    let mut tape = Tape::inference();
    let z = tape.constant(logits.values().clone().reshape(vec![10_000, 2]).unwrap());
    let p = tape.softmax(z, 1).unwrap();
    for row in tape.value(p).data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn low_temperature_soft_matches_hard() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..4 * 4 * 8)
        .flat_map(|_| {
            let base: f64 = rng.gen_range(-3.0..3.0);
            let gap: f64 = rng.gen_range(1.0..4.0) * if rng.gen() { 1.0 } else { -1.0 };
            [base, base + gap]
        })
        .collect();
    let logits = SelectionLogits::new(Tensor::new(vec![4, 4, 8, 2], data).unwrap()).unwrap();
    let mask = mask_from_logits(&logits, 0.01, SelectMode::Eval, &mut rng).unwrap();
    for (s, h) in mask.soft.data().iter().zip(mask.hard.data()) {
        assert!((s - h).abs() < 1e-6, "soft {s} hard {h}");
    }
    // keep-logit above drop-logit by exactly 1
    let one = SelectionLogits::new(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
    let m = mask_from_logits(&one, 0.01, SelectMode::Eval, &mut rng).unwrap();
    assert!(m.soft.data()[0] > 0.9999);
    assert!((m.soft.data()[0] - 1.0 / (1.0 + (-100.0f64).exp())).abs() < 1e-15);
}

#[test]
fn gumbel_noise_has_euler_mascheroni_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = gumbel_noise(&[100_000], &mut rng).unwrap();
    let mean = g.data().iter().sum::<f64>() / 1e5;
    assert!((mean - 0.577_215_664_9).abs() < 0.02, "mean {mean}");
    assert!(g.all_finite());
}

#[test]
fn hard_mask_is_argmax_with_ties_kept() {
    let logits = random_logits(3, 3, 4, 2.0, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mask = mask_from_logits(&logits, 0.8, SelectMode::Eval, &mut rng).unwrap();
    for (pair, &h) in logits.values().data().chunks(2).zip(mask.hard.data()) {
        assert_eq!(h, if pair[KEEP] >= pair[1 - KEEP] { 1.0 } else { 0.0 });
    }
    let expected: Vec<bool> = mask.hard.data().chunks(4).map(|px| px.contains(&1.0)).collect();
    assert_eq!(mask.pixel_mask, expected);
    assert_eq!(mask.kept_pixels, expected.iter().filter(|&&k| k).count());
}

#[test]
fn train_mode_is_seed_deterministic_and_eval_ignores_rng() {
    let model = Model::new(ModelConfig::default(), 1);
    let f = random_features(4, 4, 16, 6);
    let draw = |mode, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        select(&f, &model.params, OBS_PREFIX, 0.9, mode, &mut rng).unwrap()
    };
    assert_eq!(draw(SelectMode::Train, 7), draw(SelectMode::Train, 7));
    assert_ne!(draw(SelectMode::Train, 7), draw(SelectMode::Train, 8));
    assert_eq!(draw(SelectMode::Eval, 7), draw(SelectMode::Eval, 8));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(select(&f, &model.params, OBS_PREFIX, 0.0, SelectMode::Eval, &mut rng).is_err());
}

#[test]
fn apply_mask_examples() {
    let f = random_features(4, 4, 3, 8);
    let (masked, tokens) = apply_mask(&f, &SelectionMask::full(4, 4, 3), SelectMode::Eval, TokenSource::Goal).unwrap();
    assert_eq!(masked, f);
    assert_eq!(tokens.len(), 16);
    for (n, v) in &tokens.tokens {
        assert_eq!(v.as_slice(), f.pixel(*n));
    }

    let zeros = SelectionMask::from_hard(Tensor::zeros(&[4, 4, 3])).unwrap();
    let (masked, tokens) = apply_mask(&f, &zeros, SelectMode::Eval, TokenSource::Frame(0)).unwrap();
    assert!(masked.values().data().iter().all(|&v| v == 0.0));
    assert!(tokens.is_empty());

    let wrong = SelectionMask::full(4, 4, 2);
    assert!(apply_mask(&f, &wrong, SelectMode::Eval, TokenSource::Goal).is_err());
}

#[test]
fn saliency_examples() {
    let half = SelectionMask {
        soft: Tensor::full(&[4, 4, 2], 0.5),
        hard: Tensor::full(&[4, 4, 2], 1.0),
        pixel_mask: vec![true; 16],
        kept_pixels: 16,
        tau: 1.0,
    };
    let img = saliency_image(&half, 32, 32).unwrap();
    assert!(img.bytes().iter().all(|&b| b == 128));

    let mut hard = Tensor::zeros(&[4, 4, 2]);
    // pixel (1, 2), both channels
    hard.data_mut()[(4 + 2) * 2] = 1.0;
    hard.data_mut()[(4 + 2) * 2 + 1] = 1.0;
    let single = SelectionMask::from_hard(hard).unwrap();
    let img = saliency_image(&single, 32, 32).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            let inside = (8..16).contains(&y) && (16..24).contains(&x);
            assert_eq!(img.bytes()[y * 32 + x], if inside { 255 } else { 0 }, "({y}, {x})");
        }
    }
    assert!(saliency_image(&single, 2, 8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn token_count_equals_kept_pixels(seed in any::<u64>(), p in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hard = Tensor::new(vec![4, 5, 3], (0..60).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap();
        let mask = SelectionMask::from_hard(hard).unwrap();
        let popcount = mask.pixel_mask.iter().filter(|&&k| k).count();
        let (_, tokens) = apply_mask(&random_features(4, 5, 3, seed), &mask, SelectMode::Eval, TokenSource::Goal).unwrap();
        prop_assert_eq!(tokens.len(), popcount);
        prop_assert_eq!(mask.kept_pixels, popcount);
        let px = tokens.pixels();
        prop_assert!(px.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn kept_pixels_fall_as_keep_logits_are_lowered(seed in any::<u64>(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let logits = random_logits(4, 4, 4, 2.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let k = |off: f64, rng: &mut ChaCha8Rng| {
            mask_from_logits(&logits.offset_keep(-off), 1.0, SelectMode::Eval, rng).unwrap().kept_pixels
        };
        prop_assert!(k(hi, &mut rng) <= k(lo, &mut rng));
    }

    #[test]
    fn soft_probabilities_are_in_unit_interval(seed in any::<u64>(), tau in 0.05f64..4.0) {
        let logits = random_logits(2, 3, 4, 20.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = mask_from_logits(&logits, tau, SelectMode::Train, &mut rng).unwrap();
        prop_assert!(mask.soft.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(mask.hard.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
