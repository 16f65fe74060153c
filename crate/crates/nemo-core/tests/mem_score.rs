use nemo::ddpm_core::LatentImage;
use nemo::error::NemoError;
use nemo::mem_score::{
    auroc, calibrate_threshold, detect_memorized, memorization_score, noise_differences, normalize, prompt_score,
    raw_noise_differences, score_or_zero, ssim, threshold_from_scores, NoiseDifference,
};
use nemo::oracle::ssim_reference;
use nemo::toy_model::{Arch, DenoiserModel, NeuronMask, Prompt};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> LatentImage {
    LatentImage::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn nd(seed: u64, delta: LatentImage) -> NoiseDifference {
    NoiseDifference { seed, delta }
}

#[test]
fn ssim_matches_the_reference_on_a_fixed_8x8_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = uniform(&mut rng, 1, 8, 8);
    let b = uniform(&mut rng, 1, 8, 8);
    assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() <= 1e-6);
}

#[test]
fn ssim_matches_the_reference_on_random_16x16_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let a = uniform(&mut rng, 3, 16, 16);
        let b = uniform(&mut rng, 3, 16, 16);
        let (fast, slow) = (ssim(&a, &b).unwrap(), ssim_reference(&a, &b));
        assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}");
    }
}

#[test]
fn ssim_of_identical_inputs_is_exactly_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = uniform(&mut rng, 3, 16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn independent_fields_have_small_ssim() {
    // 3-channel fields, the image shape used throughout
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = uniform(&mut rng, 3, 16, 16);
        let b = uniform(&mut rng, 3, 16, 16);
        worst = worst.max(ssim(&a, &b).unwrap().abs());
    }
    assert!(worst < 0.2, "max |ssim| {worst}");
}

#[test]
fn ssim_rejects_shape_mismatch_and_handles_small_planes() {
    let a = LatentImage::filled(1, 4, 4, 0.2);
    assert!(ssim(&a, &LatentImage::filled(1, 4, 5, 0.2)).is_err());
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

#[test]
fn normalization_spans_unit_interval() {
    let mut x = LatentImage::gaussian(3, 8, 8, 5);
    normalize(&mut x);
    let mn = x.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((mn, mx), (0.0, 1.0));
    let mut c = LatentImage::filled(1, 2, 2, 3.0);
    normalize(&mut c);
    assert!(c.data.iter().all(|&v| v == 0.5));
}

#[test]
fn score_of_identical_singletons_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = uniform(&mut rng, 3, 16, 16);
    assert_eq!(memorization_score(&[nd(1, x.clone())], &[nd(1, x)]).unwrap(), 1.0);
}

#[test]
fn same_list_twice_compares_distinct_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let list: Vec<NoiseDifference> = (0..4).map(|s| nd(s, uniform(&mut rng, 1, 16, 16))).collect();
    let score = memorization_score(&list, &list).unwrap();
    let mut best = f64::NEG_INFINITY;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                best = best.max(ssim(&list[i].delta, &list[j].delta).unwrap());
            }
        }
    }
    assert_eq!(score, best);
    assert!(score < 0.5);
}

#[test]
fn unrelated_sets_score_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<NoiseDifference> = (0..3).map(|s| nd(s, uniform(&mut rng, 3, 16, 16))).collect();
    let b: Vec<NoiseDifference> = (10..13).map(|s| nd(s, uniform(&mut rng, 3, 16, 16))).collect();
    assert!(memorization_score(&a, &b).unwrap() < 0.2);
}

#[test]
fn empty_sets_error_or_count_as_zero() {
    let x = nd(1, LatentImage::filled(1, 8, 8, 0.5));
    assert!(matches!(memorization_score(&[], std::slice::from_ref(&x)), Err(NemoError::EmptySet)));
    assert_eq!(score_or_zero(&[], std::slice::from_ref(&x)).unwrap(), 0.0);
    assert_eq!(score_or_zero(std::slice::from_ref(&x), &[]).unwrap(), 0.0);
}

#[test]
fn threshold_policy_is_mean_plus_c_std() {
    let t = threshold_from_scores(&[0.2, 0.4], 1.0);
    assert!((t.mean - 0.3).abs() < 1e-15 && (t.std - 0.1).abs() < 1e-15);
    assert!((t.tau_mem - 0.4).abs() < 1e-15);
    let t2 = threshold_from_scores(&[0.2, 0.4], 2.0);
    assert!((t2.tau_mem - 0.5).abs() < 1e-15);
    let flat = threshold_from_scores(&[0.33; 5], 1.0);
    assert_eq!((flat.std, flat.tau_mem), (0.0, 0.33));
    // the reference values quoted for the large model, as arithmetic only
    let (mu, sigma) = (0.358, 0.07);
    assert!((mu + sigma - 0.428f64).abs() < 1e-12 && (mu - sigma - 0.288f64).abs() < 1e-12);
}

#[test]
fn auroc_edge_cases() {
    assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]), 1.0);
    assert_eq!(auroc(&[0.1], &[0.9]), 0.0);
    assert_eq!(auroc(&[0.5], &[0.5]), 0.5);
    assert_eq!(auroc(&[0.6, 0.3], &[0.4]), 0.5);
}

fn model() -> DenoiserModel {
    DenoiserModel::new(Arch::tiny(), 21).unwrap()
}

#[test]
fn untrained_model_scores_are_total_and_deterministic() {
    let m = model();
    let seeds: Vec<u64> = (1..=6).collect();
    let y = m.prompt(vec![3, 17]);
    let a = prompt_score(&m, &y, &NeuronMask::empty(), &seeds).unwrap();
    assert_eq!(a, prompt_score(&m, &y, &NeuronMask::empty(), &seeds).unwrap());
    assert!(a.is_finite());
    let (flag, s) = detect_memorized(&m, &y, &nemo::mem_score::MemThreshold::fixed(2.0), &seeds).unwrap();
    assert!(!flag && s == a);
    let d1 = noise_differences(&m, &y, &[], 0.0, &seeds).unwrap();
    assert_eq!(d1, noise_differences(&m, &y, &[], 0.0, &seeds).unwrap());
    assert_eq!(d1.len(), seeds.len());
}

#[test]
fn seed_filter_drops_everything_above_any_reachable_threshold() {
    let m = model();
    let y = m.prompt(vec![5]);
    let seeds: Vec<u64> = (1..=5).collect();
    assert!(noise_differences(&m, &y, &[], 1.5, &seeds).unwrap().is_empty());
    let raw = raw_noise_differences(&m, &y, &NeuronMask::empty(), &seeds).unwrap();
    assert!(raw.iter().all(|d| d.delta.data.iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn calibration_needs_enough_prompts_and_is_reproducible() {
    let m = model();
    let seeds = [1, 2, 3];
    let few: Vec<Prompt> = (0..5).map(|i| m.prompt(vec![i + 1])).collect();
    assert!(matches!(calibrate_threshold(&m, &few, &seeds, 1.0), Err(NemoError::TooFewPrompts { .. })));
    let same: Vec<Prompt> = (0..20).map(|_| m.prompt(vec![9, 10])).collect();
    let t = calibrate_threshold(&m, &same, &seeds, 1.0).unwrap();
    assert_eq!(t.std, 0.0);
    assert_eq!(t.tau_mem, t.mean);
    let many: Vec<Prompt> = (0..20).map(|i| m.prompt(vec![(i % 50) + 1, 30])).collect();
    let t1 = calibrate_threshold(&m, &many, &seeds, 1.0).unwrap();
    let t2 = calibrate_threshold(&m, &many, &seeds, 1.0).unwrap();
    assert!((t1.tau_mem - t2.tau_mem).abs() <= 1e-6);
}

proptest! {
    #[test]
    fn score_is_symmetric(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<NoiseDifference> = (0..2).map(|s| nd(s, uniform(&mut rng, 1, 8, 8))).collect();
        let b: Vec<NoiseDifference> = (5..8).map(|s| nd(s, uniform(&mut rng, 1, 8, 8))).collect();
        prop_assert_eq!(memorization_score(&a, &b).unwrap(), memorization_score(&b, &a).unwrap());
    }

    #[test]
    fn ssim_stays_in_range_and_matches_reference(seed in 0u64..500, h in 8usize..14, w in 8usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&mut rng, 2, h, w);
        let b = uniform(&mut rng, 2, h, w);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim_reference(&a, &b)).abs() <= 1e-6);
    }
}
