use nemo::error::NemoError;
use nemo::localizer::{
    compute_activation_stats, initial_selection, localize, ood_from_activations, ood_neurons, refine, score_with_set,
    z_scores, ActivationStats, LocalizerConfig, NeuronSet,
};
use nemo::mem_score::MemThreshold;
use nemo::oracle::planted_fixture;
use nemo::toy_model::{ActivationMap, Arch, DenoiserModel, NeuronId, Prompt};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map(layers: Vec<Vec<f64>>) -> ActivationMap {
    ActivationMap { layers }
}

fn seeds() -> Vec<u64> {
    (1..=10).collect()
}

fn cfg() -> LocalizerConfig {
    LocalizerConfig::default()
}

#[test]
fn stats_match_hand_arithmetic() {
    let maps = [map(vec![vec![1.0, 2.0]]), map(vec![vec![3.0, 2.0]]), map(vec![vec![5.0, 8.0]])];
    let s = ActivationStats::from_maps(&maps).unwrap();
    assert!((s.mean[0][0] - 3.0).abs() < 1e-12 && (s.mean[0][1] - 4.0).abs() < 1e-12);
    assert!((s.std[0][0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-6);
    assert!((s.std[0][1] - 8.0f64.sqrt()).abs() < 1e-6);
    assert_eq!(s.holdout_size, 3);
}

#[test]
fn stats_are_permutation_invariant_and_flat_for_identical_prompts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut maps: Vec<ActivationMap> =
        (0..7).map(|_| map((0..2).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect())).collect();
    let a = ActivationStats::from_maps(&maps).unwrap();
    maps.reverse();
    maps.swap(0, 3);
    let b = ActivationStats::from_maps(&maps).unwrap();
    for l in 0..2 {
        for i in 0..4 {
            assert!((a.mean[l][i] - b.mean[l][i]).abs() < 1e-12);
            assert!((a.std[l][i] - b.std[l][i]).abs() < 1e-12);
        }
    }
    let m = DenoiserModel::new(Arch::tiny(), 1).unwrap();
    let same: Vec<Prompt> = (0..20).map(|_| m.prompt(vec![4, 12])).collect();
    let s = compute_activation_stats(&m, &same).unwrap();
    assert!(s.std.iter().flatten().all(|&x| x == 0.0));
    assert!(s.std.iter().all(|l| l.len() == m.arch.d_attn) && s.std.len() == m.arch.n_layers());
}

#[test]
fn stats_reject_small_or_ragged_inputs() {
    let m = DenoiserModel::new(Arch::tiny(), 1).unwrap();
    let few: Vec<Prompt> = (0..3).map(|i| m.prompt(vec![i + 1])).collect();
    assert!(matches!(compute_activation_stats(&m, &few), Err(NemoError::TooFewPrompts { .. })));
    assert!(ActivationStats::from_maps(&[]).is_err());
    assert!(ActivationStats::from_maps(&[map(vec![vec![1.0]]), map(vec![vec![1.0, 2.0]])]).is_err());
}

fn stats(mean: Vec<Vec<f64>>, std: Vec<Vec<f64>>) -> ActivationStats {
    ActivationStats { mean, std, holdout_size: 20 }
}

#[test]
fn z_scores_follow_the_formula() {
    let st = stats(vec![vec![1.0, 2.0, 3.0]], vec![vec![0.5, 1.0, 2.0]]);
    let z = z_scores(&map(vec![vec![1.0, 2.0, 3.0]]), &st).unwrap();
    assert_eq!(z, vec![vec![0.0, 0.0, 0.0]]);
    let z = z_scores(&map(vec![vec![1.0, 4.0, 3.0]]), &st).unwrap();
    assert_eq!(z[0][1], 2.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mean: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
    let std: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random::<f64>() + 0.1).collect()).collect();
    let act: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
    let z = z_scores(&map(act.clone()), &stats(mean.clone(), std.clone())).unwrap();
    for l in 0..3 {
        for i in 0..5 {
            assert_eq!(z[l][i], (act[l][i] - mean[l][i]) / std[l][i]);
        }
    }
}

#[test]
fn zero_spread_neurons_are_outliers_only_when_they_move() {
    let st = stats(vec![vec![1.0, 1.0]], vec![vec![0.0, 0.0]]);
    let z = z_scores(&map(vec![vec![1.0, 1.5]]), &st).unwrap();
    assert_eq!(z[0][0], 0.0);
    assert_eq!(z[0][1], f64::INFINITY);
}

#[test]
fn missing_stats_are_an_error() {
    let st = stats(vec![vec![1.0]], vec![vec![1.0]]);
    assert!(matches!(z_scores(&map(vec![vec![1.0, 2.0]]), &st), Err(NemoError::MissingStats { layer: 0, index: 1 })));
}

#[test]
fn ood_selection_semantics() {
    let m = DenoiserModel::new(Arch::tiny(), 3).unwrap();
    let hold: Vec<Prompt> = (0..20).map(|i| m.prompt(vec![1 + i % 7, 9 + i % 11, 30 + i % 5])).collect();
    let st = compute_activation_stats(&m, &hold).unwrap();
    let y = m.prompt(vec![60]);
    assert!(ood_neurons(&y, f64::INFINITY, 0, &st, &m).unwrap().is_empty());
    let top1 = ood_neurons(&y, f64::INFINITY, 1, &st, &m).unwrap();
    assert_eq!(top1.len(), m.arch.n_layers());
    let act = m.record_activations(&y).unwrap();
    for n in &top1 {
        let best = act.layers[n.layer].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(act.get(*n), best);
    }
}

#[test]
fn constructed_outliers_are_found_exactly() {
    let (layers, width) = (3, 8);
    let mean = vec![vec![1.0; width]; layers];
    let std = vec![vec![0.5; width]; layers];
    let mut act = mean.clone();
    act[1][3] = 1.0 + 0.5 * 4.5;
    act[2][7] = 1.0 - 0.5 * 6.0;
    act[0][0] = 1.0 + 0.5 * 3.9;
    let set = ood_from_activations(&map(act), &stats(mean, std), 4.0, 0).unwrap();
    let want: NeuronSet = [NeuronId::new(1, 3), NeuronId::new(2, 7)].into_iter().collect();
    assert_eq!(set, want);
}

#[test]
fn memorization_free_prompt_stops_before_the_loop() {
    let fx = planted_fixture(3, 100.0, &seeds()).unwrap();
    let m = &fx.model;
    let hold: Vec<Prompt> = (0..20).map(|i| m.prompt(vec![10 + i])).collect();
    let st = compute_activation_stats(m, &hold).unwrap();
    let plain = m.prompt(vec![20, 21]);
    let r = initial_selection(&plain, m, &st, &fx.tau, &cfg()).unwrap();
    assert!(r.s_initial.is_empty());
    assert_eq!((r.theta_act_final, r.k_final), (5.0, 0));
    assert_eq!(r.trace.len(), 1);
    let full = localize(&plain, m, &st, &fx.tau, &cfg()).unwrap();
    assert!(full.s_final.is_empty());
}

#[test]
fn planted_neuron_is_found_and_refined_to_a_singleton() {
    let fx = planted_fixture(3, 100.0, &seeds()).unwrap();
    let m = &fx.model;
    let hold: Vec<Prompt> = (0..20).map(|i| m.prompt(vec![10 + i, 40])).collect();
    let st = compute_activation_stats(m, &hold).unwrap();
    let r = localize(&fx.trigger, m, &st, &fx.tau, &cfg()).unwrap();
    let want: NeuronSet = [fx.neuron].into_iter().collect();
    assert_eq!(r.s_final, want);
    assert!(r.s_final.is_subset(&r.s_initial));
    assert!(score_with_set(m, &fx.trigger, &r.s_final, r.tau_mem_ref, &seeds()).unwrap() < r.tau_mem_ref);

    // trace: theta down by exactly one step and k up by one per round
    for w in r.trace.windows(2) {
        assert_eq!(w[1].theta_act, w[0].theta_act - 0.25);
        assert_eq!(w[1].k, w[0].k + 1);
    }
    assert_eq!(r.trace[0].theta_act, 5.0);
    assert_eq!(r.trace[0].k, 0);

    // refining a padded superset lands on the same singleton
    let mut padded = r.s_initial.clone();
    padded.extend([NeuronId::new(0, 1), NeuronId::new(0, 9), NeuronId::new(1, 2)]);
    let (again, scores) = refine(&padded, &fx.trigger, m, fx.tau.tau_mem, &seeds()).unwrap();
    assert_eq!(again, want);
    assert!(!scores.is_empty());
}

#[test]
fn refine_of_empty_is_empty() {
    let fx = planted_fixture(3, 100.0, &seeds()).unwrap();
    let (r, scores) = refine(&NeuronSet::new(), &fx.trigger, &fx.model, fx.tau.tau_mem, &seeds()).unwrap();
    assert!(r.is_empty() && scores.is_empty());
}

#[test]
fn localization_is_deterministic() {
    let fx = planted_fixture(5, 20.0, &seeds()).unwrap();
    let m = &fx.model;
    let hold: Vec<Prompt> = (0..20).map(|i| m.prompt(vec![10 + i])).collect();
    let st = compute_activation_stats(m, &hold).unwrap();
    let a = localize(&fx.trigger, m, &st, &fx.tau, &cfg()).unwrap();
    let b = localize(&fx.trigger, m, &st, &fx.tau, &cfg()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unreachable_threshold_exhausts_theta_and_keeps_the_last_score() {
    // tau below any achievable score: the loop runs until theta passes theta_min
    let fx = planted_fixture(3, 100.0, &seeds()).unwrap();
    let m = &fx.model;
    let hold: Vec<Prompt> = (0..20).map(|i| m.prompt(vec![10 + i])).collect();
    let st = compute_activation_stats(m, &hold).unwrap();
    let tau = MemThreshold::fixed(-2.0);
    let c = LocalizerConfig { theta_start: 2.0, theta_step: 0.5, theta_min: 1.0, seeds: seeds() };
    let r = initial_selection(&fx.trigger, m, &st, &tau, &c).unwrap();
    assert_eq!(r.trace.len(), 4);
    assert_eq!(r.theta_act_final, 0.5);
    assert_eq!(r.tau_mem_ref, r.trace.last().unwrap().score);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn refinement_never_grows(picks in proptest::collection::btree_set((0usize..2, 0usize..16), 0..6)) {
        let fx = planted_fixture(3, 100.0, &[1, 2, 3, 4]).unwrap();
        let s: NeuronSet = picks.into_iter().map(|(l, i)| NeuronId::new(l, i)).collect();
        let (r, _) = refine(&s, &fx.trigger, &fx.model, fx.tau.tau_mem, &[1, 2, 3, 4]).unwrap();
        prop_assert!(r.len() <= s.len());
        prop_assert!(r.is_subset(&s));
    }
}
