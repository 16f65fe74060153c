use nemo::ddpm_core::LatentImage;
use nemo::localizer::NeuronSet;
use nemo::metrics::{
    all_values_off, diversity_proxy, embed, generate, layer_ablation, mad, mean_pairwise_similarity, median,
    paired_similarity, quality_delta, random_baseline, random_fraction, reports_to_csv, scale_sweep, sscd_gen_proxy,
    AblationKind, EvalReport, GenSettings, MemType, QualityProbes,
};
use nemo::toy_model::data::{holdout_samples, DataConfig};
use nemo::toy_model::{Ablation, Arch, DenoiserModel, NeuronId, NeuronMask};
use proptest::prelude::*;

fn model() -> DenoiserModel {
    DenoiserModel::new(Arch::tiny(), 11).unwrap()
}

fn gen() -> GenSettings {
    GenSettings { seeds: vec![101, 102, 103], steps: 6 }
}

#[test]
fn embedding_is_unit_length_and_self_similar() {
    let x = LatentImage::gaussian(3, 16, 16, 1);
    let e = embed(&x);
    let norm: f64 = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    assert_eq!(e.cosine(&e), 1.0);
    let neg = LatentImage::from_vec(3, 16, 16, x.data.iter().map(|v| -v).collect()).unwrap();
    assert!(e.cosine(&embed(&neg)) < 1.0);
}

#[test]
fn small_perturbations_stay_closer_than_unrelated_images() {
    for s in 0..10u64 {
        let x = LatentImage::gaussian(3, 16, 16, s);
        let noise = LatentImage::gaussian(3, 16, 16, s + 500);
        let near = LatentImage::from_vec(3, 16, 16, x.data.iter().zip(&noise.data).map(|(a, n)| a + 0.01 * n).collect())
            .unwrap();
        let far = LatentImage::gaussian(3, 16, 16, s + 1000);
        let e = embed(&x);
        assert!(e.cosine(&embed(&near)) > e.cosine(&embed(&far)));
    }
}

#[test]
fn similarity_aggregates() {
    let a = LatentImage::gaussian(3, 8, 8, 1);
    let b = LatentImage::gaussian(3, 8, 8, 2);
    assert_eq!(paired_similarity(&[a.clone(), b.clone()], &[a.clone(), b.clone()]), 1.0);
    assert_eq!(mean_pairwise_similarity(&[a.clone(), a.clone(), a.clone()]), 1.0);
    assert_eq!(mean_pairwise_similarity(std::slice::from_ref(&a)), 1.0);
    let ab = embed(&a).cosine(&embed(&b));
    assert!((mean_pairwise_similarity(&[a, b]) - ab).abs() < 1e-15);
}

#[test]
fn empty_mask_reproduces_generations() {
    let m = model();
    let y = m.prompt(vec![3, 20]);
    assert_eq!(sscd_gen_proxy(&m, &y, &NeuronMask::empty(), &gen()).unwrap(), 1.0);
    let unit = NeuronMask::scaled(&[NeuronId::new(0, 1), NeuronId::new(1, 2)], 1.0);
    assert_eq!(sscd_gen_proxy(&m, &y, &unit, &gen()).unwrap(), 1.0);
    let one_seed = GenSettings { seeds: vec![101], steps: 6 };
    assert!(sscd_gen_proxy(&m, &y, &NeuronMask::empty(), &one_seed).is_err());
    assert!(diversity_proxy(&m, &y, &NeuronMask::empty(), &gen()).unwrap() <= 1.0);
}

#[test]
fn scale_one_in_a_sweep_is_identity() {
    let m = model();
    let y = m.prompt(vec![5]);
    let set: NeuronSet = [NeuronId::new(0, 0), NeuronId::new(1, 3)].into_iter().collect();
    let sweep = scale_sweep(&m, &y, &set, &[1.0, 0.0, -1.0], &gen()).unwrap();
    assert_eq!(sweep[0], (1.0, 1.0));
    assert_eq!(sweep.len(), 3);
}

#[test]
fn quality_delta_of_no_ablation_is_exactly_one() {
    let m = model();
    let data = DataConfig { n_unique: 50, n_memorized: 2, duplication: 2, ..DataConfig::default() };
    let hold = holdout_samples(&m.arch, &data, 6, 4000).unwrap();
    let probes = QualityProbes::build(&m, &data, &hold, 2, 4000).unwrap();
    assert_eq!(probes.probes.len(), 12);
    assert_eq!(quality_delta(&m, &Ablation::none(&m), &probes).unwrap(), 1.0);
    let unit = Ablation::from_mask(&m, &NeuronMask::scaled(&[NeuronId::new(0, 0)], 1.0)).unwrap();
    assert_eq!(quality_delta(&m, &unit, &probes).unwrap(), 1.0);
    let again = QualityProbes::build(&m, &data, &hold, 2, 4000).unwrap();
    assert_eq!(probes.mse(&m, &Ablation::none(&m), false).unwrap(), again.mse(&m, &Ablation::none(&m), false).unwrap());
}

#[test]
fn all_values_off_cuts_the_prompt() {
    let m = model();
    let off = all_values_off(&m);
    let x = LatentImage::gaussian(3, 8, 8, 2);
    let a = m.forward_ablated(&x, 40, &m.prompt(vec![3, 9]), &off).unwrap();
    let b = m.forward_ablated(&x, 40, &m.prompt(vec![60, 61, 62]), &off).unwrap();
    assert_eq!(a, b);
    let imgs = generate(&m, &m.prompt(vec![4]), &off, &gen()).unwrap();
    let imgs2 = generate(&m, &m.prompt(vec![40]), &off, &gen()).unwrap();
    assert_eq!(imgs, imgs2);
}

#[test]
fn random_baseline_matches_layer_counts_and_is_disjoint() {
    let arch = Arch::toy();
    let s: NeuronSet =
        [NeuronId::new(0, 1), NeuronId::new(0, 5), NeuronId::new(2, 7), NeuronId::new(3, 0)].into_iter().collect();
    for seed in 201..211 {
        let r = random_baseline(&arch, &s, seed).unwrap();
        assert!(r.is_disjoint(&s));
        for l in 0..arch.n_layers() {
            assert_eq!(r.iter().filter(|n| n.layer == l).count(), s.iter().filter(|n| n.layer == l).count());
        }
        assert_eq!(r, random_baseline(&arch, &s, seed).unwrap());
    }
    assert!(random_baseline(&arch, &NeuronSet::new(), 1).unwrap().is_empty());
    let full: NeuronSet = (0..arch.d_attn).map(|i| NeuronId::new(0, i)).collect();
    assert!(random_baseline(&arch, &full, 1).is_err());
}

#[test]
fn random_fraction_and_layer_ablation_sizes() {
    let arch = Arch::toy();
    let total = arch.n_layers() * arch.d_attn;
    assert_eq!(random_fraction(&arch, 0.5, 3).len(), (total as f64 * 0.5).round() as usize);
    assert!(random_fraction(&arch, 0.0, 3).is_empty());
    let m = model();
    let v = layer_ablation(&m, AblationKind::Value, 1, 1.0, 9).unwrap();
    assert!(v.value[1].iter().all(|&s| s == 0.0) && v.value[0].iter().all(|&s| s == 1.0));
    let c = layer_ablation(&m, AblationKind::Conv, 0, 0.5, 9).unwrap();
    let zeros = c.conv.as_ref().unwrap()[0].iter().filter(|&&s| s == 0.0).count();
    assert_eq!(zeros, (m.arch.channels as f64 * 0.5).round() as usize);
    assert!(layer_ablation(&m, AblationKind::Key, 99, 1.0, 9).is_err());
}

#[test]
fn median_and_mad() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
    assert_eq!(mad(&[1.0, 1.0, 2.0, 2.0, 4.0, 6.0, 9.0]), 1.0);
}

#[test]
fn csv_has_header_and_one_row_per_report() {
    let row = |c: &str| EvalReport {
        prompt_id: "mem0".into(),
        condition: c.into(),
        sscd_orig_proxy: 0.9,
        sscd_gen_proxy: 1.0,
        diversity_proxy: 0.8,
        quality_delta: 1.0,
        deactivated_count: 0,
        mem_type: MemType::Verbatim,
    };
    let text = reports_to_csv(&[row("unmasked"), row("nemo")]).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "prompt_id,condition,sscd_orig_proxy,sscd_gen_proxy,diversity_proxy,quality_delta,deactivated_count,mem_type"
    );
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2], "mem0,nemo,0.9,1.0,0.8,1.0,0,verbatim");
}

proptest! {
    #[test]
    fn cosine_is_symmetric_and_bounded(a in 0u64..1000, b in 0u64..1000) {
        let ea = embed(&LatentImage::gaussian(3, 8, 8, a));
        let eb = embed(&LatentImage::gaussian(3, 8, 8, b));
        let c = ea.cosine(&eb);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - eb.cosine(&ea)).abs() < 1e-15);
    }
}
