//! The desk-scale evaluation table: calibration, localization of every
//! duplicated prompt, and one pass/fail check per acceptance property.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ddpm_core::LatentImage;
use crate::error::{NemoError, Result};
use crate::localizer::{compute_activation_stats, localize, score_with_set, ActivationStats, NeuronSet, SelectionResult};
use crate::mem_score::{auroc, prompt_score, ssim, threshold_from_scores, MemThreshold};
use crate::metrics::{
    all_values_off, diversity_proxy, generate, mean_pairwise_similarity, paired_similarity, quality_delta,
    random_baseline, scale_sweep, QualityProbes,
};
use crate::oracle::{brute_force_minimal_sets, planted_fixture, ssim_reference};
use crate::toy_model::data::{holdout_prompts, holdout_samples, memorized_image, memorized_prompt};
use crate::toy_model::gradcheck::gradient_check;
use crate::toy_model::{Ablation, DenoiserModel, NeuronMask, Prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed(id: u32, name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Result<CriterionResult> {
    let t = Instant::now();
    let (passed, detail) = f()?;
    Ok(CriterionResult { id, name: name.to_string(), passed, detail, seconds: t.elapsed().as_secs_f64() })
}

/// Threshold and activation statistics from the calibration prompt pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: MemThreshold,
    pub stats: ActivationStats,
    pub holdout_scores: Vec<f64>,
}

pub fn calibrate(model: &DenoiserModel, cfg: &RunConfig) -> Result<Calibration> {
    let prompts = holdout_prompts(&model.arch, cfg.data(), cfg.n_calibration, cfg.seeds.calibration_prompts)?;
    let empty = NeuronMask::empty();
    let scores: Result<Vec<f64>> =
        prompts.iter().map(|y| prompt_score(model, y, &empty, &cfg.seeds.localization)).collect();
    let scores = scores?;
    Ok(Calibration {
        tau: threshold_from_scores(&scores, cfg.c_sigma),
        stats: compute_activation_stats(model, &prompts)?,
        holdout_scores: scores,
    })
}

/// Duplicated prompts paired with their training images.
pub fn memorized_pairs(model: &DenoiserModel, cfg: &RunConfig) -> Vec<(Prompt, LatentImage)> {
    (0..cfg.data().n_memorized)
        .map(|i| (memorized_prompt(i, &model.arch), memorized_image(&model.arch, cfg.data().seed, i)))
        .collect()
}

/// Calibrated model plus NeMo results for every duplicated prompt.
pub struct Suite<'a> {
    pub model: &'a DenoiserModel,
    pub cfg: RunConfig,
    pub calib: Calibration,
    pub memorized: Vec<(Prompt, LatentImage)>,
    pub results: Vec<SelectionResult>,
}

impl<'a> Suite<'a> {
    pub fn new(model: &'a DenoiserModel, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let calib = calibrate(model, cfg)?;
        let memorized = memorized_pairs(model, cfg);
        let loc = cfg.localizer();
        let results: Result<Vec<_>> =
            memorized.iter().map(|(y, _)| localize(y, model, &calib.stats, &calib.tau, &loc)).collect();
        Ok(Self { model, cfg: cfg.clone(), calib, memorized, results: results? })
    }

    pub fn union(&self) -> NeuronSet {
        self.results.iter().flat_map(|r| r.s_final.iter().copied()).collect()
    }

    fn tau(&self) -> f64 {
        self.calib.tau.tau_mem
    }

    pub fn detection(&self) -> Result<CriterionResult> {
        timed(2, "detection separation", || {
            let seeds = &self.cfg.seeds.localization;
            let empty = NeuronMask::empty();
            let negs = holdout_prompts(&self.model.arch, self.cfg.data(), self.cfg.n_detection, self.cfg.seeds.detection_prompts)?;
            let pos: Result<Vec<f64>> = self.memorized.iter().map(|(y, _)| prompt_score(self.model, y, &empty, seeds)).collect();
            let neg: Result<Vec<f64>> = negs.iter().map(|y| prompt_score(self.model, y, &empty, seeds)).collect();
            let (pos, neg) = (pos?, neg?);
            let a = auroc(&pos, &neg);
            let ok = a >= 0.9 && pos.len() >= 4 && neg.len() >= 20;
            Ok((ok, format!("AUROC {a:.3} over {} duplicated vs {} holdout prompts", pos.len(), neg.len())))
        })
    }

    pub fn termination(&self) -> Result<CriterionResult> {
        timed(3, "localization terminates and mitigates", || {
            let mut all_loc = true;
            let mut fresh_ok = 0;
            let mut parts = Vec::new();
            for ((y, _), r) in self.memorized.iter().zip(&self.results) {
                let s = score_with_set(self.model, y, &r.s_final, r.tau_mem_ref, &self.cfg.seeds.localization)?;
                let f = score_with_set(self.model, y, &r.s_final, r.tau_mem_ref, &self.cfg.seeds.evaluation)?;
                all_loc &= s < r.tau_mem_ref + 1e-9;
                fresh_ok += (f < r.tau_mem_ref) as usize;
                parts.push(format!("{s:.3}/{f:.3}<{:.3}", r.tau_mem_ref));
            }
            let n = self.results.len();
            let ok = all_loc && fresh_ok * 5 >= n * 4;
            Ok((ok, format!("loc/fresh vs ref [{}]; fresh below {fresh_ok}/{n}", parts.join(", "))))
        })
    }

    pub fn refinement(&self) -> Result<CriterionResult> {
        timed(4, "refinement shrinks", || {
            let ini: Vec<usize> = self.results.iter().map(|r| r.s_initial.len()).collect();
            let fin: Vec<usize> = self.results.iter().map(|r| r.s_final.len()).collect();
            let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len().max(1) as f64;
            let each = ini.iter().zip(&fin).all(|(i, f)| f <= i);
            let ok = each && mean(&fin) <= 0.5 * mean(&ini);
            Ok((ok, format!("initial {ini:?} -> final {fin:?}")))
        })
    }

    pub fn random_baseline(&self) -> Result<CriterionResult> {
        timed(5, "random baseline fails", || {
            let mut ok = true;
            let mut parts = Vec::new();
            for ((y, _), r) in self.memorized.iter().zip(&self.results) {
                let trials = self.cfg.seeds.baseline();
                match self.random_trials_above(y, &r.s_final, &trials) {
                    Ok(above) => {
                        ok &= above * 5 >= trials.len() * 4;
                        parts.push(format!("{above}/{}", trials.len()));
                    }
                    // a layer more than half covered by s_final has no disjoint matched draw
                    Err(e @ NemoError::Config(_)) => {
                        ok = false;
                        parts.push(format!("infeasible ({e})"));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((ok, format!("trials staying above tau per prompt [{}]", parts.join(", "))))
        })
    }

    fn random_trials_above(&self, y: &Prompt, set: &NeuronSet, trials: &[u64]) -> Result<usize> {
        let mut above = 0;
        for &seed in trials {
            let rs = random_baseline(&self.model.arch, set, seed)?;
            above += (score_with_set(self.model, y, &rs, self.tau(), &self.cfg.seeds.localization)? >= self.tau()) as usize;
        }
        Ok(above)
    }

    pub fn mitigation(&self) -> Result<CriterionResult> {
        timed(6, "mitigation ordering", || {
            let gen = self.cfg.gen();
            let mut ok = true;
            let mut parts = Vec::new();
            for ((y, _), r) in self.memorized.iter().zip(&self.results) {
                let mask = NeuronMask::scaled(&r.s_final, self.cfg.scale);
                let base = generate(self.model, y, &Ablation::none(self.model), &gen)?;
                let masked = generate(self.model, y, &Ablation::from_mask(self.model, &mask)?, &gen)?;
                let g = paired_similarity(&masked, &base);
                let (d0, d1) = (mean_pairwise_similarity(&base), mean_pairwise_similarity(&masked));
                ok &= g <= 0.5 && d1 < d0 - 0.2;
                parts.push(format!("gen {g:.3} div {d0:.3}->{d1:.3}"));
            }
            Ok((ok, parts.join("; ")))
        })
    }

    pub fn probes(&self) -> Result<QualityProbes> {
        let hold = holdout_samples(&self.model.arch, self.cfg.data(), self.cfg.n_calibration, self.cfg.seeds.calibration_prompts)?;
        QualityProbes::build(self.model, self.cfg.data(), &hold, self.cfg.probes_per_prompt, self.cfg.seeds.probes)
    }

    pub fn quality(&self) -> Result<CriterionResult> {
        timed(7, "quality preservation", || {
            let u = self.union();
            let abl = Ablation::from_mask(self.model, &NeuronMask::deactivate(&u))?;
            let q = quality_delta(self.model, &abl, &self.probes()?)?;
            Ok((q <= 1.05, format!("quality_delta {q:.4} with {} neurons masked", u.len())))
        })
    }

    pub fn nonmemorized(&self) -> Result<CriterionResult> {
        timed(8, "non-memorized prompts yield empty sets", || {
            let fresh = holdout_prompts(&self.model.arch, self.cfg.data(), self.cfg.n_fresh, self.cfg.seeds.fresh_prompts)?;
            let loc = self.cfg.localizer();
            let mut empty = 0;
            let mut sizes = Vec::new();
            for y in &fresh {
                let r = localize(y, self.model, &self.calib.stats, &self.calib.tau, &loc)?;
                empty += r.s_final.is_empty() as usize;
                sizes.push(r.s_final.len());
            }
            Ok((empty * 5 >= fresh.len() * 4, format!("{empty}/{} empty; sizes {sizes:?}", fresh.len())))
        })
    }

    pub fn scaling(&self) -> Result<CriterionResult> {
        timed(10, "scaling sweep", || {
            let scales = [0.75, 0.5, 0.25, 0.0, -0.25, -0.5, -1.0];
            let gen = self.cfg.gen();
            let mut ok = true;
            let mut parts = Vec::new();
            for ((y, _), r) in self.memorized.iter().zip(&self.results) {
                let sw: Vec<f64> = scale_sweep(self.model, y, &r.s_final, &scales, &gen)?.into_iter().map(|x| x.1).collect();
                let mono = sw[..4].windows(2).all(|w| w[1] <= w[0]);
                let flat = sw[4..].iter().all(|v| (v - sw[3]).abs() <= 0.1);
                ok &= mono && flat;
                parts.push(format!("[{}]", sw.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")));
            }
            Ok((ok, parts.join(" ")))
        })
    }

    pub fn guidance_cut(&self) -> Result<CriterionResult> {
        timed(11, "guidance-cut exactness", || guidance_cut(self.model))
    }

    /// Diversity of unmasked generations for each duplicated prompt, for reports.
    pub fn diversity(&self) -> Result<Vec<f64>> {
        let gen = self.cfg.gen();
        self.memorized.iter().map(|(y, _)| diversity_proxy(self.model, y, &NeuronMask::empty(), &gen)).collect()
    }
}

pub fn guidance_cut(model: &DenoiserModel) -> Result<(bool, String)> {
    let abl = all_values_off(model);
    let [c, h, w] = model.arch.image_shape();
    let x = LatentImage::gaussian(c, h, w, 5);
    let a = Prompt::new(vec![1, 9, 20], model.arch.n_tok);
    let b = Prompt::new(vec![memorized_prompt(0, &model.arch).tokens[0]], model.arch.n_tok);
    let mut equal = true;
    for t in [0, model.schedule.len() / 2, model.schedule.len() - 1] {
        let pa = model.forward_ablated(&x, t, &a, &abl)?;
        let pb = model.forward_ablated(&x, t, &b, &abl)?;
        equal &= pa.data.iter().zip(&pb.data).all(|(u, v)| u.to_bits() == v.to_bits());
    }
    let unmasked_differs = model.forward(&x, 0, &a, &NeuronMask::empty())? != model.forward(&x, 0, &b, &NeuronMask::empty())?;
    Ok((equal, format!("bit-equal across prompts at 3 timesteps: {equal}; prompts differ unmasked: {unmasked_differs}")))
}

pub fn ssim_equivalence() -> Result<CriterionResult> {
    timed(1, "SSIM oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        let mut self_exact = true;
        for _ in 0..100 {
            let mut img = || {
                let data = (0..3 * 16 * 16).map(|_| rng.random::<f64>()).collect();
                LatentImage::from_vec(3, 16, 16, data)
            };
            let (a, b) = (img()?, img()?);
            worst = worst.max((ssim(&a, &b)? - ssim_reference(&a, &b)).abs());
            self_exact &= ssim(&a, &a)? == 1.0;
        }
        Ok((worst <= 1e-6 && self_exact, format!("max |lib - reference| {worst:.2e} over 100 pairs; ssim(a,a)=1 exactly: {self_exact}")))
    })
}

pub fn gradient_criterion() -> Result<CriterionResult> {
    timed(12, "gradient check", || {
        let g = gradient_check(3, 1e-3)?;
        Ok((g.max_rel_error < 1e-3, format!("max relative error {:.2e} over {} parameters", g.max_rel_error, g.params)))
    })
}

/// Planted single-neuron fixture, then oracle vs NeMo on a trained tiny model.
pub fn oracle_criterion(tiny: &DenoiserModel, cfg: &RunConfig) -> Result<CriterionResult> {
    timed(9, "oracle cross-validation", || {
        let seeds = &cfg.seeds.localization;
        let fx = planted_fixture(3, 100.0, seeds)?;
        let cert = brute_force_minimal_sets("planted", &fx.trigger, &fx.model, &fx.tau, cfg.oracle_max_card, seeds)?;
        let expected: NeuronSet = [fx.neuron].into_iter().collect();
        let hold = holdout_prompts(&fx.model.arch, cfg.data(), cfg.n_calibration, cfg.seeds.calibration_prompts)?;
        let stats = compute_activation_stats(&fx.model, &hold)?;
        let r = localize(&fx.trigger, &fx.model, &stats, &fx.tau, &cfg.localizer())?;
        let planted_ok = cert.minimal_sufficient_sets == vec![expected.clone()] && r.s_final == expected;
        let mut detail = format!("planted: certificate {:?}, s_final {:?}", cert.minimal_sufficient_sets, r.s_final);

        let suite = Suite::new(tiny, cfg)?;
        let mut trained_ok = true;
        for (i, ((y, _), res)) in suite.memorized.iter().zip(&suite.results).enumerate() {
            let c = brute_force_minimal_sets(&format!("mem{i}"), y, tiny, &suite.calib.tau, cfg.oracle_max_card, seeds)?;
            // nothing up to max_card suffices: the minimum is at least max_card + 1
            let (min_lb, shown) = match c.min_cardinality() {
                Some(m) => (m, format!("{m} ({} sets)", c.minimal_sufficient_sets.len())),
                None => (c.max_card + 1, format!(">= {}", c.max_card + 1)),
            };
            trained_ok &= res.s_final.len() <= 3 * min_lb;
            detail.push_str(&format!("; mem{i}: oracle min {shown}, |s_final| {}", res.s_final.len()));
        }
        Ok((planted_ok && trained_ok, detail))
    })
}

fn settle(id: u32, name: &str, r: Result<CriterionResult>) -> CriterionResult {
    r.unwrap_or_else(|e| CriterionResult { id, name: name.to_string(), passed: false, detail: format!("error: {e}"), seconds: 0.0 })
}

/// All twelve checks in id order. An error inside one check becomes a failed line.
pub fn run_criteria(s: &Suite, tiny: &DenoiserModel, tiny_cfg: &RunConfig) -> Vec<CriterionResult> {
    vec![
        settle(1, "SSIM oracle equivalence", ssim_equivalence()),
        settle(2, "detection separation", s.detection()),
        settle(3, "localization terminates and mitigates", s.termination()),
        settle(4, "refinement shrinks", s.refinement()),
        settle(5, "random baseline fails", s.random_baseline()),
        settle(6, "mitigation ordering", s.mitigation()),
        settle(7, "quality preservation", s.quality()),
        settle(8, "non-memorized prompts yield empty sets", s.nonmemorized()),
        settle(9, "oracle cross-validation", oracle_criterion(tiny, tiny_cfg)),
        settle(10, "scaling sweep", s.scaling()),
        settle(11, "guidance-cut exactness", s.guidance_cut()),
        settle(12, "gradient check", gradient_criterion()),
    ]
}
