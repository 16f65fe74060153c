//! Two-stage neuron localization: z-score outliers plus top-k candidates grown
//! until memorization breaks, then layer-wise and neuron-wise pruning.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{NemoError, Result};
use crate::mem_score::{noise_differences, score_or_zero, MemThreshold, NoiseDifference, MIN_HOLDOUT};
use crate::toy_model::{ActivationMap, DenoiserModel, NeuronId, Prompt};

/// Ordered, deduplicated neuron set; iteration is (layer, index) ascending.
pub type NeuronSet = BTreeSet<NeuronId>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub holdout_size: usize,
}

impl ActivationStats {
    /// Per-neuron mean and population standard deviation.
    pub fn from_maps(maps: &[ActivationMap]) -> Result<Self> {
        let first = maps.first().ok_or(NemoError::TooFewPrompts { need: 1, got: 0 })?;
        let n = maps.len() as f64;
        let mut mean: Vec<Vec<f64>> = first.layers.iter().map(|l| vec![0.0; l.len()]).collect();
        for m in maps {
            if m.layers.len() != mean.len() || m.layers.iter().zip(&mean).any(|(a, b)| a.len() != b.len()) {
                return Err(NemoError::Shape {
                    expected: mean.iter().map(Vec::len).collect(),
                    got: m.layers.iter().map(Vec::len).collect(),
                });
            }
            for (ml, al) in mean.iter_mut().zip(&m.layers) {
                ml.iter_mut().zip(al).for_each(|(s, a)| *s += a);
            }
        }
        mean.iter_mut().flatten().for_each(|s| *s /= n);
        // constant neurons: keep the exact value so the spread comes out as 0
        for (l, ml) in mean.iter_mut().enumerate() {
            for (i, mu) in ml.iter_mut().enumerate() {
                let v = first.layers[l][i];
                if maps.iter().all(|m| m.layers[l][i] == v) {
                    *mu = v;
                }
            }
        }
        let mut std: Vec<Vec<f64>> = mean.iter().map(|l| vec![0.0; l.len()]).collect();
        for m in maps {
            for ((sl, al), ml) in std.iter_mut().zip(&m.layers).zip(&mean) {
                for ((s, a), mu) in sl.iter_mut().zip(al).zip(ml) {
                    *s += (a - mu) * (a - mu);
                }
            }
        }
        std.iter_mut().flatten().for_each(|s| *s = (*s / n).sqrt());
        Ok(Self { mean, std, holdout_size: maps.len() })
    }
}

pub fn compute_activation_stats(model: &DenoiserModel, holdout: &[Prompt]) -> Result<ActivationStats> {
    if holdout.len() < MIN_HOLDOUT {
        return Err(NemoError::TooFewPrompts { need: MIN_HOLDOUT, got: holdout.len() });
    }
    let maps: Result<Vec<_>> = holdout.iter().map(|y| model.record_activations(y)).collect();
    ActivationStats::from_maps(&maps?)
}

/// z = (a - mu) / sigma; with sigma = 0 the score is 0 when a = mu and +inf otherwise.
pub fn z_scores(act: &ActivationMap, stats: &ActivationStats) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(act.layers.len());
    for (l, al) in act.layers.iter().enumerate() {
        let mut zl = Vec::with_capacity(al.len());
        for (i, a) in al.iter().enumerate() {
            let missing = || NemoError::MissingStats { layer: l, index: i };
            let mu = *stats.mean.get(l).and_then(|v| v.get(i)).ok_or_else(missing)?;
            let sd = *stats.std.get(l).and_then(|v| v.get(i)).ok_or_else(missing)?;
            zl.push(if sd > 0.0 {
                (a - mu) / sd
            } else if *a == mu {
                0.0
            } else {
                f64::INFINITY
            });
        }
        out.push(zl);
    }
    Ok(out)
}

/// Neurons with |z| above `theta` plus, per layer, the `k` largest activations.
pub fn ood_from_activations(act: &ActivationMap, stats: &ActivationStats, theta: f64, k: usize) -> Result<NeuronSet> {
    let z = z_scores(act, stats)?;
    let mut set = NeuronSet::new();
    for (l, (zl, al)) in z.iter().zip(&act.layers).enumerate() {
        for (i, zi) in zl.iter().enumerate() {
            if zi.abs() > theta {
                set.insert(NeuronId::new(l, i));
            }
        }
        if k > 0 {
            let mut order: Vec<usize> = (0..al.len()).collect();
            // stable sort keeps the lower index first on ties
            order.sort_by(|&a, &b| al[b].abs().total_cmp(&al[a].abs()));
            set.extend(order.into_iter().take(k).map(|i| NeuronId::new(l, i)));
        }
    }
    Ok(set)
}

pub fn ood_neurons(
    y: &Prompt,
    theta: f64,
    k: usize,
    stats: &ActivationStats,
    model: &DenoiserModel,
) -> Result<NeuronSet> {
    ood_from_activations(&model.record_activations(y)?, stats, theta, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub theta_start: f64,
    pub theta_step: f64,
    pub theta_min: f64,
    /// Seeds for every noise-difference evaluation during localization.
    pub seeds: Vec<u64>,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self { theta_start: 5.0, theta_step: 0.25, theta_min: 1.0, seeds: (1..=10).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub theta_act: f64,
    pub k: usize,
    pub candidates: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub s_initial: NeuronSet,
    pub s_final: NeuronSet,
    pub tau_mem_ref: f64,
    pub theta_act_final: f64,
    pub k_final: usize,
    pub trace: Vec<Round>,
    /// Scores evaluated during refinement, in order.
    pub refine_scores: Vec<f64>,
}

/// Memorization score of `y` with `set` deactivated against precomputed unblocked differences.
pub fn blocked_score(
    model: &DenoiserModel,
    y: &Prompt,
    unblocked: &[NoiseDifference],
    set: &NeuronSet,
    tau: f64,
    seeds: &[u64],
) -> Result<f64> {
    let ids: Vec<NeuronId> = set.iter().copied().collect();
    let blocked = noise_differences(model, y, &ids, tau, seeds)?;
    score_or_zero(unblocked, &blocked)
}

/// Memorization score of `y` with `set` deactivated, filtering seeds at `tau`.
pub fn score_with_set(model: &DenoiserModel, y: &Prompt, set: &NeuronSet, tau: f64, seeds: &[u64]) -> Result<f64> {
    let unblocked = noise_differences(model, y, &[], tau, seeds)?;
    blocked_score(model, y, &unblocked, set, tau, seeds)
}

/// Grows the candidate set (theta down by one step, k up by one per round)
/// until the score drops below tau or theta passes `theta_min`.
pub fn initial_selection(
    y: &Prompt,
    model: &DenoiserModel,
    stats: &ActivationStats,
    tau: &MemThreshold,
    cfg: &LocalizerConfig,
) -> Result<SelectionResult> {
    let act = model.record_activations(y)?;
    let unblocked = noise_differences(model, y, &[], tau.tau_mem, &cfg.seeds)?;
    let mut theta = cfg.theta_start;
    let mut k = 0;
    let mut trace = Vec::new();
    let base = score_or_zero(&unblocked, &unblocked)?;
    if base < tau.tau_mem {
        trace.push(Round { theta_act: theta, k, candidates: 0, score: base });
        return Ok(SelectionResult {
            s_initial: NeuronSet::new(),
            s_final: NeuronSet::new(),
            tau_mem_ref: tau.tau_mem,
            theta_act_final: theta,
            k_final: k,
            trace,
            refine_scores: Vec::new(),
        });
    }
    loop {
        let cand = ood_from_activations(&act, stats, theta, k)?;
        let score = blocked_score(model, y, &unblocked, &cand, tau.tau_mem, &cfg.seeds)?;
        trace.push(Round { theta_act: theta, k, candidates: cand.len(), score });
        let done = score < tau.tau_mem;
        if done || theta < cfg.theta_min {
            return Ok(SelectionResult {
                s_initial: cand,
                s_final: NeuronSet::new(),
                tau_mem_ref: if done { tau.tau_mem } else { score },
                theta_act_final: theta,
                k_final: k,
                trace,
                refine_scores: Vec::new(),
            });
        }
        theta -= cfg.theta_step;
        k += 1;
    }
}

/// Layer pass then neuron pass, both in ascending (layer, index) order; a layer
/// or neuron is dropped when the rest of the set alone keeps the score below `tau_ref`.
pub fn refine(
    s_initial: &NeuronSet,
    y: &Prompt,
    model: &DenoiserModel,
    tau_ref: f64,
    seeds: &[u64],
) -> Result<(NeuronSet, Vec<f64>)> {
    let mut refined = s_initial.clone();
    let mut scores = Vec::new();
    if refined.is_empty() {
        return Ok((refined, scores));
    }
    let unblocked = noise_differences(model, y, &[], tau_ref, seeds)?;
    let layers: BTreeSet<usize> = refined.iter().map(|n| n.layer).collect();
    for l in layers {
        let rest: NeuronSet = refined.iter().filter(|n| n.layer != l).copied().collect();
        let s = blocked_score(model, y, &unblocked, &rest, tau_ref, seeds)?;
        scores.push(s);
        if s < tau_ref {
            refined = rest;
        }
    }
    let snapshot: Vec<NeuronId> = refined.iter().copied().collect();
    for n in snapshot {
        let mut rest = refined.clone();
        rest.remove(&n);
        let s = blocked_score(model, y, &unblocked, &rest, tau_ref, seeds)?;
        scores.push(s);
        if s < tau_ref {
            refined = rest;
        }
    }
    Ok((refined, scores))
}

pub fn localize(
    y: &Prompt,
    model: &DenoiserModel,
    stats: &ActivationStats,
    tau: &MemThreshold,
    cfg: &LocalizerConfig,
) -> Result<SelectionResult> {
    let mut res = initial_selection(y, model, stats, tau, cfg)?;
    let (s_final, scores) = refine(&res.s_initial, y, model, res.tau_mem_ref, &cfg.seeds)?;
    res.s_final = s_final;
    res.refine_scores = scores;
    Ok(res)
}
