//! SSIM over first-step noise differences, the holdout threshold and seed filtering.

use serde::{Deserialize, Serialize};

use crate::ddpm_core::LatentImage;
use crate::error::{NemoError, Result};
use crate::par;
use crate::toy_model::{Ablation, DenoiserModel, NeuronId, NeuronMask, Prompt};

pub const SSIM_WINDOW: usize = 8;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Min-max normalised delta = eps_theta(x_T, T, y) - x_T for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDifference {
    pub seed: u64,
    pub delta: LatentImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemThreshold {
    pub tau_mem: f64,
    pub mean: f64,
    pub std: f64,
    pub holdout_size: usize,
}

impl MemThreshold {
    /// A bare threshold value, e.g. a refinement threshold.
    pub fn fixed(tau_mem: f64) -> Self {
        Self { tau_mem, mean: tau_mem, std: 0.0, holdout_size: 0 }
    }
}

/// Maps to [0, 1]; a constant tensor maps to 0.5 everywhere.
pub fn normalize(x: &mut LatentImage) {
    let (mn, mx) = x
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if mx > mn {
        let r = mx - mn;
        x.data.iter_mut().for_each(|v| *v = (*v - mn) / r);
    } else {
        x.data.iter_mut().for_each(|v| *v = 0.5);
    }
}

/// Prefix sums with one row/column of zero padding.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
}

/// Mean SSIM over all 8x8 windows (uniform weights), averaged over channels.
/// Images smaller than the window use one window covering the whole plane.
pub fn ssim(a: &LatentImage, b: &LatentImage) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w) = (a.height, a.width);
    let k = SSIM_WINDOW.min(h).min(w);
    let n = (k * k) as f64;
    let mut total = 0.0;
    for c in 0..a.channels {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let sa = integral(h, w, |i| pa[i]);
        let sb = integral(h, w, |i| pb[i]);
        let saa = integral(h, w, |i| pa[i] * pa[i]);
        let sbb = integral(h, w, |i| pb[i] * pb[i]);
        let sab = integral(h, w, |i| pa[i] * pb[i]);
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let ma = window_sum(&sa, w, y, x, k) / n;
                let mb = window_sum(&sb, w, y, x, k) / n;
                let va = window_sum(&saa, w, y, x, k) / n - ma * ma;
                let vb = window_sum(&sbb, w, y, x, k) / n - mb * mb;
                let cov = window_sum(&sab, w, y, x, k) / n - ma * mb;
                acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / a.channels as f64)
}

/// Normalised first-step noise differences for `seeds`, with `set` deactivated. Unfiltered.
pub fn raw_noise_differences(
    model: &DenoiserModel,
    y: &Prompt,
    mask: &NeuronMask,
    seeds: &[u64],
) -> Result<Vec<NoiseDifference>> {
    raw_noise_differences_ablated(model, y, &Ablation::from_mask(model, mask)?, seeds)
}

pub fn raw_noise_differences_ablated(
    model: &DenoiserModel,
    y: &Prompt,
    abl: &Ablation,
    seeds: &[u64],
) -> Result<Vec<NoiseDifference>> {
    let [c, h, w] = model.arch.image_shape();
    let t = model.schedule.len() - 1;
    par::map(seeds, |&seed| {
        let x = LatentImage::gaussian(c, h, w, seed);
        let mut delta = model.forward_ablated(&x, t, y, abl)?;
        delta.data.iter_mut().zip(&x.data).for_each(|(d, xv)| *d -= xv);
        normalize(&mut delta);
        Ok(NoiseDifference { seed, delta })
    })
    .into_iter()
    .collect()
}

/// Symmetric matrix of pairwise SSIM values (diagonal 1).
pub fn pairwise_ssim(ds: &[NoiseDifference]) -> Result<Vec<Vec<f64>>> {
    let n = ds.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let vals = par::map(&pairs, |&(i, j)| ssim(&ds[i].delta, &ds[j].delta));
    let mut m = vec![vec![1.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        let v = v?;
        m[i][j] = v;
        m[j][i] = v;
    }
    Ok(m)
}

/// Seed-filtered noise differences: a delta survives only if its best SSIM
/// against the other seeds reaches `tau`.
pub fn noise_differences(
    model: &DenoiserModel,
    y: &Prompt,
    set: &[NeuronId],
    tau: f64,
    seeds: &[u64],
) -> Result<Vec<NoiseDifference>> {
    let ds = raw_noise_differences(model, y, &NeuronMask::deactivate(set), seeds)?;
    let m = pairwise_ssim(&ds)?;
    let keep: Vec<bool> = (0..ds.len())
        .map(|i| (0..ds.len()).filter(|&j| j != i).map(|j| m[i][j]).fold(f64::NEG_INFINITY, f64::max) >= tau)
        .collect();
    Ok(ds.into_iter().zip(keep).filter_map(|(d, k)| k.then_some(d)).collect())
}

fn same_sample(a: &NoiseDifference, b: &NoiseDifference) -> bool {
    a.seed == b.seed && a.delta == b.delta
}

/// Maximum SSIM over cross pairs. Pairs holding the very same sample (same seed,
/// identical data) are skipped, so passing one list twice scores distinct pairs;
/// if nothing else is left (identical singletons) the skipped pairs are used.
pub fn memorization_score(a: &[NoiseDifference], b: &[NoiseDifference]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(NemoError::EmptySet);
    }
    let pairs: Vec<(usize, usize)> = (0..a.len())
        .flat_map(|i| (0..b.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| !same_sample(&a[i], &b[j]))
        .collect();
    let pairs = if pairs.is_empty() {
        (0..a.len()).flat_map(|i| (0..b.len()).map(move |j| (i, j))).collect()
    } else {
        pairs
    };
    let vals = par::map(&pairs, |&(i, j)| ssim(&a[i].delta, &b[j].delta));
    let mut best = f64::NEG_INFINITY;
    for v in vals {
        best = best.max(v?);
    }
    Ok(best)
}

/// Score used inside the localization loops: an empty filtered list means no
/// memorization evidence survived, which counts as score 0.
pub fn score_or_zero(a: &[NoiseDifference], b: &[NoiseDifference]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        Ok(0.0)
    } else {
        memorization_score(a, b)
    }
}

/// Unfiltered max pairwise SSIM over `seeds` with `mask` applied.
pub fn prompt_score(model: &DenoiserModel, y: &Prompt, mask: &NeuronMask, seeds: &[u64]) -> Result<f64> {
    prompt_score_ablated(model, y, &Ablation::from_mask(model, mask)?, seeds)
}

pub fn prompt_score_ablated(model: &DenoiserModel, y: &Prompt, abl: &Ablation, seeds: &[u64]) -> Result<f64> {
    let ds = raw_noise_differences_ablated(model, y, abl, seeds)?;
    let m = pairwise_ssim(&ds)?;
    let mut best = f64::NEG_INFINITY;
    for i in 0..ds.len() {
        for j in i + 1..ds.len() {
            best = best.max(m[i][j]);
        }
    }
    Ok(best)
}

/// Threshold = mean + c * std (population) of holdout prompt scores.
pub fn threshold_from_scores(scores: &[f64], c_sigma: f64) -> MemThreshold {
    if let Some(&first) = scores.first().filter(|&&f| scores.iter().all(|&s| s == f)) {
        return MemThreshold { tau_mem: first, mean: first, std: 0.0, holdout_size: scores.len() };
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    MemThreshold { tau_mem: mean + c_sigma * std, mean, std, holdout_size: scores.len() }
}

pub const MIN_HOLDOUT: usize = 20;

pub fn calibrate_threshold(
    model: &DenoiserModel,
    holdout: &[Prompt],
    seeds: &[u64],
    c_sigma: f64,
) -> Result<MemThreshold> {
    if holdout.len() < MIN_HOLDOUT {
        return Err(NemoError::TooFewPrompts { need: MIN_HOLDOUT, got: holdout.len() });
    }
    let scores: Result<Vec<f64>> =
        holdout.iter().map(|y| prompt_score(model, y, &NeuronMask::empty(), seeds)).collect();
    Ok(threshold_from_scores(&scores?, c_sigma))
}

pub fn detect_memorized(model: &DenoiserModel, y: &Prompt, tau: &MemThreshold, seeds: &[u64]) -> Result<(bool, f64)> {
    let s = prompt_score(model, y, &NeuronMask::empty(), seeds)?;
    Ok((s >= tau.tau_mem, s))
}

/// Probability that a random positive outscores a random negative (ties count half).
pub fn auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut acc = 0.0;
    for p in pos {
        for n in neg {
            acc += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    acc / (pos.len() * neg.len()) as f64
}
