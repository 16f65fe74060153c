//! Evaluation proxies: a fixed image embedding standing in for a learned copy
//! detector, generation-based similarity and diversity, a denoising-loss quality
//! ratio, random baselines and whole-layer ablation diagnostics.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpm_core::{add_noise, sample_ablated, LatentImage};
use crate::error::{NemoError, Result};
use crate::localizer::NeuronSet;
use crate::mem_score::{prompt_score_ablated, MemThreshold};
use crate::par;
use crate::toy_model::data::{render, DataConfig, Sample};
use crate::toy_model::{Ablation, Arch, DenoiserModel, NeuronId, NeuronMask, Prompt};

/// Side of the downsampled pixel grid in the embedding.
pub const EMBED_GRID: usize = 4;
/// Intensity histogram bins per channel over [-1, 1].
pub const HIST_BINS: usize = 8;
/// Copy-similarity at or above which a memorized prompt counts as verbatim.
pub const VERBATIM_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEmbedding {
    pub vector: Vec<f64>,
}

impl ImageEmbedding {
    /// Cosine similarity, clamped to [-1, 1]; identical vectors give exactly 1.
    pub fn cosine(&self, other: &Self) -> f64 {
        if self.vector == other.vector {
            return 1.0;
        }
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        dot.clamp(-1.0, 1.0)
    }
}

/// Block-mean pixels on a 4x4 grid per channel followed by per-channel 8-bin
/// intensity histograms (fractions), scaled to unit length.
pub fn embed(img: &LatentImage) -> ImageEmbedding {
    let (c, h, w) = (img.channels, img.height, img.width);
    let g = EMBED_GRID;
    let mut v = vec![0.0; c * g * g + c * HIST_BINS];
    let mut counts = vec![0usize; g * g];
    for y in 0..h {
        for x in 0..w {
            counts[(y * g / h) * g + x * g / w] += 1;
        }
    }
    for ch in 0..c {
        let plane = img.plane(ch);
        let cells = &mut v[ch * g * g..(ch + 1) * g * g];
        for y in 0..h {
            for x in 0..w {
                cells[(y * g / h) * g + x * g / w] += plane[y * w + x];
            }
        }
        cells.iter_mut().zip(&counts).for_each(|(s, &n)| *s /= n.max(1) as f64);
        let hist = &mut v[c * g * g + ch * HIST_BINS..c * g * g + (ch + 1) * HIST_BINS];
        for &p in plane {
            let b = (((p.clamp(-1.0, 1.0) + 1.0) / 2.0) * HIST_BINS as f64) as usize;
            hist[b.min(HIST_BINS - 1)] += 1.0 / plane.len() as f64;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    ImageEmbedding { vector: v }
}

/// Sampler settings shared by every generation-based metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub seeds: Vec<u64>,
    pub steps: usize,
}

impl Default for GenSettings {
    fn default() -> Self {
        Self { seeds: (101..=110).collect(), steps: 50 }
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.len() < 2 {
        return Err(NemoError::Config(format!("need at least 2 evaluation seeds, got {}", seeds.len())));
    }
    Ok(())
}

/// One image per seed, in seed order.
pub fn generate(model: &DenoiserModel, y: &Prompt, abl: &Ablation, gen: &GenSettings) -> Result<Vec<LatentImage>> {
    par::map(&gen.seeds, |&s| sample_ablated(model, y, s, gen.steps, abl)).into_iter().collect()
}

/// Mean seed-paired cosine between two generation lists.
pub fn paired_similarity(a: &[LatentImage], b: &[LatentImage]) -> f64 {
    let sims: Vec<f64> = a.iter().zip(b).map(|(x, y)| embed(x).cosine(&embed(y))).collect();
    sims.iter().sum::<f64>() / sims.len().max(1) as f64
}

/// Maximum cosine of any generation to the reference image.
pub fn max_similarity(images: &[LatentImage], reference: &LatentImage) -> f64 {
    let r = embed(reference);
    images.iter().map(|x| embed(x).cosine(&r)).fold(f64::NEG_INFINITY, f64::max)
}

/// Mean cosine over all unordered pairs.
pub fn mean_pairwise_similarity(images: &[LatentImage]) -> f64 {
    let e: Vec<ImageEmbedding> = images.iter().map(embed).collect();
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            acc += e[i].cosine(&e[j]);
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        acc / n as f64
    }
}

/// Similarity of masked to unmasked generations, paired by seed.
pub fn sscd_gen_proxy(model: &DenoiserModel, y: &Prompt, mask: &NeuronMask, gen: &GenSettings) -> Result<f64> {
    check_seeds(&gen.seeds)?;
    let base = generate(model, y, &Ablation::none(model), gen)?;
    let masked = generate(model, y, &Ablation::from_mask(model, mask)?, gen)?;
    Ok(paired_similarity(&masked, &base))
}

pub fn sscd_orig_proxy(
    model: &DenoiserModel,
    y: &Prompt,
    training_image: &LatentImage,
    mask: &NeuronMask,
    gen: &GenSettings,
) -> Result<f64> {
    check_seeds(&gen.seeds)?;
    Ok(max_similarity(&generate(model, y, &Ablation::from_mask(model, mask)?, gen)?, training_image))
}

/// Mean pairwise similarity across seeds; lower means more diverse.
pub fn diversity_proxy(model: &DenoiserModel, y: &Prompt, mask: &NeuronMask, gen: &GenSettings) -> Result<f64> {
    check_seeds(&gen.seeds)?;
    Ok(mean_pairwise_similarity(&generate(model, y, &Ablation::from_mask(model, mask)?, gen)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemType {
    Verbatim,
    Template,
    None,
}

impl std::fmt::Display for MemType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MemType::Verbatim => "verbatim",
            MemType::Template => "template",
            MemType::None => "none",
        })
    }
}

/// Verbatim when an unmasked generation reproduces the training image; template
/// when only the noise-difference detector flags the prompt.
pub fn classify_mem_type(
    model: &DenoiserModel,
    y: &Prompt,
    training_image: Option<&LatentImage>,
    tau: &MemThreshold,
    detect_seeds: &[u64],
    gen: &GenSettings,
) -> Result<MemType> {
    if let Some(img) = training_image {
        if sscd_orig_proxy(model, y, img, &NeuronMask::empty(), gen)? >= VERBATIM_THRESHOLD {
            return Ok(MemType::Verbatim);
        }
    }
    let score = prompt_score_ablated(model, y, &Ablation::none(model), detect_seeds)?;
    Ok(if score >= tau.tau_mem { MemType::Template } else { MemType::None })
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub prompt: Prompt,
    pub x_t: LatentImage,
    pub eps: LatentImage,
    pub t: usize,
}

/// Fixed (x0, eps, t) denoising probes on holdout pairs.
#[derive(Debug, Clone)]
pub struct QualityProbes {
    pub probes: Vec<Probe>,
}

impl QualityProbes {
    pub fn build(
        model: &DenoiserModel,
        data: &DataConfig,
        holdout: &[Sample],
        per_prompt: usize,
        seed: u64,
    ) -> Result<Self> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = model.arch.image_shape();
        let mut probes = Vec::with_capacity(holdout.len() * per_prompt);
        for s in holdout {
            let x0 = render(&model.arch, data, &s.content);
            for _ in 0..per_prompt {
                let eps = LatentImage::gaussian(c, h, w, rng.random());
                let t = rng.random_range(0..model.schedule.len());
                let x_t = add_noise(&x0, &eps, t, &model.schedule)?;
                probes.push(Probe { prompt: s.prompt.clone(), x_t, eps, t });
            }
        }
        Ok(Self { probes })
    }

    /// Unweighted noise-prediction MSE over all probes, with prompts optionally
    /// replaced by the all-pad prompt.
    pub fn mse(&self, model: &DenoiserModel, abl: &Ablation, unconditional: bool) -> Result<f64> {
        let empty = Prompt::new(Vec::new(), model.arch.n_tok);
        let per: Vec<Result<f64>> = par::map(&self.probes, |p| {
            let y = if unconditional { &empty } else { &p.prompt };
            let pred = model.forward_ablated(&p.x_t, p.t, y, abl)?;
            Ok(pred.data.iter().zip(&p.eps.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64)
        });
        let mut acc = 0.0;
        for v in per {
            acc += v?;
        }
        Ok(acc / self.probes.len().max(1) as f64)
    }
}

/// Holdout denoising MSE with the ablation over MSE without it.
pub fn quality_delta(model: &DenoiserModel, abl: &Ablation, probes: &QualityProbes) -> Result<f64> {
    let base = probes.mse(model, &Ablation::none(model), false)?;
    let masked = probes.mse(model, abl, false)?;
    Ok(masked / base)
}

/// How much the prompt still helps: unconditional MSE minus conditional MSE,
/// masked over unmasked. Stands in for a text-alignment score.
pub fn prompt_gap_ratio(model: &DenoiserModel, abl: &Ablation, probes: &QualityProbes) -> Result<f64> {
    let none = Ablation::none(model);
    let gap = |a: &Ablation| -> Result<f64> { Ok(probes.mse(model, a, true)? - probes.mse(model, a, false)?) };
    Ok(gap(abl)? / gap(&none)?)
}

/// Random neurons matching `exclude`'s per-layer counts, disjoint from it.
pub fn random_baseline(arch: &Arch, exclude: &NeuronSet, seed: u64) -> Result<NeuronSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = NeuronSet::new();
    for l in 0..arch.n_layers() {
        let want = exclude.iter().filter(|n| n.layer == l).count();
        if want == 0 {
            continue;
        }
        let pool: Vec<usize> = (0..arch.d_attn).filter(|&i| !exclude.contains(&NeuronId::new(l, i))).collect();
        if pool.len() < want {
            return Err(NemoError::Config(format!(
                "layer {l}: cannot draw {want} random neurons from {} remaining",
                pool.len()
            )));
        }
        out.extend(index::sample(&mut rng, pool.len(), want).into_iter().map(|j| NeuronId::new(l, pool[j])));
    }
    Ok(out)
}

/// A uniformly random `fraction` of all value neurons.
pub fn random_fraction(arch: &Arch, fraction: f64, seed: u64) -> NeuronSet {
    let all: Vec<NeuronId> = arch.neurons().collect();
    let k = ((all.len() as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, all.len(), k.min(all.len())).into_iter().map(|i| all[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Value,
    Key,
    Conv,
}

impl std::fmt::Display for AblationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationKind::Value => "value",
            AblationKind::Key => "key",
            AblationKind::Conv => "conv",
        })
    }
}

/// Deactivates `fraction` of layer `layer` of the given kind (whole layer at 1.0).
pub fn layer_ablation(model: &DenoiserModel, kind: AblationKind, layer: usize, fraction: f64, seed: u64) -> Result<Ablation> {
    let a = &model.arch;
    if layer >= a.n_layers() {
        return Err(NemoError::Config(format!("layer {layer} out of range")));
    }
    let width = if kind == AblationKind::Conv { a.channels } else { a.d_attn };
    let k = ((width as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scales = vec![1.0; width];
    for i in index::sample(&mut rng, width, k.min(width)) {
        scales[i] = 0.0;
    }
    let mut abl = Ablation::none(model);
    match kind {
        AblationKind::Value => abl.value[layer] = scales,
        AblationKind::Key => {
            let mut ks = vec![vec![1.0; a.d_attn]; a.n_layers()];
            ks[layer] = scales;
            abl.key = Some(ks);
        }
        AblationKind::Conv => {
            let mut cs = vec![vec![1.0; a.channels]; a.n_layers()];
            cs[layer] = scales;
            abl.conv = Some(cs);
        }
    }
    Ok(abl)
}

/// Every value layer deactivated at once: the prompt no longer reaches the output.
pub fn all_values_off(model: &DenoiserModel) -> Ablation {
    let mut abl = Ablation::none(model);
    abl.value.iter_mut().flatten().for_each(|s| *s = 0.0);
    abl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAblationRow {
    pub kind: AblationKind,
    pub layer: usize,
    pub fraction: f64,
    pub prompt: usize,
    pub sscd_orig_proxy: f64,
    pub mem_score: f64,
    pub quality_delta: f64,
}

/// Value and key layers are ablated whole; convolutions at `conv_fraction`.
/// `prompts` pairs each prompt with its training image.
pub fn layer_ablation_study(
    model: &DenoiserModel,
    prompts: &[(Prompt, LatentImage)],
    probes: &QualityProbes,
    score_seeds: &[u64],
    gen: &GenSettings,
    conv_fraction: f64,
    seed: u64,
) -> Result<Vec<LayerAblationRow>> {
    let mut rows = Vec::new();
    for kind in [AblationKind::Value, AblationKind::Key, AblationKind::Conv] {
        let fraction = if kind == AblationKind::Conv { conv_fraction } else { 1.0 };
        for layer in 0..model.arch.n_layers() {
            let abl = layer_ablation(model, kind, layer, fraction, seed + layer as u64)?;
            let qd = quality_delta(model, &abl, probes)?;
            for (i, (y, img)) in prompts.iter().enumerate() {
                rows.push(LayerAblationRow {
                    kind,
                    layer,
                    fraction,
                    prompt: i,
                    sscd_orig_proxy: max_similarity(&generate(model, y, &abl, gen)?, img),
                    mem_score: prompt_score_ablated(model, y, &abl, score_seeds)?,
                    quality_delta: qd,
                });
            }
        }
    }
    Ok(rows)
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    median(&xs.iter().map(|x| (x - m).abs()).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompt_id: String,
    pub condition: String,
    pub sscd_orig_proxy: f64,
    pub sscd_gen_proxy: f64,
    pub diversity_proxy: f64,
    pub quality_delta: f64,
    pub deactivated_count: usize,
    pub mem_type: MemType,
}

/// One row per prompt and mask condition; column order follows the field order.
pub fn reports_to_csv(rows: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| NemoError::Config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| NemoError::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Masked-generation similarity for each scale factor applied to `set`.
pub fn scale_sweep(
    model: &DenoiserModel,
    y: &Prompt,
    set: &NeuronSet,
    scales: &[f64],
    gen: &GenSettings,
) -> Result<Vec<(f64, f64)>> {
    check_seeds(&gen.seeds)?;
    let base = generate(model, y, &Ablation::none(model), gen)?;
    scales
        .iter()
        .map(|&s| {
            let abl = Ablation::from_mask(model, &NeuronMask::scaled(set, s))?;
            Ok((s, paired_similarity(&generate(model, y, &abl, gen)?, &base)))
        })
        .collect()
}
