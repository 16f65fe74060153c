//! Exhaustive ground truth for small models: every neuron subset up to a small
//! cardinality is deactivated and scored, and the smallest sufficient ones are
//! certified.

use serde::{Deserialize, Serialize};

use crate::error::{NemoError, Result};
use crate::localizer::{blocked_score, score_with_set, NeuronSet};
use crate::mem_score::{noise_differences, prompt_score, MemThreshold};
use crate::par;
use crate::toy_model::data::{FILLER_TOKENS, RARE_TOKENS};
use crate::toy_model::{Arch, DenoiserModel, NeuronId, NeuronMask, Prompt};

pub const MAX_UNIVERSE: usize = 64;
pub const MAX_CARDINALITY: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCertificate {
    pub prompt_id: String,
    pub tau_mem: f64,
    pub seeds: Vec<u64>,
    /// All minimum-cardinality sufficient sets in lexicographic order. Holds just
    /// the empty set when the prompt is not memorized to begin with, and nothing
    /// when no set up to `max_card` suffices.
    pub minimal_sufficient_sets: Vec<NeuronSet>,
    pub max_card: usize,
    pub universe: usize,
    pub evaluations: usize,
}

impl OracleCertificate {
    pub fn min_cardinality(&self) -> Option<usize> {
        self.minimal_sufficient_sets.first().map(|s| s.len())
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_text(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| NemoError::Corrupt(format!("certificate: {e}")))
    }
}

/// All k-subsets of 0..n in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

pub fn brute_force_minimal_sets(
    prompt_id: &str,
    y: &Prompt,
    model: &DenoiserModel,
    tau: &MemThreshold,
    max_card: usize,
    seeds: &[u64],
) -> Result<OracleCertificate> {
    let universe: Vec<NeuronId> = model.arch.neurons().collect();
    if universe.len() > MAX_UNIVERSE || max_card > MAX_CARDINALITY {
        return Err(NemoError::Budget { universe: universe.len(), max_card });
    }
    let tau_mem = tau.tau_mem;
    let unblocked = noise_differences(model, y, &[], tau_mem, seeds)?;
    let mut cert = OracleCertificate {
        prompt_id: prompt_id.to_string(),
        tau_mem,
        seeds: seeds.to_vec(),
        minimal_sufficient_sets: Vec::new(),
        max_card,
        universe: universe.len(),
        evaluations: 1,
    };
    if blocked_score(model, y, &unblocked, &NeuronSet::new(), tau_mem, seeds)? < tau_mem {
        cert.minimal_sufficient_sets.push(NeuronSet::new());
        return Ok(cert);
    }
    for k in 1..=max_card {
        let sets: Vec<NeuronSet> =
            combinations(universe.len(), k).into_iter().map(|c| c.into_iter().map(|i| universe[i]).collect()).collect();
        let scores = par::map(&sets, |s| blocked_score(model, y, &unblocked, s, tau_mem, seeds));
        cert.evaluations += sets.len();
        for (s, score) in sets.into_iter().zip(scores) {
            if score? < tau_mem {
                cert.minimal_sufficient_sets.push(s);
            }
        }
        if !cert.minimal_sufficient_sets.is_empty() {
            break;
        }
    }
    Ok(cert)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyCheck {
    pub score: f64,
    pub fresh_score: f64,
    /// Below tau on the localization seeds.
    pub sufficient: bool,
}

pub fn sufficiency(
    set: &NeuronSet,
    y: &Prompt,
    model: &DenoiserModel,
    tau: f64,
    seeds: &[u64],
    fresh_seeds: &[u64],
) -> Result<SufficiencyCheck> {
    let score = score_with_set(model, y, set, tau, seeds)?;
    let fresh_score = score_with_set(model, y, set, tau, fresh_seeds)?;
    Ok(SufficiencyCheck { score, fresh_score, sufficient: score < tau })
}

pub fn verify_sufficiency(
    set: &NeuronSet,
    y: &Prompt,
    model: &DenoiserModel,
    tau: f64,
    seeds: &[u64],
    fresh_seeds: &[u64],
) -> Result<bool> {
    Ok(sufficiency(set, y, model, tau, seeds, fresh_seeds)?.sufficient)
}

/// Re-evaluates a certificate: every listed set suffices and none of its proper
/// subsets does.
pub fn recheck_certificate(cert: &OracleCertificate, y: &Prompt, model: &DenoiserModel) -> Result<bool> {
    let tau = cert.tau_mem;
    for s in &cert.minimal_sufficient_sets {
        if score_with_set(model, y, s, tau, &cert.seeds)? >= tau {
            return Ok(false);
        }
        let items: Vec<NeuronId> = s.iter().copied().collect();
        for k in 0..items.len() {
            for c in combinations(items.len(), k) {
                let sub: NeuronSet = c.into_iter().map(|i| items[i]).collect();
                if score_with_set(model, y, &sub, tau, &cert.seeds)? < tau {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// A hand-wired tiny model in which a single value neuron carries the whole
/// conditioning signal of one trigger prompt.
#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub model: DenoiserModel,
    pub trigger: Prompt,
    pub neuron: NeuronId,
    pub tau: MemThreshold,
}

/// Every value projection is zeroed except one column that reads a private
/// embedding coordinate of the trigger token; keys are zeroed so attention is
/// uniform. Prompts without the trigger then all produce the same output, and
/// the threshold sits halfway between that baseline score and the trigger's.
pub fn planted_fixture(seed: u64, gain: f64, seeds: &[u64]) -> Result<PlantedFixture> {
    let arch = Arch::tiny();
    let mut model = DenoiserModel::new(arch.clone(), seed)?;
    let neuron = NeuronId::new(arch.n_layers() - 1, 5);
    let token = RARE_TOKENS.start;
    let dt = arch.d_text;
    let embed = model.tensor_mut("embed").expect("embedding table");
    for (tok, row) in embed.chunks_mut(dt).enumerate() {
        row[0] = if tok as u32 == token { 1.0 } else { 0.0 };
    }
    for l in 0..arch.n_layers() {
        model.tensor_mut(&format!("blocks.{l}.attn.wk")).expect("key weights").fill(0.0);
        let wv = model.tensor_mut(&format!("blocks.{l}.attn.wv")).expect("value weights");
        wv.fill(0.0);
        if l == neuron.layer {
            wv[neuron.index] = gain;
        }
    }
    let trigger = Prompt::new(vec![token], arch.n_tok);
    let plain = Prompt::new(vec![FILLER_TOKENS.start], arch.n_tok);
    let hi = prompt_score(&model, &trigger, &NeuronMask::empty(), seeds)?;
    let lo = prompt_score(&model, &plain, &NeuronMask::empty(), seeds)?;
    if hi <= lo {
        return Err(NemoError::Config(format!("planted signal too weak: {hi} vs baseline {lo}")));
    }
    Ok(PlantedFixture { model, trigger, neuron, tau: MemThreshold::fixed(0.5 * (hi + lo)) })
}

/// Direct per-window SSIM (population statistics, uniform 8x8 windows, stride 1,
/// mean over windows then channels). Independent of the prefix-sum version.
pub fn ssim_reference(a: &crate::ddpm_core::LatentImage, b: &crate::ddpm_core::LatentImage) -> f64 {
    use crate::mem_score::{C1, C2, SSIM_WINDOW};
    let (h, w) = (a.height, a.width);
    let k = SSIM_WINDOW.min(h).min(w);
    let mut per_channel = Vec::new();
    for c in 0..a.channels {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let mut vals = Vec::new();
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let idx: Vec<usize> = (y0..y0 + k).flat_map(|y| (x0..x0 + k).map(move |x| y * w + x)).collect();
                let n = idx.len() as f64;
                let ma = idx.iter().map(|&i| pa[i]).sum::<f64>() / n;
                let mb = idx.iter().map(|&i| pb[i]).sum::<f64>() / n;
                let va = idx.iter().map(|&i| (pa[i] - ma).powi(2)).sum::<f64>() / n;
                let vb = idx.iter().map(|&i| (pb[i] - mb).powi(2)).sum::<f64>() / n;
                let cov = idx.iter().map(|&i| (pa[i] - ma) * (pb[i] - mb)).sum::<f64>() / n;
                vals.push(((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2)));
            }
        }
        per_channel.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    per_channel.iter().sum::<f64>() / per_channel.len() as f64
}
