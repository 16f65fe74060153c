//! Minibatch training with hand-written gradients and AdamW.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{DataConfig, Dataset};
use super::forward::{Ablation, ForwardCache};
use super::{Arch, DenoiserModel, Prompt};
use crate::ddpm_core::{add_noise, LatentImage};
use crate::error::{NemoError, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub data: DataConfig,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Per-sample loss weight is min(1 / alpha_bar_t, weight_clip); 0 disables weighting.
    pub weight_clip: f64,
    /// L1 penalty on mean absolute value-layer activations.
    pub l1_value: f64,
    /// Decoupled weight decay on the attention output projections.
    pub weight_decay_out: f64,
    /// Training fails when the mean loss of the last steps exceeds this.
    pub loss_ceiling: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::toy(),
            data: DataConfig::default(),
            lr: 2e-3,
            steps: 4000,
            batch: 32,
            seed: 0,
            weight_clip: 1000.0,
            l1_value: 1.0,
            weight_decay_out: 0.0,
            loss_ceiling: 10.0,
        }
    }
}

impl TrainConfig {
    /// Settings for the 8x8 profile used by the exhaustive oracle.
    pub fn tiny() -> Self {
        Self { arch: Arch::tiny(), ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: LatentImage,
    pub eps: LatentImage,
    pub t: usize,
    pub prompt: Prompt,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// (step, mean loss since the previous entry)
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
}

pub struct Objective {
    pub weight_clip: f64,
    pub l1_value: f64,
}

impl Objective {
    fn weight(&self, model: &DenoiserModel, t: usize) -> f64 {
        if self.weight_clip > 0.0 {
            (1.0 / model.schedule.alpha_bar[t]).min(self.weight_clip)
        } else {
            1.0
        }
    }
}

/// Weighted noise-prediction MSE (mean over batch and pixels) plus the L1 term,
/// and its gradient with respect to every parameter.
pub fn loss_and_grad(model: &DenoiserModel, items: &[TrainItem], obj: &Objective) -> Result<(f64, Vec<f64>)> {
    let arch = &model.arch;
    let b = items.len() as f64;
    let numel = (arch.image_channels * arch.pixels()) as f64;
    let l1 = obj.l1_value / (arch.n_layers() * arch.d_attn * arch.n_tok) as f64 / b;
    let abl = Ablation::none(model);
    let parts = par::map(items, |it| -> Result<(f64, Vec<f64>)> {
        let xt = add_noise(&it.x0, &it.eps, it.t, &model.schedule)?;
        let emb = model.embed_prompt(&it.prompt)?;
        let mut cache = ForwardCache::default();
        let pred = model.run(&xt.data, it.t, emb, &abl, Some(&mut cache));
        let w = obj.weight(model, it.t);
        let mut loss = 0.0;
        let d_out: Vec<f64> = pred
            .iter()
            .zip(&it.eps.data)
            .map(|(p, e)| {
                let r = p - e;
                loss += w * r * r;
                2.0 * w * r / (b * numel)
            })
            .collect();
        loss /= b * numel;
        for bc in &cache.blocks {
            loss += l1 * bc.v.iter().map(|v| v.abs()).sum::<f64>();
        }
        let mut grad = vec![0.0; model.params.len()];
        model.backward(&it.prompt.tokens, &abl, &cache, &d_out, l1, &mut grad);
        Ok((loss, grad))
    });
    let mut total = 0.0;
    let mut grad = vec![0.0; model.params.len()];
    for part in parts {
        let (l, g) = part?;
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grad))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, decay: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            params[i] -= lr * decay[i] * params[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// Trains a fresh model. Deterministic for a fixed config regardless of thread count.
pub fn train(config: &TrainConfig) -> Result<(DenoiserModel, TrainLog)> {
    train_with_progress(config, |_, _| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(DenoiserModel, TrainLog)> {
    if config.batch == 0 || config.steps == 0 {
        return Err(NemoError::Config("steps and batch must be positive".into()));
    }
    let data = Dataset::build(&config.arch, &config.data)?;
    let mut model = DenoiserModel::new(config.arch.clone(), config.seed)?;
    let mut decay = vec![0.0; model.params.len()];
    for (spec, &off) in model.layout.specs.iter().zip(&model.layout.offsets) {
        if spec.name.contains(".attn.wo") || spec.name.contains(".attn.bo") {
            decay[off..off + spec.numel()].fill(config.weight_decay_out);
        }
    }
    let obj = Objective { weight_clip: config.weight_clip, l1_value: config.l1_value };
    let mut adam = Adam::new(model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);
    let [c, h, w] = config.arch.image_shape();
    let mut log = TrainLog::default();
    let mut window = Vec::new();
    let report_every = (config.steps / 20).max(1);
    for step in 0..config.steps {
        let items: Vec<TrainItem> = (0..config.batch)
            .map(|_| {
                let s = data.get(rng.random_range(0..data.len()));
                TrainItem {
                    x0: data.render(&config.arch, &s.content),
                    eps: LatentImage::gaussian(c, h, w, rng.random()),
                    t: rng.random_range(0..model.schedule.len()),
                    prompt: s.prompt.clone(),
                }
            })
            .collect();
        let (loss, grad) = loss_and_grad(&model, &items, &obj)?;
        if !loss.is_finite() {
            return Err(NemoError::NonConvergence { loss, ceiling: config.loss_ceiling });
        }
        let lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / config.steps as f64).cos());
        adam.step(&mut model.params, &grad, lr, &decay);
        window.push(loss);
        if (step + 1) % report_every == 0 || step + 1 == config.steps {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            log.losses.push((step + 1, mean));
            progress(step + 1, mean);
            window.clear();
        }
    }
    log.final_loss = log.losses.last().map(|x| x.1).unwrap_or(f64::NAN);
    if !(log.final_loss <= config.loss_ceiling) {
        return Err(NemoError::NonConvergence { loss: log.final_loss, ceiling: config.loss_ceiling });
    }
    Ok((model, log))
}
