//! Procedural prompt/image pairs. Ordinary prompts name a tint and a texture
//! scale and render a tinted smooth random field; each memorized prompt is a
//! single reserved token paired with a fixed blocky image that is duplicated
//! many times in the training stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Arch, Prompt};
use crate::ddpm_core::LatentImage;
use crate::error::{NemoError, Result};

pub const TINT_TOKENS: std::ops::Range<u32> = 1..9;
pub const SCALE_TOKENS: std::ops::Range<u32> = 9..13;
pub const FILLER_TOKENS: std::ops::Range<u32> = 13..56;
pub const RARE_TOKENS: std::ops::Range<u32> = 56..64;
pub const MAX_MEMORIZED: usize = 8;

const TINTS: [[f64; 3]; 8] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_unique: usize,
    pub n_memorized: usize,
    pub duplication: usize,
    /// Fraction of unique samples whose prompt carries no tint or scale token.
    pub uncond_fraction: f64,
    pub tint_amp: f64,
    pub texture_amp: f64,
    /// Texture grid sizes selected by the scale tokens (coarse to fine).
    pub grids: Vec<usize>,
    /// Sampling weights of the scale tokens; fine textures are kept rare.
    pub grid_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_unique: 20_000,
            n_memorized: 4,
            duplication: 1000,
            uncond_fraction: 0.1,
            tint_amp: 0.3,
            texture_amp: 0.6,
            grids: vec![2, 3, 4, 6],
            grid_weights: vec![0.35, 0.3, 0.27, 0.08],
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.duplication == 0 {
            return Err(NemoError::Config("duplication factor must be at least 1".into()));
        }
        if self.n_memorized > MAX_MEMORIZED {
            return Err(NemoError::Config(format!("at most {MAX_MEMORIZED} memorized prompts")));
        }
        if self.grids.len() != SCALE_TOKENS.len() || self.grids.contains(&0) {
            return Err(NemoError::Config("need one positive grid size per scale token".into()));
        }
        if self.grid_weights.len() != self.grids.len()
            || self.grid_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.grid_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(NemoError::Config("grid weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Content {
    /// Tinted field; `tint`/`grid` index the tables, `noise_seed` drives the field.
    Field { tint: usize, grid: usize, noise_seed: u64 },
    /// Fixed blocky image of memorized pair `index`.
    Memorized { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Prompt,
    pub content: Content,
}

/// Training pairs. Memorized pairs are stored once and sampled with weight `duplication`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub unique: Vec<Sample>,
    pub memorized: Vec<Sample>,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// An ordinary prompt: tint, scale and 1-5 filler tokens in random order.
pub fn grammar_prompt(rng: &mut impl Rng, arch: &Arch, grids: &WeightedIndex<f64>) -> (Prompt, usize, usize) {
    let tint = rng.random_range(0..TINTS.len());
    let grid = grids.sample(rng);
    let nf = rng.random_range(1..=5).min(arch.n_tok - 2);
    let mut toks = vec![TINT_TOKENS.start + tint as u32, SCALE_TOKENS.start + grid as u32];
    toks.extend((0..nf).map(|_| rng.random_range(FILLER_TOKENS)));
    toks.shuffle(rng);
    (Prompt::new(toks, arch.n_tok), tint, grid)
}

pub fn memorized_prompt(index: usize, arch: &Arch) -> Prompt {
    Prompt::new(vec![RARE_TOKENS.start + index as u32], arch.n_tok)
}

fn grid_sampler(config: &DataConfig) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(&config.grid_weights).map_err(|e| NemoError::Config(format!("grid weights: {e}")))
}

/// Fresh pairs from the ordinary grammar, disjoint in RNG stream from training.
pub fn holdout_samples(arch: &Arch, config: &DataConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let grids = grid_sampler(config)?;
    let mut rng = seeded(seed, 7);
    Ok((0..n)
        .map(|i| {
            let (prompt, tint, grid) = grammar_prompt(&mut rng, arch, &grids);
            Sample { prompt, content: Content::Field { tint, grid, noise_seed: (seed << 32) ^ (0x9e37 + i as u64) } }
        })
        .collect())
}

pub fn holdout_prompts(arch: &Arch, config: &DataConfig, n: usize, seed: u64) -> Result<Vec<Prompt>> {
    Ok(holdout_samples(arch, config, n, seed)?.into_iter().map(|s| s.prompt).collect())
}

impl Dataset {
    pub fn build(arch: &Arch, config: &DataConfig) -> Result<Self> {
        config.validate()?;
        let grids = grid_sampler(config)?;
        let mut rng = seeded(config.seed, 1);
        let unique = (0..config.n_unique)
            .map(|i| {
                let (mut prompt, tint, grid) = grammar_prompt(&mut rng, arch, &grids);
                if rng.random::<f64>() < config.uncond_fraction {
                    let nf = rng.random_range(0..=5).min(arch.n_tok);
                    prompt = Prompt::new((0..nf).map(|_| rng.random_range(FILLER_TOKENS)).collect(), arch.n_tok);
                }
                Sample { prompt, content: Content::Field { tint, grid, noise_seed: config.seed * 1_000_003 + i as u64 } }
            })
            .collect();
        let memorized = (0..config.n_memorized)
            .map(|index| Sample { prompt: memorized_prompt(index, arch), content: Content::Memorized { index } })
            .collect();
        Ok(Self { config: config.clone(), unique, memorized })
    }

    pub fn len(&self) -> usize {
        self.unique.len() + self.memorized.len() * self.config.duplication
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample at position `i` of the virtual duplicated training list.
    pub fn get(&self, i: usize) -> &Sample {
        if i < self.unique.len() {
            &self.unique[i]
        } else {
            &self.memorized[(i - self.unique.len()) / self.config.duplication]
        }
    }

    pub fn render(&self, arch: &Arch, content: &Content) -> LatentImage {
        render(arch, &self.config, content)
    }
}

pub fn render(arch: &Arch, config: &DataConfig, content: &Content) -> LatentImage {
    let [c, h, w] = arch.image_shape();
    match *content {
        Content::Field { tint, grid, noise_seed } => {
            let field = smooth_field(c, h, w, config.grids[grid], noise_seed);
            let mut img = LatentImage::zeros(c, h, w);
            for ch in 0..c {
                let base = config.tint_amp * TINTS[tint][ch % 3];
                for (o, f) in img.data[ch * h * w..(ch + 1) * h * w].iter_mut().zip(field.plane(ch)) {
                    *o = (base + config.texture_amp * f).clamp(-1.0, 1.0);
                }
            }
            img
        }
        Content::Memorized { index } => memorized_image(arch, config.seed, index),
    }
}

/// +-0.8 values on a 4x4 grid per channel, nearest-upsampled.
pub fn memorized_image(arch: &Arch, seed: u64, index: usize) -> LatentImage {
    let [c, h, w] = arch.image_shape();
    let mut rng = seeded(seed.wrapping_add(77 + index as u64), 3);
    let cells: Vec<f64> = (0..c * 16).map(|_| if rng.random::<bool>() { 0.8 } else { -0.8 }).collect();
    let mut img = LatentImage::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                img.data[(ch * h + y) * w + x] = cells[ch * 16 + (y * 4 / h) * 4 + x * 4 / w];
            }
        }
    }
    img
}

/// Gaussian grid x grid field, bilinearly upsampled (half-pixel centres) and
/// scaled to unit standard deviation.
pub fn smooth_field(c: usize, h: usize, w: usize, grid: usize, seed: u64) -> LatentImage {
    let mut rng = seeded(seed, 5);
    let coarse: Vec<f64> = (0..c * grid * grid).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut img = LatentImage::zeros(c, h, w);
    let src = |o: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * grid as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(grid - 1);
        let i1 = (i0 + 1).min(grid - 1);
        (i0, i1, s - i0 as f64)
    };
    for ch in 0..c {
        let g = &coarse[ch * grid * grid..(ch + 1) * grid * grid];
        for y in 0..h {
            let (y0, y1, fy) = src(y, h);
            for x in 0..w {
                let (x0, x1, fx) = src(x, w);
                let top = g[y0 * grid + x0] * (1.0 - fx) + g[y0 * grid + x1] * fx;
                let bot = g[y1 * grid + x0] * (1.0 - fx) + g[y1 * grid + x1] * fx;
                img.data[(ch * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let n = img.data.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let sd = (img.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd > 0.0 {
        img.data.iter_mut().for_each(|v| *v /= sd);
    }
    img
}
