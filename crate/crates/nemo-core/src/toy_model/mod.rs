//! Toy text-conditioned denoiser: a stack of conv + group-norm + cross-attention
//! blocks with instrumented value projections, its training loop and file format.

mod backward;
pub mod data;
pub mod gradcheck;
mod forward;
pub mod io;
pub mod linalg;
pub mod train;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ddpm_core::{make_schedule, Schedule};
use crate::error::{NemoError, Result};

pub use forward::{cross_attention, Ablation, AttnDims, AttnOut, ForwardCache};

pub const PAD: u32 = 0;

/// Addresses output channel `index` of the value projection in registered layer `layer`.
/// Both indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.index)
    }
}

/// Per-neuron scale factors for value-layer outputs. Absent neurons keep scale 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeuronMask {
    entries: BTreeMap<NeuronId, f64>,
}

impl NeuronMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn deactivate<'a, I: IntoIterator<Item = &'a NeuronId>>(ids: I) -> Self {
        Self::scaled(ids, 0.0)
    }

    pub fn scaled<'a, I: IntoIterator<Item = &'a NeuronId>>(ids: I, scale: f64) -> Self {
        Self { entries: ids.into_iter().map(|n| (*n, scale)).collect() }
    }

    pub fn set(&mut self, id: NeuronId, scale: f64) {
        self.entries.insert(id, scale);
    }

    pub fn get(&self, id: NeuronId) -> f64 {
        self.entries.get(&id).copied().unwrap_or(1.0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NeuronId, &f64)> {
        self.entries.iter()
    }

    /// Applying `self` then `other` is the same as applying the entrywise product.
    pub fn compose(&self, other: &NeuronMask) -> NeuronMask {
        let mut out = self.clone();
        for (id, s) in &other.entries {
            let v = out.get(*id) * s;
            out.entries.insert(*id, v);
        }
        out
    }
}

/// Mean absolute value-layer activation per neuron, indexed `[layer][neuron]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub layers: Vec<Vec<f64>>,
}

impl ActivationMap {
    pub fn get(&self, id: NeuronId) -> f64 {
        self.layers[id.layer][id.index]
    }
}

/// A tokenized prompt padded to the model's fixed length. The learned embedding
/// table turns it into the conditioning matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<u32>,
}

impl Prompt {
    pub fn new(mut tokens: Vec<u32>, n_tok: usize) -> Self {
        tokens.resize(n_tok, PAD);
        tokens.truncate(n_tok);
        Self { tokens }
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<String> = self
            .tokens
            .iter()
            .filter(|t| **t != PAD)
            .map(|t| t.to_string())
            .collect();
        write!(f, "[{}]", words.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockRole {
    Down,
    Mid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// The network predicts the noise directly.
    Epsilon,
    /// The network predicts a correction added to x_t.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub image_channels: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub groups: usize,
    pub d_attn: usize,
    pub d_text: usize,
    pub vocab: usize,
    pub n_tok: usize,
    pub temb_dim: usize,
    pub blocks: Vec<BlockRole>,
    pub parameterization: Parameterization,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Whether pad positions count in the token mean of value activations.
    pub activations_include_pad: bool,
}

impl Arch {
    /// Default 16x16 profile: three down-analog blocks and one mid block.
    pub fn toy() -> Self {
        Self {
            image_channels: 3,
            height: 16,
            width: 16,
            channels: 16,
            groups: 4,
            d_attn: 32,
            d_text: 32,
            vocab: 64,
            n_tok: 8,
            temb_dim: 32,
            blocks: vec![BlockRole::Down, BlockRole::Down, BlockRole::Down, BlockRole::Mid],
            parameterization: Parameterization::Residual,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 5e-3,
            activations_include_pad: true,
        }
    }

    /// 8x8 profile with two value layers, small enough for exhaustive search.
    pub fn tiny() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 8,
            groups: 2,
            d_attn: 16,
            d_text: 16,
            blocks: vec![BlockRole::Down, BlockRole::Mid],
            ..Self::toy()
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_neurons(&self) -> usize {
        self.blocks.len() * self.d_attn
    }

    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        let d = self.d_attn;
        (0..self.n_layers()).flat_map(move |l| (0..d).map(move |i| NeuronId::new(l, i)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NemoError::Config(m.to_string()));
        if self.blocks.len() < 2 {
            return bad("need at least two cross-attention blocks");
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return bad("channels must be divisible by groups");
        }
        if self.temb_dim % 2 != 0 {
            return bad("timestep embedding width must be even");
        }
        if [self.height, self.width, self.d_attn, self.d_text, self.vocab, self.n_tok]
            .contains(&0)
        {
            return bad("zero-sized dimension");
        }
        Ok(())
    }

    /// Named parameter tensors in registry order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (c, d, dt, p) = (self.channels, self.d_attn, self.d_text, self.pixels());
        let ci = self.image_channels;
        let mut v = vec![
            ParamSpec::new("embed", &[self.vocab, dt], Init::Normal),
            ParamSpec::new("stem.w", &[c, ci * 9], Init::Fan(ci * 9)),
            ParamSpec::new("stem.b", &[c], Init::Fan(ci * 9)),
            ParamSpec::new("pos", &[c, p], Init::Zero),
        ];
        for l in 0..self.n_layers() {
            let n = |s: &str| format!("blocks.{l}.{s}");
            v.extend([
                ParamSpec::new(&n("temb.w"), &[c, self.temb_dim], Init::Fan(self.temb_dim)),
                ParamSpec::new(&n("temb.b"), &[c], Init::Fan(self.temb_dim)),
                ParamSpec::new(&n("gn.gamma"), &[c], Init::One),
                ParamSpec::new(&n("gn.beta"), &[c], Init::Zero),
                ParamSpec::new(&n("conv.w"), &[c, c * 9], Init::Fan(c * 9)),
                ParamSpec::new(&n("conv.b"), &[c], Init::Fan(c * 9)),
                ParamSpec::new(&n("attn.wq"), &[c, d], Init::Fan(c)),
                ParamSpec::new(&n("attn.wk"), &[dt, d], Init::Fan(dt)),
                ParamSpec::new(&n("attn.wv"), &[dt, d], Init::Fan(dt)),
                ParamSpec::new(&n("attn.wo"), &[d, c], Init::Fan(d)),
                ParamSpec::new(&n("attn.bo"), &[c], Init::Fan(d)),
            ]);
        }
        v.push(ParamSpec::new("out.w", &[ci, c * 9], Init::Fan(c * 9)));
        v.push(ParamSpec::new("out.b", &[ci], Init::Fan(c * 9)));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    One,
    Normal,
    /// Uniform in +-1/sqrt(fan_in).
    Fan(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: &str, shape: &[usize], init: Init) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Offsets of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub offsets: Vec<usize>,
    pub total: usize,
    blocks: Vec<BlockOffsets>,
    embed: usize,
    stem_w: usize,
    stem_b: usize,
    pos: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockOffsets {
    temb_w: usize,
    temb_b: usize,
    gamma: usize,
    beta: usize,
    conv_w: usize,
    conv_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

impl Layout {
    pub fn new(arch: &Arch) -> Self {
        let specs = arch.param_specs();
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.numel();
        }
        let find = |name: &str| offsets[specs.iter().position(|s| s.name == name).expect("registered")];
        let blocks = (0..arch.n_layers())
            .map(|l| {
                let f = |s: &str| find(&format!("blocks.{l}.{s}"));
                BlockOffsets {
                    temb_w: f("temb.w"),
                    temb_b: f("temb.b"),
                    gamma: f("gn.gamma"),
                    beta: f("gn.beta"),
                    conv_w: f("conv.w"),
                    conv_b: f("conv.b"),
                    wq: f("attn.wq"),
                    wk: f("attn.wk"),
                    wv: f("attn.wv"),
                    wo: f("attn.wo"),
                    bo: f("attn.bo"),
                }
            })
            .collect();
        Self {
            embed: find("embed"),
            stem_w: find("stem.w"),
            stem_b: find("stem.b"),
            pos: find("pos"),
            out_w: find("out.w"),
            out_b: find("out.b"),
            blocks,
            specs,
            offsets,
            total,
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let i = self.index_of(name)?;
        Some(self.offsets[i]..self.offsets[i] + self.specs[i].numel())
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub arch: Arch,
    pub schedule: Schedule,
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl PartialEq for DenoiserModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl DenoiserModel {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let schedule = make_schedule(arch.timesteps, arch.beta_start, arch.beta_end)?;
        let layout = Layout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layout.total);
        for spec in &layout.specs {
            let n = spec.numel();
            match spec.init {
                Init::Zero => params.extend(std::iter::repeat_n(0.0, n)),
                Init::One => params.extend(std::iter::repeat_n(1.0, n)),
                Init::Normal => params.extend((0..n).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); v })),
                Init::Fan(fan) => {
                    let b = 1.0 / (fan as f64).sqrt();
                    params.extend((0..n).map(|_| rng.random_range(-b..b)));
                }
            }
        }
        Ok(Self { arch, schedule, layout, params })
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let schedule = make_schedule(arch.timesteps, arch.beta_start, arch.beta_end)?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(NemoError::Shape { expected: vec![layout.total], got: vec![params.len()] });
        }
        Ok(Self { arch, schedule, layout, params })
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.range(name).map(|r| &self.params[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.layout.range(name).map(move |r| &mut self.params[r])
    }

    pub fn prompt(&self, tokens: Vec<u32>) -> Prompt {
        Prompt::new(tokens, self.arch.n_tok)
    }

    /// Conditioning matrix (n_tok x d_text) looked up from the embedding table.
    pub fn embed_prompt(&self, y: &Prompt) -> Result<Vec<f64>> {
        let dt = self.arch.d_text;
        if y.tokens.len() != self.arch.n_tok {
            return Err(NemoError::Shape { expected: vec![self.arch.n_tok], got: vec![y.tokens.len()] });
        }
        let table = &self.params[self.layout.embed..self.layout.embed + self.arch.vocab * dt];
        let mut out = Vec::with_capacity(self.arch.n_tok * dt);
        for &t in &y.tokens {
            let t = t as usize;
            if t >= self.arch.vocab {
                return Err(NemoError::Config(format!("token {t} outside vocabulary")));
            }
            out.extend_from_slice(&table[t * dt..(t + 1) * dt]);
        }
        Ok(out)
    }

    /// Dense `[layer][neuron]` scales for a mask; rejects neurons outside the registry.
    pub fn dense_mask(&self, mask: &NeuronMask) -> Result<Vec<Vec<f64>>> {
        let mut dense = vec![vec![1.0; self.arch.d_attn]; self.arch.n_layers()];
        for (id, s) in mask.iter() {
            if id.layer >= self.arch.n_layers() || id.index >= self.arch.d_attn {
                return Err(NemoError::Config(format!("neuron {id} outside the value-layer registry")));
            }
            dense[id.layer][id.index] = *s;
        }
        Ok(dense)
    }

    /// Mean absolute value-layer activation per neuron for prompt `y`.
    /// Value projections see only the prompt, so no image or timestep is needed.
    pub fn record_activations(&self, y: &Prompt) -> Result<ActivationMap> {
        let emb = self.embed_prompt(y)?;
        let (n, dt, d) = (self.arch.n_tok, self.arch.d_text, self.arch.d_attn);
        let rows: Vec<usize> = if self.arch.activations_include_pad {
            (0..n).collect()
        } else {
            let r: Vec<usize> = (0..n).filter(|&i| y.tokens[i] != PAD).collect();
            if r.is_empty() {
                (0..n).collect()
            } else {
                r
            }
        };
        let mut layers = Vec::with_capacity(self.arch.n_layers());
        for b in &self.layout.blocks {
            let wv = &self.params[b.wv..b.wv + dt * d];
            let mut v = vec![0.0; n * d];
            linalg::gemm(n, dt, d, 1.0, &emb, false, wv, false, 0.0, &mut v);
            let mut acc = vec![0.0; d];
            for &r in &rows {
                for (a, x) in acc.iter_mut().zip(&v[r * d..(r + 1) * d]) {
                    *a += x.abs();
                }
            }
            for a in acc.iter_mut() {
                *a /= rows.len() as f64;
            }
            layers.push(acc);
        }
        Ok(ActivationMap { layers })
    }
}
