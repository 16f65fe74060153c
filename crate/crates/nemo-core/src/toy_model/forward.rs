use super::linalg::{gemm, im2col, silu, softmax_rows};
use super::{DenoiserModel, NeuronMask, Parameterization, Prompt};
use crate::ddpm_core::LatentImage;
use crate::error::{NemoError, Result};

pub(super) const GN_EPS: f64 = 1e-5;

/// Scale factors applied inside the forward pass. `value` is the localization
/// target; `key` and `conv` exist only for the ablation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub value: Vec<Vec<f64>>,
    pub key: Option<Vec<Vec<f64>>>,
    pub conv: Option<Vec<Vec<f64>>>,
}

impl Ablation {
    pub fn none(model: &DenoiserModel) -> Self {
        Self { value: vec![vec![1.0; model.arch.d_attn]; model.arch.n_layers()], key: None, conv: None }
    }

    pub fn from_mask(model: &DenoiserModel, mask: &NeuronMask) -> Result<Self> {
        Ok(Self { value: model.dense_mask(mask)?, key: None, conv: None })
    }
}

#[derive(Debug, Clone, Default)]
pub(super) struct BlockCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    pub gn_out: Vec<f64>,
    pub col: Vec<f64>,
    pub h1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub vm: Vec<f64>,
    pub a: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub pixels: usize,
    pub channels: usize,
    pub tokens: usize,
    pub d_text: usize,
    pub d_attn: usize,
}

/// Queries, keys, values (raw and scaled), attention weights and the
/// attended values, all row-major.
#[derive(Debug, Clone)]
pub struct AttnOut {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub vm: Vec<f64>,
    pub a: Vec<f64>,
    pub u: Vec<f64>,
}

/// softmax(Q K^T / sqrt(d)) (V diag(value_scale)) for channel-major hidden
/// states `h` (channels x pixels) against prompt embeddings (tokens x d_text).
/// `w` is [W_Q (channels x d), W_K (d_text x d), W_V (d_text x d)]. The output
/// projection is left to the caller.
pub fn cross_attention(
    h: &[f64],
    emb: &[f64],
    w: [&[f64]; 3],
    dims: AttnDims,
    value_scale: &[f64],
    key_scale: Option<&[f64]>,
) -> AttnOut {
    let AttnDims { pixels: p, channels: c, tokens: n, d_text: dt, d_attn: d } = dims;
    let mut q = vec![0.0; p * d];
    gemm(p, c, d, 1.0, h, true, w[0], false, 0.0, &mut q);
    let mut k = vec![0.0; n * d];
    gemm(n, dt, d, 1.0, emb, false, w[1], false, 0.0, &mut k);
    if let Some(ks) = key_scale {
        for row in k.chunks_mut(d) {
            row.iter_mut().zip(ks).for_each(|(v, s)| *v *= s);
        }
    }
    let mut v = vec![0.0; n * d];
    gemm(n, dt, d, 1.0, emb, false, w[2], false, 0.0, &mut v);
    let mut vm = v.clone();
    for row in vm.chunks_mut(d) {
        row.iter_mut().zip(value_scale).for_each(|(x, s)| *x *= s);
    }
    let mut a = vec![0.0; p * n];
    gemm(p, d, n, 1.0 / (d as f64).sqrt(), &q, false, &k, true, 0.0, &mut a);
    softmax_rows(&mut a, n);
    let mut u = vec![0.0; p * d];
    gemm(p, n, d, 1.0, &a, false, &vm, false, 0.0, &mut u);
    AttnOut { q, k, v, vm, a, u }
}

/// Intermediate tensors kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub(super) emb: Vec<f64>,
    pub(super) temb: Vec<f64>,
    pub(super) stem_col: Vec<f64>,
    pub(super) blocks: Vec<BlockCache>,
    pub(super) out_col: Vec<f64>,
}

pub(super) fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

impl DenoiserModel {
    /// Noise prediction eps_theta(x_t, t, y) with value neurons scaled by `mask`.
    pub fn forward(&self, x: &LatentImage, t: usize, y: &Prompt, mask: &NeuronMask) -> Result<LatentImage> {
        let abl = Ablation::from_mask(self, mask)?;
        self.forward_ablated(x, t, y, &abl)
    }

    pub fn forward_ablated(&self, x: &LatentImage, t: usize, y: &Prompt, abl: &Ablation) -> Result<LatentImage> {
        let [c, h, w] = self.arch.image_shape();
        if x.shape() != [c, h, w] {
            return Err(NemoError::Shape { expected: vec![c, h, w], got: x.shape().to_vec() });
        }
        if t >= self.schedule.len() {
            return Err(NemoError::Timestep { t, len: self.schedule.len() });
        }
        let emb = self.embed_prompt(y)?;
        let data = self.run(&x.data, t, emb, abl, None);
        Ok(LatentImage { channels: c, height: h, width: w, data })
    }

    /// Core forward on flat buffers. Fills `cache` when given.
    pub(super) fn run(
        &self,
        x: &[f64],
        t: usize,
        emb: Vec<f64>,
        abl: &Ablation,
        mut cache: Option<&mut ForwardCache>,
    ) -> Vec<f64> {
        let a = &self.arch;
        let (c, p, d, dt, n) = (a.channels, a.pixels(), a.d_attn, a.d_text, a.n_tok);
        let ci = a.image_channels;
        let lay = &self.layout;
        let prm = &self.params;
        let temb = timestep_embedding(t, a.temb_dim);

        // stem conv plus learned positional bias
        let mut stem_col = vec![0.0; ci * 9 * p];
        im2col(x, ci, a.height, a.width, &mut stem_col);
        let mut hc = prm[lay.pos..lay.pos + c * p].to_vec();
        for ch in 0..c {
            let b = prm[lay.stem_b + ch];
            hc[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v += b);
        }
        gemm(c, ci * 9, p, 1.0, &prm[lay.stem_w..], false, &stem_col, false, 1.0, &mut hc);

        let cg = c / a.groups;
        let mut block_caches = Vec::with_capacity(a.n_layers());
        for (l, bo) in lay.blocks.iter().enumerate() {
            // timestep bias, group norm, SiLU, 3x3 conv, residual
            let mut tb = prm[bo.temb_b..bo.temb_b + c].to_vec();
            gemm(c, a.temb_dim, 1, 1.0, &prm[bo.temb_w..], false, &temb, false, 1.0, &mut tb);
            let mut g_in = hc.clone();
            for ch in 0..c {
                g_in[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v += tb[ch]);
            }
            let mut xhat = vec![0.0; c * p];
            let mut rstd = vec![0.0; a.groups];
            for g in 0..a.groups {
                let seg = &g_in[g * cg * p..(g + 1) * cg * p];
                let m = seg.len() as f64;
                let mean = seg.iter().sum::<f64>() / m;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let r = 1.0 / (var + GN_EPS).sqrt();
                rstd[g] = r;
                for (o, v) in xhat[g * cg * p..(g + 1) * cg * p].iter_mut().zip(seg) {
                    *o = (v - mean) * r;
                }
            }
            let mut gn_out = xhat.clone();
            for ch in 0..c {
                let (gm, bt) = (prm[bo.gamma + ch], prm[bo.beta + ch]);
                gn_out[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = *v * gm + bt);
            }
            let act: Vec<f64> = gn_out.iter().map(|v| silu(*v)).collect();
            let mut col = vec![0.0; c * 9 * p];
            im2col(&act, c, a.height, a.width, &mut col);
            let mut conv = vec![0.0; c * p];
            for ch in 0..c {
                let b = prm[bo.conv_b + ch];
                conv[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = b);
            }
            gemm(c, c * 9, p, 1.0, &prm[bo.conv_w..], false, &col, false, 1.0, &mut conv);
            if let Some(cs) = &abl.conv {
                for ch in 0..c {
                    let s = cs[l][ch];
                    if s != 1.0 {
                        conv[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            for (hv, cv) in hc.iter_mut().zip(&conv) {
                *hv += cv;
            }
            let h1 = hc.clone();

            let dims = AttnDims { pixels: p, channels: c, tokens: n, d_text: dt, d_attn: d };
            let key_scale = abl.key.as_ref().map(|ks| ks[l].as_slice());
            let at = cross_attention(
                &h1,
                &emb,
                [&prm[bo.wq..bo.wq + c * d], &prm[bo.wk..bo.wk + dt * d], &prm[bo.wv..bo.wv + dt * d]],
                dims,
                &abl.value[l],
                key_scale,
            );
            let AttnOut { q, k, v, vm, a: sc, u } = at;
            for ch in 0..c {
                let b = prm[bo.bo + ch];
                hc[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v += b);
            }
            gemm(c, d, p, 1.0, &prm[bo.wo..], true, &u, true, 1.0, &mut hc);

            if cache.is_some() {
                block_caches.push(BlockCache { xhat, rstd, gn_out, col, h1, q, k, v, vm, a: sc, u });
            }
        }

        let mut out_col = vec![0.0; c * 9 * p];
        im2col(&hc, c, a.height, a.width, &mut out_col);
        let mut out = vec![0.0; ci * p];
        for ch in 0..ci {
            let b = prm[lay.out_b + ch];
            out[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = b);
        }
        gemm(ci, c * 9, p, 1.0, &prm[lay.out_w..], false, &out_col, false, 1.0, &mut out);
        if a.parameterization == Parameterization::Residual {
            for (o, xv) in out.iter_mut().zip(x) {
                *o += xv;
            }
        }
        if let Some(cache) = cache.as_deref_mut() {
            cache.emb = emb;
            cache.temb = temb;
            cache.stem_col = stem_col;
            cache.blocks = block_caches;
            cache.out_col = out_col;
        }
        out
    }
}
