use super::forward::{Ablation, ForwardCache};
use super::linalg::{col2im, gemm, silu_grad};
use super::DenoiserModel;

impl DenoiserModel {
    /// Accumulates parameter gradients of `sum(d_out * eps_pred) + l1 * sum_l sum |V_l|`
    /// into `grad`, given the cache of the matching forward pass.
    #[allow(clippy::too_many_arguments)]
    pub(super) fn backward(
        &self,
        tokens: &[u32],
        abl: &Ablation,
        cache: &ForwardCache,
        d_out: &[f64],
        l1: f64,
        grad: &mut [f64],
    ) {
        let a = &self.arch;
        let (c, p, d, dt, n) = (a.channels, a.pixels(), a.d_attn, a.d_text, a.n_tok);
        let ci = a.image_channels;
        let lay = &self.layout;
        let prm = &self.params;

        // output conv
        for ch in 0..ci {
            grad[lay.out_b + ch] += d_out[ch * p..(ch + 1) * p].iter().sum::<f64>();
        }
        gemm(ci, p, c * 9, 1.0, d_out, false, &cache.out_col, true, 1.0, &mut grad[lay.out_w..]);
        let mut dcol = vec![0.0; c * 9 * p];
        gemm(c * 9, ci, p, 1.0, &prm[lay.out_w..], true, d_out, false, 0.0, &mut dcol);
        let mut dh = vec![0.0; c * p];
        col2im(&dcol, c, a.height, a.width, &mut dh);

        let mut demb = vec![0.0; n * dt];
        let cg = c / a.groups;
        for l in (0..a.n_layers()).rev() {
            let bo = &lay.blocks[l];
            let bc = &cache.blocks[l];

            // attention output projection: hc += Wo^T U^T + bo
            for ch in 0..c {
                grad[bo.bo + ch] += dh[ch * p..(ch + 1) * p].iter().sum::<f64>();
            }
            // dWo (d x c) = U^T (d x p) * dO (p x c), with dO = dh^T
            gemm(d, p, c, 1.0, &bc.u, true, &dh, true, 1.0, &mut grad[bo.wo..]);
            // dU (p x d) = dO (p x c) * Wo^T (c x d)
            let mut du = vec![0.0; p * d];
            gemm(p, c, d, 1.0, &dh, true, &prm[bo.wo..], true, 0.0, &mut du);
            // dA (p x n) = dU * Vm^T ; dVm (n x d) = A^T dU
            let mut da = vec![0.0; p * n];
            gemm(p, d, n, 1.0, &du, false, &bc.vm, true, 0.0, &mut da);
            let mut dv = vec![0.0; n * d];
            gemm(n, p, d, 1.0, &bc.a, true, &du, false, 0.0, &mut dv);
            for row in dv.chunks_mut(d) {
                row.iter_mut().zip(&abl.value[l]).for_each(|(g, s)| *g *= s);
            }
            if l1 != 0.0 {
                for (g, v) in dv.iter_mut().zip(&bc.v) {
                    *g += l1 * v.signum() * (*v != 0.0) as u8 as f64;
                }
            }
            gemm(dt, n, d, 1.0, &cache.emb, true, &dv, false, 1.0, &mut grad[bo.wv..]);
            gemm(n, d, dt, 1.0, &dv, false, &prm[bo.wv..], true, 1.0, &mut demb);

            // softmax backward, then the 1/sqrt(d) scaling
            let mut ds = da;
            for (srow, arow) in ds.chunks_mut(n).zip(bc.a.chunks(n)) {
                let dot: f64 = srow.iter().zip(arow).map(|(g, a)| g * a).sum();
                srow.iter_mut().zip(arow).for_each(|(g, a)| *g = a * (*g - dot));
            }
            let scale = 1.0 / (d as f64).sqrt();
            let mut dq = vec![0.0; p * d];
            gemm(p, n, d, scale, &ds, false, &bc.k, false, 0.0, &mut dq);
            let mut dk = vec![0.0; n * d];
            gemm(n, p, d, scale, &ds, true, &bc.q, false, 0.0, &mut dk);
            if let Some(ks) = &abl.key {
                for row in dk.chunks_mut(d) {
                    row.iter_mut().zip(&ks[l]).for_each(|(g, s)| *g *= s);
                }
            }
            gemm(dt, n, d, 1.0, &cache.emb, true, &dk, false, 1.0, &mut grad[bo.wk..]);
            gemm(n, d, dt, 1.0, &dk, false, &prm[bo.wk..], true, 1.0, &mut demb);
            // q = h1^T Wq: dWq (c x d) = h1 (c x p) dq ; dh1 (c x p) += Wq dq^T
            gemm(c, p, d, 1.0, &bc.h1, false, &dq, false, 1.0, &mut grad[bo.wq..]);
            gemm(c, d, p, 1.0, &prm[bo.wq..], false, &dq, true, 1.0, &mut dh);

            // conv residual branch
            let mut dconv = dh.clone();
            if let Some(cs) = &abl.conv {
                for ch in 0..c {
                    let s = cs[l][ch];
                    dconv[ch * p..(ch + 1) * p].iter_mut().for_each(|g| *g *= s);
                }
            }
            for ch in 0..c {
                grad[bo.conv_b + ch] += dconv[ch * p..(ch + 1) * p].iter().sum::<f64>();
            }
            gemm(c, p, c * 9, 1.0, &dconv, false, &bc.col, true, 1.0, &mut grad[bo.conv_w..]);
            let mut dcol = vec![0.0; c * 9 * p];
            gemm(c * 9, c, p, 1.0, &prm[bo.conv_w..], true, &dconv, false, 0.0, &mut dcol);
            let mut dact = vec![0.0; c * p];
            col2im(&dcol, c, a.height, a.width, &mut dact);
            // SiLU and group-norm affine
            let mut dxhat = vec![0.0; c * p];
            for ch in 0..c {
                let gm = prm[bo.gamma + ch];
                let mut sg = 0.0;
                let mut sb = 0.0;
                for i in ch * p..(ch + 1) * p {
                    let g = dact[i] * silu_grad(bc.gn_out[i]);
                    sg += g * bc.xhat[i];
                    sb += g;
                    dxhat[i] = g * gm;
                }
                grad[bo.gamma + ch] += sg;
                grad[bo.beta + ch] += sb;
            }
            // group-norm normalisation
            let mut dg_in = vec![0.0; c * p];
            for g in 0..a.groups {
                let r = g * cg * p..(g + 1) * cg * p;
                let m = r.len() as f64;
                let sum_d: f64 = dxhat[r.clone()].iter().sum();
                let sum_dx: f64 = dxhat[r.clone()].iter().zip(&bc.xhat[r.clone()]).map(|(a, b)| a * b).sum();
                let rs = bc.rstd[g];
                for i in r {
                    dg_in[i] = rs / m * (m * dxhat[i] - sum_d - bc.xhat[i] * sum_dx);
                }
            }
            // timestep bias
            let mut dtb = vec![0.0; c];
            for ch in 0..c {
                dtb[ch] = dg_in[ch * p..(ch + 1) * p].iter().sum();
                grad[bo.temb_b + ch] += dtb[ch];
            }
            gemm(c, 1, a.temb_dim, 1.0, &dtb, false, &cache.temb, false, 1.0, &mut grad[bo.temb_w..]);
            for (x, y) in dh.iter_mut().zip(&dg_in) {
                *x += y;
            }
        }

        // positional bias and stem conv
        for (g, v) in grad[lay.pos..lay.pos + c * p].iter_mut().zip(&dh) {
            *g += v;
        }
        for ch in 0..c {
            grad[lay.stem_b + ch] += dh[ch * p..(ch + 1) * p].iter().sum::<f64>();
        }
        gemm(c, p, ci * 9, 1.0, &dh, false, &cache.stem_col, true, 1.0, &mut grad[lay.stem_w..]);

        for (i, &t) in tokens.iter().enumerate() {
            let row = &mut grad[lay.embed + t as usize * dt..][..dt];
            row.iter_mut().zip(&demb[i * dt..(i + 1) * dt]).for_each(|(g, v)| *g += v);
        }
    }
}
