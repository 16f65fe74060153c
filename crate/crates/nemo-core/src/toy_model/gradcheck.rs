//! Central finite-difference check of the hand-written gradients on a
//! miniature model.

use serde::{Deserialize, Serialize};

use super::train::{loss_and_grad, Objective, TrainItem};
use super::{Arch, BlockRole, DenoiserModel, Prompt};
use crate::ddpm_core::LatentImage;
use crate::error::Result;

pub fn mini_arch() -> Arch {
    Arch {
        image_channels: 3,
        height: 4,
        width: 5,
        channels: 4,
        groups: 2,
        d_attn: 3,
        d_text: 4,
        vocab: 7,
        n_tok: 3,
        temb_dim: 4,
        blocks: vec![BlockRole::Down, BlockRole::Mid],
        timesteps: 50,
        beta_start: 1e-3,
        beta_end: 0.05,
        ..Arch::toy()
    }
}

fn items(arch: &Arch) -> Vec<TrainItem> {
    let [c, h, w] = arch.image_shape();
    (0..3u64)
        .map(|i| TrainItem {
            x0: LatentImage::gaussian(c, h, w, 100 + i),
            eps: LatentImage::gaussian(c, h, w, 200 + i),
            t: [3, 27, 49][i as usize],
            prompt: Prompt::new(vec![1 + i as u32, 5, 0], arch.n_tok),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_param: usize,
}

/// Relative error |num - ana| / max(|num|, |ana|, 1e-6) per parameter, with step `h`.
pub fn gradient_check(seed: u64, h: f64) -> Result<GradCheck> {
    let arch = mini_arch();
    let mut model = DenoiserModel::new(arch.clone(), seed)?;
    // move GN affine and the positional bias off their trivial init values
    for (i, p) in model.params.iter_mut().enumerate() {
        *p += 0.05 * ((i as f64) * 0.7).sin();
    }
    let items = items(&arch);
    let obj = Objective { weight_clip: 20.0, l1_value: 0.3 };
    let (_, grad) = loss_and_grad(&model, &items, &obj)?;
    let mut out = GradCheck { params: model.params.len(), max_rel_error: 0.0, worst_param: 0 };
    for i in 0..model.params.len() {
        let orig = model.params[i];
        model.params[i] = orig + h;
        let (lp, _) = loss_and_grad(&model, &items, &obj)?;
        model.params[i] = orig - h;
        let (lm, _) = loss_and_grad(&model, &items, &obj)?;
        model.params[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        let rel = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6);
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_param = i;
        }
    }
    Ok(out)
}
