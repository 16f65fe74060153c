//! Noise schedule, forward noising, the deterministic reverse step and a seeded sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NemoError, Result};
use crate::toy_model::{Ablation, DenoiserModel, NeuronMask, Prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(NemoError::Timestep { t, len: self.len() });
        }
        Ok(())
    }

    /// Builds a schedule directly from betas (used for strided sampling).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(NemoError::Schedule("empty schedule".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(NemoError::Schedule(format!("beta {b} outside (0,1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Sub-schedule over `steps` evenly spaced timesteps of `self`.
    /// Each new beta is 1 - abar[t] / abar[t_prev], so the cumulative products
    /// agree with the full schedule at the kept timesteps.
    pub fn respaced(&self, steps: usize) -> Result<(Vec<usize>, Schedule)> {
        if steps == 0 || steps > self.len() {
            return Err(NemoError::Schedule(format!(
                "cannot respace {} timesteps into {steps}",
                self.len()
            )));
        }
        let n = self.len();
        let kept: Vec<usize> = (0..steps)
            .map(|i| ((i + 1) * n) / steps - 1)
            .collect();
        let mut beta = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &kept {
            beta.push(1.0 - self.alpha_bar[t] / prev);
            prev = self.alpha_bar[t];
        }
        Ok((kept, Schedule::from_betas(beta)?))
    }
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if t == 0 {
        return Err(NemoError::Schedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(NemoError::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    };
    Schedule::from_betas(beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LatentImage {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(NemoError::Shape {
                expected: vec![channels * height * width],
                got: vec![data.len()],
            });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self { channels, height, width, data: vec![v; channels * height * width] }
    }

    /// Standard normal draw from a seed-addressed ChaCha stream.
    pub fn gaussian(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * height * width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { channels, height, width, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(NemoError::Shape {
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        Ok(())
    }
}

pub fn add_noise(x0: &LatentImage, eps: &LatentImage, t: usize, s: &Schedule) -> Result<LatentImage> {
    x0.check_same_shape(eps)?;
    s.check_t(t)?;
    let a = s.alpha_bar[t].sqrt();
    let b = (1.0 - s.alpha_bar[t]).sqrt();
    let data = x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect();
    Ok(LatentImage { channels: x0.channels, height: x0.height, width: x0.width, data })
}

/// One deterministic reverse step x_t -> x_{t-1}.
pub fn denoise_step(x_t: &LatentImage, eps_pred: &LatentImage, t: usize, s: &Schedule) -> Result<LatentImage> {
    x_t.check_same_shape(eps_pred)?;
    s.check_t(t)?;
    let alpha = s.alpha[t];
    let inv = 1.0 / alpha.sqrt();
    let coef = (1.0 - alpha) / (1.0 - s.alpha_bar[t]).sqrt();
    let data = x_t
        .data
        .iter()
        .zip(&eps_pred.data)
        .map(|(x, e)| inv * (x - coef * e))
        .collect();
    Ok(LatentImage { channels: x_t.channels, height: x_t.height, width: x_t.width, data })
}

/// Generates an image from seed-determined x_T with `steps` strided reverse steps.
pub fn sample(model: &DenoiserModel, y: &Prompt, seed: u64, steps: usize, mask: &NeuronMask) -> Result<LatentImage> {
    sample_ablated(model, y, seed, steps, &Ablation::from_mask(model, mask)?)
}

pub fn sample_ablated(model: &DenoiserModel, y: &Prompt, seed: u64, steps: usize, abl: &Ablation) -> Result<LatentImage> {
    let (kept, sub) = model.schedule.respaced(steps)?;
    let [c, h, w] = model.arch.image_shape();
    let mut x = LatentImage::gaussian(c, h, w, seed);
    for i in (0..kept.len()).rev() {
        let eps = model.forward_ablated(&x, kept[i], y, abl)?;
        x = denoise_step(&x, &eps, i, &sub)?;
    }
    Ok(x)
}
