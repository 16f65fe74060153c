//! Run configuration shared by the library pipeline and the command line.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{NemoError, Result};
use crate::localizer::LocalizerConfig;
use crate::metrics::GenSettings;
use crate::toy_model::data::DataConfig;
use crate::toy_model::train::TrainConfig;
use crate::toy_model::Arch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Tiny,
    Toy,
}

/// Noise seeds per purpose plus the RNG seeds of the prompt pools. The three
/// noise-seed families must not overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedRegistry {
    pub localization: Vec<u64>,
    pub evaluation: Vec<u64>,
    /// Random-baseline trial `i` uses seed `baseline_start + i`.
    pub baseline_start: u64,
    pub baseline_trials: usize,
    /// Prompt pool for the threshold and activation statistics.
    pub calibration_prompts: u64,
    /// Negatives for detection AUROC.
    pub detection_prompts: u64,
    /// Non-memorized prompts run through localization.
    pub fresh_prompts: u64,
    pub probes: u64,
}

impl Default for SeedRegistry {
    fn default() -> Self {
        Self {
            localization: (1..=10).collect(),
            evaluation: (101..=110).collect(),
            baseline_start: 201,
            baseline_trials: 10,
            calibration_prompts: 1000,
            detection_prompts: 2000,
            fresh_prompts: 3000,
            probes: 4000,
        }
    }
}

impl SeedRegistry {
    pub fn baseline(&self) -> Vec<u64> {
        (0..self.baseline_trials as u64).map(|i| self.baseline_start + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.localization.len() < 2 || self.evaluation.len() < 2 {
            return Err(NemoError::Config("localization and evaluation need at least 2 seeds each".into()));
        }
        let families = [("localization", self.localization.clone()), ("evaluation", self.evaluation.clone()), ("baseline", self.baseline())];
        for i in 0..families.len() {
            for j in i + 1..families.len() {
                let a: BTreeSet<u64> = families[i].1.iter().copied().collect();
                if let Some(s) = families[j].1.iter().find(|s| a.contains(s)) {
                    return Err(NemoError::Config(format!(
                        "seed {s} is in both the {} and {} registries",
                        families[i].0, families[j].0
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub seeds: SeedRegistry,
    /// Threshold is holdout mean + c_sigma * std.
    pub c_sigma: f64,
    pub theta_start: f64,
    pub theta_step: f64,
    pub theta_min: f64,
    /// Activation scale applied to found neurons by mitigation (0 deactivates).
    pub scale: f64,
    pub n_calibration: usize,
    pub n_detection: usize,
    pub n_fresh: usize,
    pub probes_per_prompt: usize,
    pub gen_steps: usize,
    pub oracle_max_card: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let train = match profile {
            Profile::Toy => TrainConfig::default(),
            Profile::Tiny => TrainConfig::tiny(),
        };
        Self {
            profile,
            train,
            seeds: SeedRegistry::default(),
            c_sigma: 1.0,
            theta_start: 5.0,
            theta_step: 0.25,
            theta_min: 1.0,
            scale: 0.0,
            n_calibration: 40,
            n_detection: 20,
            n_fresh: 20,
            probes_per_prompt: 4,
            gen_steps: 50,
            oracle_max_card: 3,
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.train.arch
    }

    pub fn data(&self) -> &DataConfig {
        &self.train.data
    }

    pub fn localizer(&self) -> LocalizerConfig {
        LocalizerConfig {
            theta_start: self.theta_start,
            theta_step: self.theta_step,
            theta_min: self.theta_min,
            seeds: self.seeds.localization.clone(),
        }
    }

    pub fn gen(&self) -> GenSettings {
        GenSettings { seeds: self.seeds.evaluation.clone(), steps: self.gen_steps }
    }

    pub fn validate(&self) -> Result<()> {
        self.seeds.validate()?;
        self.train.arch.validate()?;
        self.train.data.validate()?;
        if !(self.theta_step > 0.0) || self.theta_min > self.theta_start {
            return Err(NemoError::Config("need theta_step > 0 and theta_min <= theta_start".into()));
        }
        if self.gen_steps == 0 || self.gen_steps > self.train.arch.timesteps {
            return Err(NemoError::Config("gen_steps must be in 1..=timesteps".into()));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Toy)
    }
}
