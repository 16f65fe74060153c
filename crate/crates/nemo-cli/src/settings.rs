//! Loading a run configuration: profile defaults, then the TOML file merged on
//! top, then command-line overrides.

use std::path::Path;

use anyhow::{Context, Result};
use nemo::config::{Profile, RunConfig, SeedRegistry};
use sha2::{Digest, Sha256};

use crate::UsageError;

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_table(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

/// Parses a config file over the defaults of the profile it names (toy if absent).
pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    let user = match path {
        Some(p) => read_table(p)?,
        None => toml::Value::Table(Default::default()),
    };
    let profile: Profile = match user.get("profile") {
        Some(v) => v.clone().try_into().map_err(|e| UsageError(format!("profile: {e}")))?,
        None => Profile::Toy,
    };
    let mut base = toml::Value::try_from(RunConfig::for_profile(profile)).context("serializing defaults")?;
    merge(&mut base, user);
    let cfg: RunConfig = base.try_into().map_err(|e| UsageError(format!("config: {e}")))?;
    Ok(cfg)
}

/// Replaces the seed registry with the one in `path`; omitted keys keep their defaults.
pub fn load_seed_registry(path: &Path) -> Result<SeedRegistry> {
    let user = read_table(path)?;
    user.try_into().map_err(|e| UsageError(format!("seed registry: {e}")).into())
}

/// SHA-256 of the canonical JSON form of the config.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).context("serializing config")
}
