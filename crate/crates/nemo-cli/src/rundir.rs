//! Run directories named by UTC timestamp and config hash, holding
//! self-describing reports that embed the exact config.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nemo::config::RunConfig;
use serde::Serialize;

use crate::settings::{config_hash, to_toml};

pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
    cfg: RunConfig,
    command: String,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    config_hash: &'a str,
    config: &'a RunConfig,
    payload: &'a T,
}

impl RunDir {
    /// Creates `<base>/<timestamp>-<hash prefix>-<command>`, adding a counter if it already exists.
    pub fn create(base: &Path, cfg: &RunConfig, command: &str) -> Result<Self> {
        let hash = config_hash(cfg);
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let stem = format!("{stamp}-{}-{command}", &hash[..12]);
        let mut path = base.join(&stem);
        let mut n = 1;
        while path.exists() {
            path = base.join(format!("{stem}.{n}"));
            n += 1;
        }
        std::fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        std::fs::write(path.join("config.toml"), to_toml(cfg)?).context("writing config.toml")?;
        Ok(Self { path, hash, cfg: cfg.clone(), command: command.to_string() })
    }

    /// Writes `payload` wrapped with the command name, config and its hash. Never overwrites.
    pub fn write_report<T: Serialize>(&self, name: &str, payload: &T) -> Result<PathBuf> {
        let env = Envelope { command: &self.command, config_hash: &self.hash, config: &self.cfg, payload };
        self.write_new(name, serde_json::to_string_pretty(&env)?.as_bytes())
    }

    pub fn write_new(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        use std::io::Write;
        let p = self.path.join(name);
        let mut f = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&p)
            .with_context(|| format!("creating {}", p.display()))?;
        f.write_all(bytes)?;
        Ok(p)
    }
}

/// Reads the payload of a report written by [`RunDir::write_report`].
pub fn read_payload<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let payload = v.get_mut("payload").map(serde_json::Value::take).with_context(|| format!("{}: no payload", path.display()))?;
    serde_json::from_value(payload).with_context(|| format!("decoding {}", path.display()))
}
