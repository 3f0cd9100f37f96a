//! `manifest.txt`: `key = value` lines recording what a run read and how.

use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct Manifest {
    entries: Vec<(String, String)>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            return Ok(hex::encode(h.finalize()));
        }
        h.update(&buf[..k]);
    }
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let args: Vec<String> = std::env::args().skip(1).collect();
        let mut m = Self { entries: Vec::new() };
        m.set("command", command)
            .set("version", env!("CARGO_PKG_VERSION"))
            .set("args", args.join(" "))
            .set("seed", cfg.seed)
            .set("config_hash", cfg.hash());
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let digest = file_digest(path)?;
        self.set(&format!("input.{name}"), format!("{} sha256:{digest}", path.display()));
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text: String = self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        fs::write(dir.join("manifest.txt"), text).with_context(|| format!("writing manifest in {}", dir.display()))
    }
}
