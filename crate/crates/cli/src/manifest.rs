use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash in git's object form (`blob <len>\0<bytes>`), with sha256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Serialize)]
pub struct Input {
    pub path: String,
    pub hash: String,
}

#[derive(Serialize)]
pub struct Manifest {
    pub schema: u32,
    pub command: Vec<String>,
    pub config_hash: String,
    pub inputs: Vec<Input>,
    pub entries: Vec<String>,
    pub wall_s: f64,
}

pub struct Run {
    start: Instant,
    pub manifest: Manifest,
}

impl Run {
    pub fn start(config_hash: &str) -> Self {
        let manifest = Manifest {
            schema: lap_core::data::SCHEMA,
            command: std::env::args().collect(),
            config_hash: config_hash.to_string(),
            inputs: Vec::new(),
            entries: Vec::new(),
            wall_s: 0.0,
        };
        Self { start: Instant::now(), manifest }
    }

    /// Hashes a file, or every file below a directory in name order.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        for p in files_below(path)? {
            let bytes = std::fs::read(&p)?;
            self.manifest.inputs.push(Input { path: p.display().to_string(), hash: blob_hash(&bytes) });
        }
        Ok(())
    }

    pub fn input_bytes(&mut self, label: &str, bytes: &[u8]) {
        self.manifest.inputs.push(Input { path: label.to_string(), hash: blob_hash(bytes) });
    }

    pub fn entry(&mut self, name: impl Into<String>) {
        self.manifest.entries.push(name.into());
    }

    /// Writes the manifest to `path` and returns its text.
    pub fn finish(mut self, path: &Path) -> Result<String> {
        self.manifest.wall_s = self.start.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(path, &text)?;
        Ok(text)
    }
}

fn files_below(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut names: Vec<PathBuf> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    names.sort();
    for p in names {
        out.extend(files_below(&p)?);
    }
    Ok(out)
}
