use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use contra::dataset::sha256_hex;
use contra::{Error, Result};
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Everything needed to rerun a command: resolved config, seed, build and
/// the checksums of every input file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    /// Input file path → sha256 hex.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(config: Value, seed: Option<u64>, threads: usize) -> Self {
        Self {
            command: std::env::args().collect(),
            config,
            seed,
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            threads,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Records the checksum of `path`, or of every file directly inside it
    /// other than an earlier run's manifest.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let files: Vec<PathBuf> = if path.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| io_err(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.file_name() != Some(MANIFEST_FILE.as_ref()))
                .collect();
            v.sort();
            v
        } else {
            vec![path.to_path_buf()]
        };
        for f in files {
            let bytes = fs::read(&f).map_err(|e| io_err(&f, e))?;
            self.inputs.insert(f.display().to_string(), sha256_hex(&bytes));
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}
