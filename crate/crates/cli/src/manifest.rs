use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Everything needed to rerun a command and get the same files back.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// Effective arguments after merging any config file.
    pub argv: Vec<String>,
    pub inputs: Vec<InputRecord>,
    pub seed: Option<u64>,
    pub scenario: Option<serde_json::Value>,
    pub config_hash: Option<String>,
    pub outputs: Vec<String>,
    pub status: String,
    pub error: Option<String>,
}

/// Output directory plus the manifest being assembled for this run.
pub struct Run {
    pub out: PathBuf,
    pub manifest: Manifest,
}

impl Run {
    pub fn new(out: &Path, command: &str, argv: Vec<String>) -> Self {
        Self {
            out: out.to_path_buf(),
            manifest: Manifest {
                tool: "ipdmix",
                version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                argv,
                inputs: Vec::new(),
                seed: None,
                scenario: None,
                config_hash: None,
                outputs: Vec::new(),
                status: "running".into(),
                error: None,
            },
        }
    }

    pub fn record_input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: hex(&Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Creates `name` in the output directory and records it.
    pub fn create(&mut self, name: &str) -> anyhow::Result<BufWriter<File>> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.manifest.outputs.push(name.to_string());
        Ok(BufWriter::new(file))
    }

    pub fn finish(mut self, result: &anyhow::Result<()>) -> anyhow::Result<()> {
        match result {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "error".into();
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        fs::create_dir_all(&self.out)?;
        let file = File::create(self.out.join("manifest.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &self.manifest)?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
