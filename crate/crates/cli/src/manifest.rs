//! Run manifests: written before any work starts, completed with output
//! checksums at the end.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: RunStatus,
    pub seed: Option<u64>,
    /// Resolved configuration snapshot.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    /// Declared artifacts, filled with checksums on completion.
    pub outputs: BTreeMap<String, PathBuf>,
    pub input_checksums: BTreeMap<String, String>,
    pub checksums: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    dir: PathBuf,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    /// Creates the output directory and writes the manifest with status
    /// `running`.
    pub fn begin(
        command: &str,
        dir: &Path,
        seed: Option<u64>,
        config: serde_json::Value,
        inputs: &[(&str, &Path)],
        outputs: &[(&str, &str)],
    ) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut input_checksums = BTreeMap::new();
        for (role, path) in inputs {
            if path.is_file() {
                input_checksums.insert(role.to_string(), sha256_file(path)?);
            }
        }
        let m = Self {
            command: command.to_string(),
            status: RunStatus::Running,
            seed,
            config,
            inputs: inputs.iter().map(|(r, p)| (r.to_string(), p.to_path_buf())).collect(),
            outputs: outputs.iter().map(|(r, f)| (r.to_string(), dir.join(f))).collect(),
            input_checksums,
            checksums: BTreeMap::new(),
            error: None,
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn path(&self, role: &str) -> PathBuf {
        self.outputs[role].clone()
    }

    fn write(&self) -> CliResult<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    /// Checksums every declared output, re-reads them to confirm, and marks
    /// the run complete. A missing artifact is a data error.
    pub fn complete(mut self) -> CliResult<Self> {
        let mut sums = BTreeMap::new();
        for (role, path) in &self.outputs {
            if !path.is_file() {
                return Err(CliError::Data(format!("declared artifact `{role}` missing at {}", path.display())));
            }
            sums.insert(role.clone(), sha256_file(path)?);
        }
        for (role, sum) in &sums {
            if &sha256_file(&self.outputs[role])? != sum {
                return Err(CliError::Data(format!("artifact `{role}` changed while checksumming")));
            }
        }
        self.checksums = sums;
        self.status = RunStatus::Complete;
        self.write()?;
        Ok(self)
    }

    pub fn fail(mut self, err: &CliError) {
        self.status = RunStatus::Failed;
        self.error = Some(err.to_string());
        let _ = self.write();
    }
}
