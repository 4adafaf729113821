//! Run-directory persistence: raw little-endian complex fields with JSON
//! sidecars, CSV tables, JSON reports, and the run manifest with content
//! hashes.

use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};
use hartree_core::field::EnsembleField;
use hartree_core::grid::Grid;

/// Collects written artifacts so the manifest can list and hash them.
pub struct RunDir {
    pub root: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(RunDir {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, bytes)?;
        self.artifacts.push(p);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[Vec<f64>]) -> Result<()> {
        let mut out = String::new();
        out.push_str(header);
        out.push('\n');
        for row in rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        self.write_bytes(name, out.as_bytes())
    }

    /// Raw little-endian complex128 array, realization-major, with a JSON
    /// sidecar describing grid, time, provenance and layout.
    pub fn write_field(&mut self, name: &str, field: &EnsembleField) -> Result<()> {
        let mut bytes = Vec::with_capacity(field.values.len() * 16);
        for v in &field.values {
            bytes.extend_from_slice(&v.re.to_le_bytes());
            bytes.extend_from_slice(&v.im.to_le_bytes());
        }
        self.write_bytes(&format!("{name}.bin"), &bytes)?;
        let sidecar = FieldSidecar {
            grid: field.grid,
            time: field.time,
            seed: field.provenance.map(|w| w.seed),
            n_realizations: field.n_realizations,
            dtype: "complex128".into(),
            layout: "row-major, realization-major".into(),
            counter_contract: hartree_core::wiener::COUNTER_CONTRACT_VERSION,
        };
        self.write_json(&format!("{name}.json"), &sidecar)
    }

    /// Finish the run: write the manifest listing every artifact with its
    /// content hash.
    pub fn finish(mut self, resolved_config: &crate::config::RunConfig) -> Result<()> {
        let mut entries = Vec::new();
        for p in &self.artifacts {
            let bytes = std::fs::read(p)?;
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            entries.push(ManifestEntry {
                path: p
                    .strip_prefix(&self.root)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .to_string(),
                sha256: hex::encode(hasher.finalize()),
                bytes: bytes.len(),
            });
        }
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            counter_contract: hartree_core::wiener::COUNTER_CONTRACT_VERSION,
            config: resolved_config.clone(),
            density_normalization: "gamma[k][k'] = E(x_k conj x_k') / dxi^dim".into(),
            artifacts: entries,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        let p = self.path("manifest.json");
        std::fs::write(&p, text)?;
        self.artifacts.push(p);
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub grid: Grid,
    pub time: f64,
    pub seed: Option<u64>,
    pub n_realizations: usize,
    pub dtype: String,
    pub layout: String,
    pub counter_contract: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub counter_contract: u32,
    pub config: crate::config::RunConfig,
    pub density_normalization: String,
    pub artifacts: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Read a field written by `write_field`.
pub fn read_field(dir: &Path, name: &str) -> Result<EnsembleField> {
    let sidecar_text = std::fs::read_to_string(dir.join(format!("{name}.json")))?;
    let sidecar: FieldSidecar = serde_json::from_str(&sidecar_text)?;
    let bytes = std::fs::read(dir.join(format!("{name}.bin")))?;
    if bytes.len() != sidecar.n_realizations * sidecar.grid.size() * 16 {
        return Err(AppError::Config(format!(
            "field {name}: byte length {} does not match sidecar shape",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(bytes.len() / 16);
    for chunk in bytes.chunks_exact(16) {
        let re = f64::from_le_bytes(chunk[0..8].try_into().unwrap());
        let im = f64::from_le_bytes(chunk[8..16].try_into().unwrap());
        values.push(Complex64::new(re, im));
    }
    Ok(EnsembleField {
        grid: sidecar.grid,
        n_realizations: sidecar.n_realizations,
        time: sidecar.time,
        values,
        provenance: sidecar
            .seed
            .map(|s| hartree_core::wiener::WienerSample::new(s, sidecar.n_realizations)),
    })
}

/// Write one line to stderr (human diagnostics channel).
pub fn diag(msg: &str) {
    let _ = writeln!(std::io::stderr(), "{msg}");
}
