//! Run manifests and content hashing.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(sha256_hex(&bytes))
}

/// An input file pinned by content.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Inputs and outputs of one command run. The hash covers the command, its
/// configuration and the content of its inputs, never file paths, so reruns
/// on identical inputs produce identical hashes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub hash: String,
}

impl RunManifest {
    /// `inputs` are `(role, path)` pairs, e.g. `("corpus", "data/train.jsonl")`.
    pub fn new(
        command: &str,
        config: &impl Serialize,
        seed: u64,
        inputs: &[(&str, &Path)],
    ) -> CliResult<Self> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?;
        let inputs = inputs
            .iter()
            .map(|(role, path)| {
                Ok(InputFile {
                    role: role.to_string(),
                    path: path.to_path_buf(),
                    sha256: sha256_file(path)?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let pinned: Vec<_> = inputs.iter().map(|i| (&i.role, &i.sha256)).collect();
        let keyed = serde_json::json!({
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": pinned,
        });
        Ok(RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs,
            outputs: Vec::new(),
            hash: sha256_hex(keyed.to_string().as_bytes()),
        })
    }

    /// Comment line that opens every CSV written under this manifest.
    pub fn csv_banner(&self, kind: &str) -> String {
        format!("# refine3d {kind} v1 manifest={}", self.hash)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        write_file(path, text.as_bytes())
    }
}

/// `foo.bin` → `foo.bin.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path.display(), e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path.display(), e))?;
    f.flush().map_err(|e| CliError::io(path.display(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_ignores_paths_but_not_config() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        std::fs::write(&a, "x").unwrap();
        std::fs::write(&b, "x").unwrap();
        let ma = RunManifest::new("train", &1, 3, &[("corpus", a.as_path())]).unwrap();
        let mb = RunManifest::new("train", &1, 3, &[("corpus", b.as_path())]).unwrap();
        assert_eq!(ma.hash, mb.hash);
        let mc = RunManifest::new("train", &2, 3, &[("corpus", b.as_path())]).unwrap();
        assert_ne!(ma.hash, mc.hash);
        assert!(ma.csv_banner("eval").ends_with(&ma.hash));
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(
            sidecar(Path::new("out/model.ckpt"), "manifest.json"),
            PathBuf::from("out/model.ckpt.manifest.json")
        );
    }
}
