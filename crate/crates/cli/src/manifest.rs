//! `manifest.json`: config hash, tool versions and a content hash for every
//! file under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::sha256;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::Io(dir.to_path_buf(), e))?.path();
        if path.is_dir() {
            collect(&path, root, out)?;
        } else if path != root.join(MANIFEST) {
            out.push(path);
        }
    }
    Ok(())
}

impl Manifest {
    pub fn build(config: &RunConfig, root: &Path) -> CliResult<Manifest> {
        let mut paths = Vec::new();
        if root.exists() {
            collect(root, root, &mut paths)?;
        }
        let mut files = Vec::with_capacity(paths.len());
        for p in paths {
            let bytes = std::fs::read(&p).map_err(|e| CliError::Io(p.clone(), e))?;
            let rel = p.strip_prefix(root).expect("under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            files.push(FileEntry {
                path: rel,
                sha256: sha256(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let versions = [
            ("nextcat".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("nextcat-core".to_string(), nextcat_core::VERSION.to_string()),
        ]
        .into_iter()
        .collect();
        Ok(Manifest {
            config_sha256: config.hash(),
            seed: config.seed,
            versions,
            files,
        })
    }

    pub fn write(&self, root: &Path) -> CliResult<()> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Io(root.to_path_buf(), e))?;
        Ok(nextcat_core::io::write_json(self, &root.join(MANIFEST))?)
    }
}
