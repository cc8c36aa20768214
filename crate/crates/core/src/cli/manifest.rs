use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::model::hex;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every run's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    /// sha256 of the fully resolved arguments as JSON.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_s: f64,
    /// Output-relative path → sha256 of every file in the run directory.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else if p != root.join(MANIFEST_FILE) {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(())
}

pub(crate) struct RunRecorder {
    pub command: Vec<String>,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    started: Instant,
}

impl RunRecorder {
    pub fn start<A: Serialize>(command: &[String], args: &A, seed: Option<u64>, inputs: Vec<PathBuf>) -> Result<Self> {
        let json = serde_json::to_vec(args)?;
        Ok(RunRecorder {
            command: command.to_vec(),
            config_digest: hex(&Sha256::digest(json)),
            seed,
            inputs,
            started: Instant::now(),
        })
    }

    /// Checksums everything under `out` and writes the manifest there.
    pub fn finish(self, out: &Path) -> Result<RunManifest> {
        let mut checksums = BTreeMap::new();
        walk(out, out, &mut checksums)?;
        let m = RunManifest {
            command: self.command,
            config_digest: self.config_digest,
            seed: self.seed,
            inputs: self.inputs,
            outputs: checksums.keys().map(|k| out.join(k)).collect(),
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            checksums,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(out.join(MANIFEST_FILE), text)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksums_cover_nested_outputs_but_not_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.txt"), "a").unwrap();
        fs::write(dir.path().join("sub/b.txt"), "b").unwrap();
        let rec = RunRecorder::start(&["x".into()], &("k", 1), Some(3), vec![]).unwrap();
        let m = rec.finish(dir.path()).unwrap();
        assert_eq!(m.checksums.keys().collect::<Vec<_>>(), ["a.txt", "sub/b.txt"]);
        assert_eq!(m.checksums["a.txt"], "ca978112ca1bbdcafac231b39a23dc4da786eff8147c4e72b9807785afee48bb");
        // a second run must not checksum the first manifest
        let m2 = RunRecorder::start(&["x".into()], &("k", 1), Some(3), vec![]).unwrap().finish(dir.path()).unwrap();
        assert_eq!(m.checksums, m2.checksums);
        assert_eq!(m.config_digest, m2.config_digest);
    }
}
