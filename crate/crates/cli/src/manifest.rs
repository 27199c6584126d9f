//! Run directories and their content manifests.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use noisectl_core::Tensor;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "NCMANIFEST 1";

/// An output directory that remembers every artifact written into it.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: BTreeSet<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), files: BTreeSet::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Note a file some other code already wrote under the root.
    pub fn record(&mut self, name: impl Into<String>) {
        self.files.insert(name.into());
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) -> Result<(), CliError> {
        let mut buf = Vec::new();
        t.write_nct(&mut buf)?;
        self.write(name, buf)
    }

    /// Hash every recorded artifact and write the manifest.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let mut text = format!("{MANIFEST_HEADER}\n");
        for name in &self.files {
            let path = self.path(name);
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            text.push_str(&format!("{}  {name}\n", hex::encode(Sha256::digest(&bytes))));
        }
        let out = self.path(MANIFEST_FILE);
        fs::write(&out, text).map_err(|e| CliError::io(&out, e))?;
        Ok(out)
    }
}

/// `(hash, path)` entries of a manifest file.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(CliError::Runtime(format!("{} is not a manifest", path.display())));
    }
    lines
        .map(|l| {
            l.split_once("  ")
                .map(|(h, p)| (h.to_string(), p.to_string()))
                .ok_or_else(|| CliError::Runtime(format!("malformed manifest line {l:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_sorted_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path()).unwrap();
        run.write("b.txt", "hello").unwrap();
        run.write("a/x.txt", "").unwrap();
        let m = run.finish().unwrap();
        let entries = read_manifest(&m).unwrap();
        assert_eq!(entries[0].1, "a/x.txt");
        assert_eq!(entries[0].0, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(entries[1].0, "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
    }
}
