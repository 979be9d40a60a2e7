use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;

pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    /// Epoch of the model that was kept and scored instead.
    pub kept_epoch: usize,
}

/// Run manifest. Contains no timestamps or absolute paths, so identical
/// runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub operation: String,
    pub family: String,
    pub regime: String,
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    pub lowest_density_id: Option<u64>,
    pub divergence: Option<Divergence>,
    pub notes: Vec<String>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(operation: &str, family: &str, regime: &str) -> Self {
        Self {
            name: String::new(),
            operation: operation.into(),
            family: family.into(),
            regime: regime.into(),
            config: String::new(),
            seeds: BTreeMap::new(),
            lowest_density_id: None,
            divergence: None,
            notes: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Removes the lock file when the run ends, successfully or not.
#[derive(Debug)]
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// An output directory owned by one run: every file written through it is
/// hashed into the manifest.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
    _lock: LockGuard,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(path.display().to_string(), e)
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(HarnessError::Locked(root.display().to_string()))
            }
            Err(e) => return Err(io_err(&lock)(e)),
        }
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
            _lock: LockGuard(lock),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, HarnessError> {
        if rel == MANIFEST_FILE || rel == LOCK_FILE {
            return Err(HarnessError::Config(format!("reserved artifact name {rel}")));
        }
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, HarnessError> {
        let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    /// Writes the manifest covering every file written so far and releases
    /// the lock.
    pub fn finish(self, mut manifest: Manifest) -> Result<RunArtifacts, HarnessError> {
        manifest.files = self
            .files
            .iter()
            .map(|(path, sha256)| FileEntry {
                path: path.clone(),
                sha256: sha256.clone(),
            })
            .collect();
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_json()).map_err(io_err(&path))?;
        Ok(RunArtifacts {
            root: self.root.clone(),
            manifest,
        })
    }
}

/// Files of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl RunArtifacts {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load(root: &Path) -> Result<Self, HarnessError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest = serde_json::from_str(&text).map_err(|e| HarnessError::Corrupt(format!("{}: {e}", path.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Files whose current content no longer matches the manifest.
    pub fn verify(&self) -> Result<Vec<String>, HarnessError> {
        let mut bad = Vec::new();
        for entry in &self.manifest.files {
            let path = self.root.join(&entry.path);
            match fs::read(&path) {
                Ok(bytes) if sha256_hex(&bytes) == entry.sha256 => {}
                Ok(_) => bad.push(entry.path.clone()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => bad.push(entry.path.clone()),
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(tmp.path()).unwrap();
        assert!(matches!(RunDir::create(tmp.path()), Err(HarnessError::Locked(_))));
        drop(dir);
        assert!(RunDir::create(tmp.path()).is_ok());
    }

    #[test]
    fn manifest_covers_written_files() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dir = RunDir::create(tmp.path()).unwrap();
        dir.write("b.txt", b"bee").unwrap();
        dir.write("sub/a.txt", b"ay").unwrap();
        assert!(dir.write(MANIFEST_FILE, b"x").is_err());
        let run = dir.finish(Manifest::new("test", "flow", "base")).unwrap();
        let paths: Vec<_> = run.manifest.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, vec!["b.txt", "sub/a.txt"]);
        assert_eq!(run.manifest.files[0].sha256, sha256_hex(b"bee"));
        assert!(!tmp.path().join(LOCK_FILE).exists());

        let loaded = RunArtifacts::load(tmp.path()).unwrap();
        assert_eq!(loaded.manifest, run.manifest);
        assert!(loaded.verify().unwrap().is_empty());
        fs::write(tmp.path().join("b.txt"), b"wasp").unwrap();
        assert_eq!(loaded.verify().unwrap(), vec!["b.txt"]);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
