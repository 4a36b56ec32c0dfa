//! Run directories: staged writes, hashed inventory, manifest, lock.
//!
//! Files are written under `<out>.staging-<pid>` and the finished tree is
//! renamed to `<out>`; the manifest is the last file written. `<out>.lock`
//! is held for the whole run.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const ARTIFACT: &str = "vws";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub started: String,
    pub finished: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a config echo without its output directory, so reruns of one
/// experiment into different directories share it.
pub fn config_hash(config: &serde_json::Value) -> anyhow::Result<String> {
    let mut c = config.clone();
    if let Some(map) = c.as_object_mut() {
        map.remove("out");
    }
    Ok(sha256_hex(serde_json::to_string(&c)?.as_bytes()))
}

fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

/// A run directory being filled.
pub struct RunDir {
    out: PathBuf,
    staging: PathBuf,
    files: Vec<FileEntry>,
    started: DateTime<Utc>,
    _lock: Lock,
}

impl RunDir {
    /// Takes the lock and creates the staging directory. Fails if `out`
    /// already exists or another run holds the lock.
    pub fn create(out: &Path) -> anyhow::Result<Self> {
        if out.as_os_str().is_empty() {
            bail!("empty output path");
        }
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let lock_path = sibling(out, ".lock");
        let mut lock = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
            .with_context(|| format!("{} is locked by another run ({})", out.display(), lock_path.display()))?;
        writeln!(lock, "{}", std::process::id())?;
        let lock = Lock(lock_path);
        if out.exists() {
            bail!("output directory {} already exists", out.display());
        }
        let staging = sibling(out, &format!(".staging-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            staging,
            files: Vec::new(),
            started: Utc::now(),
            _lock: lock,
        })
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.staging.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = File::create(&path).with_context(|| format!("creating {rel}"))?;
        f.write_all(bytes)?;
        f.sync_all()?;
        self.files.retain(|e| e.path != rel);
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    pub fn write_csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write_bytes(rel, &bytes)
    }

    /// Two whitespace-separated columns with a `#` header line.
    pub fn write_plot(&mut self, rel: &str, header: [&str; 2], points: &[(f64, f64)]) -> anyhow::Result<()> {
        let mut text = format!("# {} {}\n", header[0], header[1]);
        for (x, y) in points {
            text.push_str(&format!("{x} {y}\n"));
        }
        self.write_bytes(rel, text.as_bytes())
    }

    /// Writes the manifest and moves the tree into place.
    pub fn finish(
        mut self,
        command: &str,
        seed: u64,
        config: serde_json::Value,
        failure: Option<String>,
    ) -> anyhow::Result<RunManifest> {
        let config_sha256 = config_hash(&config)?;
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            artifact: ARTIFACT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            config_sha256,
            started: timestamp(self.started),
            finished: timestamp(Utc::now()),
            status: if failure.is_some() { RunStatus::Failed } else { RunStatus::Complete },
            failure,
            files: std::mem::take(&mut self.files),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let mut f = File::create(self.staging.join(MANIFEST))?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
        fs::rename(&self.staging, &self.out)
            .with_context(|| format!("moving {} to {}", self.staging.display(), self.out.display()))?;
        Ok(manifest)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Reads a run directory's manifest and checks every listed file against
/// its hash. The error names the first offending file.
pub fn read_verified(dir: &Path) -> anyhow::Result<RunManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if manifest.artifact != ARTIFACT {
        bail!("{} is not a {ARTIFACT} manifest", path.display());
    }
    for entry in &manifest.files {
        let file = dir.join(&entry.path);
        let bytes = fs::read(&file).with_context(|| format!("listed file {} is missing", file.display()))?;
        if sha256_hex(&bytes) != entry.sha256 {
            bail!("hash mismatch in {}", file.display());
        }
    }
    Ok(manifest)
}
