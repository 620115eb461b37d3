//! Run directories, manifests and content-addressed caches.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use neoseize::config::{to_toml, PipelineConfig};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a serializable configuration section.
pub fn section_hash<T: Serialize>(section: &T) -> String {
    let text = serde_json::to_string(section).expect("configuration sections serialize");
    sha256_hex(text.as_bytes())
}

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    run_id: &'a str,
    created_at: String,
    code_version: &'static str,
    seed: u64,
    argv: &'a [String],
    config: String,
    inputs: &'a [FileHash],
    outputs: Vec<FileHash>,
}

/// One command invocation: its output directory plus the files it read.
pub struct Run {
    pub command: String,
    pub cfg: PipelineConfig,
    pub dir: PathBuf,
    /// `<command>-<first 12 hex digits of the config hash>`; identical
    /// configurations give identical ids.
    pub run_id: String,
    pub argv: Vec<String>,
    inputs: Vec<FileHash>,
}

impl Run {
    /// Creates `out`, or `<runs_dir>/<timestamp>-<run_id>` with a numeric
    /// suffix if that already exists.
    pub fn create(command: &str, cfg: PipelineConfig, out: Option<&Path>, argv: Vec<String>) -> Result<Self> {
        let hash = sha256_hex(format!("{command}\n{}", to_toml(&cfg)).as_bytes());
        let run_id = format!("{command}-{}", &hash[..12]);
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
                let base = cfg.paths.runs_dir.join(format!("{stamp}-{run_id}"));
                let mut dir = base.clone();
                let mut k = 2;
                while dir.exists() {
                    dir = PathBuf::from(format!("{}-{k}", base.display()));
                    k += 1;
                }
                dir
            }
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        info!("run {run_id} in {}", dir.display());
        Ok(Run { command: command.into(), cfg, dir, run_id, argv, inputs: Vec::new() })
    }

    /// Reads a file and records its hash as an input of this run.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(FileHash { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Writes `rel` inside the run directory, creating parents.
    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Writes `config.toml` and `manifest.json`, hashing every file in the
    /// run directory as an output.
    pub fn finish(self) -> Result<PathBuf> {
        let config = to_toml(&self.cfg);
        self.write("config.toml", &config)?;
        let mut outputs = Vec::new();
        collect_files(&self.dir, &self.dir, &mut outputs)?;
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: &self.command,
            run_id: &self.run_id,
            created_at: chrono::Utc::now().to_rfc3339(),
            code_version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.seed,
            argv: &self.argv,
            config,
            inputs: &self.inputs,
            outputs,
        };
        self.write("manifest.json", serde_json::to_string_pretty(&manifest)?)?;
        Ok(self.dir)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileHash>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = path.strip_prefix(root).unwrap_or(&path).display().to_string();
            out.push(FileHash { path: rel, sha256: sha256_hex(&fs::read(&path)?) });
        }
    }
    Ok(())
}

/// A subject's raw recording and annotation sidecar.
#[derive(Debug, Clone)]
pub struct RawSubject {
    pub subject: String,
    pub edf: PathBuf,
    pub annotations: PathBuf,
}

/// Every `<subject>.edf` in `raw_dir` with its `<subject>.csv`, sorted.
pub fn raw_subjects(cfg: &PipelineConfig) -> Result<Vec<RawSubject>> {
    let dir = &cfg.paths.raw_dir;
    if !dir.is_dir() {
        bail!("paths.raw_dir: directory {} does not exist", dir.display());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("edf")) {
            let subject = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let annotations = path.with_extension("csv");
            if !annotations.is_file() {
                bail!("paths.raw_dir: {} has no annotation file {}", path.display(), annotations.display());
            }
            out.push(RawSubject { subject, edf: path, annotations });
        }
    }
    if out.is_empty() {
        bail!("paths.raw_dir: no .edf recordings in {}", dir.display());
    }
    out.sort_by(|a, b| a.subject.cmp(&b.subject));
    Ok(out)
}

/// Cache file names derived from input content and the relevant config.
pub struct CacheKeys {
    pub segments: PathBuf,
    pub features: PathBuf,
}

pub fn cache_keys(cfg: &PipelineConfig, subject: &str, edf: &[u8], annotations: &[u8]) -> CacheKeys {
    let input = sha256_hex(&[sha256_hex(edf).as_bytes(), sha256_hex(annotations).as_bytes()].concat());
    let seg = sha256_hex(format!("{input}{}", section_hash(&cfg.preprocess)).as_bytes());
    let feat = sha256_hex(format!("{seg}{}", section_hash(&cfg.mfcc)).as_bytes());
    let root = &cfg.paths.cache_dir;
    CacheKeys {
        segments: root.join("segments").join(format!("{subject}-{}.nsseg", &seg[..16])),
        features: root.join("features").join(format!("{subject}-{}.nsfeat", &feat[..16])),
    }
}

/// Writes `bytes` unless the content-addressed file already exists.
pub fn write_cache(path: &Path, bytes: &[u8]) -> Result<bool> {
    if path.is_file() {
        return Ok(false);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(true)
}
