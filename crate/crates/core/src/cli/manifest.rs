use std::fs;
use std::io::Read;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::{CliError, CliResult};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";
/// Manifest name used when the output is a directory.
pub const DIR_MANIFEST: &str = "tracerseg.manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl HostInfo {
    fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Provenance record of one invocation. Everything except `timings` and
/// `host` is a pure function of the inputs and resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    /// Output paths relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub result: Value,
    pub timings: Map<String, Value>,
    pub host: HostInfo,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            result: Value::Null,
            timings: Map::new(),
            host: HostInfo::current(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn timing(&mut self, stage: &str, seconds: f64) {
        self.timings.insert(stage.into(), Value::from(seconds));
    }

    /// Record `outputs` relative to the manifest location and write it
    /// atomically.
    pub fn write(mut self, manifest_path: &Path, outputs: &[PathBuf]) -> CliResult<PathBuf> {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        self.outputs = outputs.iter().map(|p| relative_to(p, base)).collect();
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        atomic_write(manifest_path, text.as_bytes())?;
        Ok(manifest_path.to_path_buf())
    }
}

/// `<out>.manifest.json` for files, `<out>/tracerseg.manifest.json` for directories.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join(DIR_MANIFEST)
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(MANIFEST_SUFFIX);
        PathBuf::from(s)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(|e| CliError::io(e.to_string()))?;
    tmp.persist(path)
        .map_err(|e| CliError::io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Lexical relative path from `base` to `path`; both are made absolute
/// against the working directory first.
fn relative_to(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| -> Vec<String> {
        let full = if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir().unwrap_or_default().join(p)
        };
        let mut parts: Vec<String> = Vec::new();
        for c in full.components() {
            match c {
                Component::Normal(s) => parts.push(s.to_string_lossy().into_owned()),
                Component::ParentDir => {
                    parts.pop();
                }
                _ => {}
            }
        }
        parts
    };
    let (p, b) = (abs(path), abs(base));
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out: Vec<String> = vec!["..".into(); b.len() - common];
    out.extend(p[common..].iter().cloned());
    if out.is_empty() {
        ".".into()
    } else {
        out.join("/")
    }
}
