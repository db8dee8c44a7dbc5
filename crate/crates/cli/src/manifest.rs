//! Run directories: `manifest.json`, `config.toml` and `outputs/`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const OUTPUTS_DIR: &str = "outputs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the relative paths in `argv` resolve against.
    pub cwd: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Absolute paths.
    pub inputs: Vec<FileHash>,
    /// Paths relative to the run directory.
    pub outputs: Vec<FileHash>,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
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

/// Every regular file under `dir`, sorted, as paths relative to `base`.
fn list_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(&p, base, out)?;
        } else {
            out.push(p.strip_prefix(base).expect("under base").to_path_buf());
        }
    }
    Ok(())
}

fn portable(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// An open run directory. Nothing is written until [`RunDir::create`].
pub struct RunDir {
    pub root: PathBuf,
    started: Instant,
    started_at: f64,
    inputs: Vec<FileHash>,
}

impl RunDir {
    /// Refuses a directory that already holds a manifest unless `force`.
    pub fn create(root: &Path, force: bool) -> CliResult<Self> {
        let manifest = root.join(MANIFEST_FILE);
        if manifest.exists() && !force {
            return Err(CliError::RunExists(root.to_path_buf()));
        }
        let outputs = root.join(OUTPUTS_DIR);
        if outputs.exists() {
            fs::remove_dir_all(&outputs).map_err(|e| CliError::io(&outputs, e))?;
        }
        fs::create_dir_all(&outputs).map_err(|e| CliError::io(&outputs, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            started: Instant::now(),
            started_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            inputs: Vec::new(),
        })
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.root.join(OUTPUTS_DIR).join(name)
    }

    /// Hashes an input file now, before the command reads it.
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        if !path.is_file() {
            return Err(CliError::MissingFile(path.to_path_buf()));
        }
        let abs = std::path::absolute(path).map_err(|e| CliError::io(path, e))?;
        let sha256 = sha256_file(&abs)?;
        self.inputs.push(FileHash {
            path: abs.to_string_lossy().into_owned(),
            sha256,
        });
        Ok(())
    }

    pub fn finish(
        self,
        command: &str,
        argv: &[String],
        cwd: &Path,
        config: serde_json::Value,
        config_toml: &str,
        seeds: Vec<u64>,
    ) -> CliResult<RunManifest> {
        let config_path = self.root.join(CONFIG_FILE);
        fs::write(&config_path, config_toml).map_err(|e| CliError::io(&config_path, e))?;
        let mut files = Vec::new();
        list_files(&self.root.join(OUTPUTS_DIR), &self.root, &mut files)?;
        let outputs = files
            .iter()
            .map(|rel| {
                Ok(FileHash {
                    path: portable(rel),
                    sha256: sha256_file(&self.root.join(rel))?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = RunManifest {
            tool: format!("locret {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            argv: argv.to_vec(),
            cwd: cwd.to_string_lossy().into_owned(),
            config,
            seeds,
            inputs: self.inputs,
            outputs,
            started_at: self.started_at,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

/// TOML rendering of a JSON config echo; nulls are dropped since TOML has none.
pub fn to_toml(value: &serde_json::Value) -> String {
    fn strip(v: &serde_json::Value) -> Option<serde_json::Value> {
        use serde_json::Value;
        match v {
            Value::Null => None,
            Value::Object(m) => Some(Value::Object(
                m.iter().filter_map(|(k, v)| strip(v).map(|v| (k.clone(), v))).collect(),
            )),
            Value::Array(a) => Some(Value::Array(a.iter().filter_map(strip).collect())),
            other => Some(other.clone()),
        }
    }
    match strip(value) {
        Some(v @ serde_json::Value::Object(_)) => toml::to_string(&v).unwrap_or_default(),
        _ => String::new(),
    }
}
