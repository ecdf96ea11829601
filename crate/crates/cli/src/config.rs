//! Engine configuration file. Flags given on the command line take
//! precedence over values read here.

use std::path::{Path, PathBuf};

use narravoc::genret::RetInit;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{CliResult, Failure};

pub const CONFIG_ENV: &str = "NARRAVOC_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub matrices: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub paths: Paths,
    pub dim: Option<usize>,
    pub encoder: Option<String>,
    pub ret_init: Option<RetInit>,
    pub temperature: Option<f64>,
    pub threshold: Option<f32>,
    pub beam: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

/// Reads JSON when the extension is `.json`, TOML otherwise.
pub fn read_structured<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::domain("cli.config", format!("{}: {e}", path.display())))?;
    let bad = |e: String| Failure::domain("cli.config", format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

impl EngineConfig {
    /// Loads `explicit`, else the file named by `NARRAVOC_CONFIG`, else the
    /// defaults. Relative paths resolve against the config file's directory
    /// and must exist.
    pub fn load(explicit: Option<&Path>) -> CliResult<Self> {
        let from_env = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        let Some(path) = explicit.map(Path::to_path_buf).or(from_env) else {
            return Ok(EngineConfig::default());
        };
        let mut cfg: EngineConfig = read_structured(&path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in [&mut p.vocab, &mut p.matrices, &mut p.index, &mut p.checkpoint, &mut p.data] {
            if let Some(rel) = slot.take() {
                let full = if rel.is_absolute() { rel } else { base.join(rel) };
                if !full.exists() {
                    return Err(Failure::domain("cli.config", format!("configured path {} does not exist", full.display())));
                }
                *slot = Some(full);
            }
        }
        Ok(cfg)
    }
}

/// Flag value, else config value, else a usage error naming the flag.
pub fn require<T>(flag: Option<T>, config: Option<T>, name: &str) -> CliResult<T> {
    flag.or(config).ok_or_else(|| Failure::Usage(format!("missing --{name} (flag or config)")))
}
