//! Layered configuration (defaults < JSON file < flags) and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use amber_core::dataio::{sha256_hex, SynthConfig};
use amber_core::evalreport::ReportFormat;
use amber_core::trainer::TrainConfig;
use amber_core::AmberError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const MANIFEST_FORMAT: &str = "amber-manifest-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub data: PathBuf,
    /// Expected fold count; must match the dataset when set.
    pub folds: Option<usize>,
    pub train: TrainConfig,
    pub format: ReportFormat,
    /// Search the λ_MAI × κ grid on validation before the final run.
    pub grid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Evaluate on one fold only; all samples otherwise.
    pub fold: Option<usize>,
    pub bins: usize,
    pub system: String,
    pub format: ReportFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinsSettings {
    pub predictions: PathBuf,
    pub bins: usize,
    pub format: ReportFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSettings {
    pub baseline: PathBuf,
    pub candidate: PathBuf,
    pub baseline_system: String,
    pub candidate_system: String,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            data: PathBuf::new(),
            folds: None,
            train: TrainConfig::default(),
            format: ReportFormat::Csv,
            grid: false,
        }
    }
}

/// Flag overrides as (dotted path, value) pairs.
#[derive(Debug, Default)]
pub struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, path: &'static str, value: Option<T>) {
        if let Some(v) = value {
            self.0
                .push((path, serde_json::to_value(v).expect("flag value serializes")));
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !cur.get(*p).is_some_and(Value::is_object) {
            cur[*p] = Value::Object(Map::new());
        }
        cur = cur.get_mut(*p).expect("just inserted");
    }
    cur[parts[parts.len() - 1]] = value;
}

/// Reads a config file; a manifest contributes its frozen config.
fn read_config_file(path: &Path, command: &str) -> Result<Value, AmberError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AmberError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| AmberError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
    if v.get("format").and_then(Value::as_str) == Some(MANIFEST_FORMAT) {
        let m: Manifest = serde_json::from_value(v)?;
        if m.command != command {
            return Err(AmberError::Config(format!(
                "manifest {} belongs to '{}', not '{command}'",
                path.display(),
                m.command
            )));
        }
        return Ok(m.config);
    }
    if !v.is_object() {
        return Err(AmberError::Config(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    }
    Ok(v)
}

/// Resolves `defaults < file < flags` and rejects keys the settings type
/// does not know.
pub fn resolve<T>(defaults: &T, file: Option<&Path>, command: &str, flags: Overrides) -> Result<T, AmberError>
where
    T: Serialize + DeserializeOwned,
{
    let mut merged = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        merge(&mut merged, read_config_file(path, command)?);
    }
    for (path, v) in flags.0 {
        set_path(&mut merged, path, v);
    }
    let resolved: T = serde_json::from_value(merged.clone()).map_err(|e| AmberError::Config(e.to_string()))?;
    if let Some(key) = first_unknown(&serde_json::to_value(&resolved)?, &merged, "") {
        return Err(AmberError::Config(format!("unknown configuration key '{key}'")));
    }
    Ok(resolved)
}

fn first_unknown(known: &Value, given: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(k), Value::Object(g)) = (known, given) else {
        return None;
    };
    for (key, v) in g {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match k.get(key) {
            None => return Some(path),
            Some(kv) => {
                if let Some(p) = first_unknown(kv, v, &path) {
                    return Some(p);
                }
            }
        }
    }
    None
}

/// Reference to an input file by content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self, AmberError> {
        let bytes = std::fs::read(path)?;
        Ok(FileRef {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub command: String,
    pub version: String,
    /// Fully resolved settings; feeding this file back via `--config`
    /// repeats the run.
    pub config: Value,
    pub inputs: Vec<FileRef>,
    /// Hash over command, version, config and input digests.
    pub hash: String,
    /// Output file name → sha256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, config: &T, inputs: Vec<FileRef>) -> Result<Self, AmberError> {
        let config = serde_json::to_value(config)?;
        let version = env!("CARGO_PKG_VERSION").to_string();
        let digests: Vec<&str> = inputs.iter().map(|f| f.sha256.as_str()).collect();
        let key = serde_json::to_string(&(command, &version, &config, &digests))?;
        Ok(Manifest {
            format: MANIFEST_FORMAT.into(),
            command: command.into(),
            version,
            config,
            inputs,
            hash: sha256_hex(key.as_bytes()),
            outputs: BTreeMap::new(),
        })
    }

    pub fn record_output(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.insert(name.into(), sha256_hex(bytes));
    }

    pub fn write(&self, path: &Path) -> Result<(), AmberError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"train": {"lr": 0.01, "epochs": 3}, "grid": true}"#).unwrap();
        let mut flags = Overrides::default();
        flags.set("train.epochs", Some(7usize));
        let s: TrainSettings = resolve(&TrainSettings::default(), Some(&cfg), "train", flags).unwrap();
        assert_eq!(s.train.lr, 0.01);
        assert_eq!(s.train.epochs, 7);
        assert!(s.grid);
        assert_eq!(s.train.batch, 128);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"train": {"learning_rate": 0.01}}"#).unwrap();
        let err = resolve(&TrainSettings::default(), Some(&cfg), "train", Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
    }

    #[test]
    fn manifest_feeds_back_its_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TrainSettings::default();
        s.train.loss.kappa = 8.0;
        s.train.seeds = vec![3, 9];
        let m = Manifest::new("train", &s, vec![]).unwrap();
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        let back: TrainSettings =
            resolve(&TrainSettings::default(), Some(&path), "train", Overrides::default()).unwrap();
        assert_eq!(back, s);
        assert!(resolve(
            &GenSettings {
                synth: SynthConfig::default()
            },
            Some(&path),
            "gen",
            Overrides::default()
        )
        .is_err());
    }
}
