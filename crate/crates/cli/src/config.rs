//! Flat JSON run configuration: defaults, then a config file, then
//! `--set key=value` overrides.

use std::fs;
use std::path::Path;

use i2v_core::inference::InferenceConfig;
use i2v_core::training::TrainConfig;
use serde_json::{Map, Value};

use crate::CliError;

/// The merged training and inference settings of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    /// The resolved configuration as one flat object.
    pub fn to_json(&self) -> Value {
        let mut obj = object(serde_json::to_value(&self.train).expect("config serializes"));
        for (k, v) in object(serde_json::to_value(&self.inference).expect("config serializes")) {
            obj.insert(k, v);
        }
        Value::Object(obj)
    }
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-scale values: 500×500 patches, batch 2, lr 1e-4.
    Full,
    /// Single-core values: 40×40 patches, batch 4, lr 1e-3.
    Desk,
}

fn defaults(preset: Preset) -> Map<String, Value> {
    let train = match preset {
        Preset::Full => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    };
    let inference = InferenceConfig { seed: train.seed, ..InferenceConfig::default() };
    object(RunConfig { train, inference }.to_json())
}

/// Closest known key, if any is reasonably similar.
pub fn suggest<'a>(key: &str, known: impl IntoIterator<Item = &'a String>) -> Option<&'a str> {
    known
        .into_iter()
        .map(|k| (strsim::jaro_winkler(key, k), k))
        .filter(|(score, _)| *score > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.as_str())
}

fn unknown_key(key: &str, known: &Map<String, Value>) -> CliError {
    let hint = match suggest(key, known.keys()) {
        Some(s) => format!("; did you mean {s:?}?"),
        None => String::new(),
    };
    CliError::Config(format!("unknown config key {key:?}{hint}"))
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Defaults for `preset`, then `file`, then `overrides` (`key=value`).
pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut obj = defaults(preset);
    let known = obj.clone();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = parsed else {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        };
        for (k, v) in map {
            if !known.contains_key(&k) {
                return Err(unknown_key(&k, &known));
            }
            obj.insert(k, v);
        }
    }
    for item in overrides {
        let Some((k, v)) = item.split_once('=') else {
            return Err(CliError::Config(format!("override {item:?} is not key=value")));
        };
        let k = k.trim();
        if !known.contains_key(k) {
            return Err(unknown_key(k, &known));
        }
        obj.insert(k.to_string(), parse_value(v.trim()));
    }
    let train: TrainConfig =
        serde_json::from_value(Value::Object(obj.clone())).map_err(|e| CliError::Config(e.to_string()))?;
    let inference_keys = object(serde_json::to_value(InferenceConfig::default()).expect("config serializes"));
    let inf_obj: Map<String, Value> = obj.into_iter().filter(|(k, _)| inference_keys.contains_key(k)).collect();
    let inference: InferenceConfig =
        serde_json::from_value(Value::Object(inf_obj)).map_err(|e| CliError::Config(e.to_string()))?;
    train.validate()?;
    inference.validate()?;
    Ok(RunConfig { train, inference })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = resolve(Preset::Full, None, &[]).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!((c.inference.p1, c.inference.p2), (0.4, 0.4));
        let c = resolve(Preset::Desk, None, &["p1=0.3".into(), "milestones=[10,20]".into(), "seed=9".into()]).unwrap();
        assert_eq!(c.inference.p1, 0.3);
        assert_eq!(c.train.milestones, vec![10, 20]);
        assert_eq!((c.train.seed, c.inference.seed), (9, 9));
        assert_eq!(c.train.patch, 40);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"lr0": 0.01, "lambda_s": 5}"#).unwrap();
        let c = resolve(Preset::Full, Some(&path), &["lr0=0.02".into()]).unwrap();
        assert_eq!(c.train.lr0, 0.02);
        assert_eq!(c.train.weights.lambda_s, 5.0);
    }

    #[test]
    fn unknown_keys_get_suggestions() {
        let err = resolve(Preset::Full, None, &["lambda_sx=1".into()]).unwrap_err().to_string();
        assert!(err.contains("did you mean \"lambda_s\""), "{err}");
        let err = resolve(Preset::Full, None, &["zzz=1".into()]).unwrap_err().to_string();
        assert!(err.contains("unknown config key") && !err.contains("did you mean"), "{err}");
        assert!(resolve(Preset::Full, None, &["patch=45".into()]).is_err());
    }
}
