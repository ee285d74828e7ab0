//! Run configuration: model, training and data settings resolved from
//! defaults, an optional TOML file, and command-line overrides (in that order).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::separator::ModelConfig;
use crate::training::TrainConfig;

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "SEPREFORMER_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Manifests, relative to `root` unless absolute.
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Use at most this many validation mixtures (0 = all).
    pub val_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_manifest: "train.txt".into(),
            val_manifest: "val.txt".into(),
            test_manifest: "test.txt".into(),
            val_limit: 0,
        }
    }
}

impl DataConfig {
    pub fn path(&self, manifest: &std::path::Path) -> PathBuf {
        self.root.join(manifest)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Named model preset the `[model]` table refines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Inputs to [`RunConfig::resolve`].
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    /// Contents of the configuration file.
    pub file: Option<String>,
    /// Preset chosen on the command line; wins over a `preset` key in the file.
    pub preset: Option<String>,
    /// Default data root (from the environment); the file and overrides win.
    pub data_root: Option<PathBuf>,
    /// `dotted.key = value` overrides, applied last.
    pub overrides: Vec<(String, String)>,
}

impl RunConfig {
    /// Merge defaults < file < overrides and validate the result. Unknown
    /// keys at any layer are rejected.
    pub fn resolve(src: &ConfigSources) -> Result<Self> {
        let file: Table = match &src.file {
            Some(text) => text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("config file: {}", e.message())))?,
            None => Table::new(),
        };
        let preset = match (&src.preset, file.get("preset")) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(Value::String(p))) => Some(p.clone()),
            (None, Some(v)) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
            (None, None) => None,
        };
        let mut base = RunConfig {
            model: match &preset {
                Some(p) => ModelConfig::preset(p)?,
                None => ModelConfig::default(),
            },
            ..Default::default()
        };
        if let Some(root) = &src.data_root {
            base.data.root = root.clone();
        }
        let mut merged = Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, file);
        if let Some(p) = preset {
            merged.insert("preset".into(), Value::String(p));
        }
        for (key, raw) in &src.overrides {
            set_path(&mut merged, key, parse_value(raw))?;
        }
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.segment_samples == 0 {
            return Err(Error::Config("train.segment_samples must be positive".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Split `key=value` into an override pair.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key `{key}`")))?;
    let mut t = root;
    for p in parts {
        t = match t.entry(p).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(inner) => inner,
            _ => return Err(Error::Config(format!("`{p}` in `{key}` is not a table"))),
        };
    }
    t.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separator::DecoderMode;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.into(), v.into())
    }

    #[test]
    fn precedence_defaults_file_flags() {
        let src = ConfigSources {
            file: Some("[model]\nf = 48\nheads = 4\n[train]\nmax_epochs = 7\n".into()),
            preset: Some("tiny-desk".into()),
            data_root: Some("/env/root".into()),
            overrides: vec![ov("train.max_epochs", "3"), ov("model.decoder_mode", "late_split")],
        };
        let c = RunConfig::resolve(&src).unwrap();
        let tiny = ModelConfig::preset("tiny-desk").unwrap();
        assert_eq!(c.model.f, 48);
        assert_eq!(c.model.kernel, tiny.kernel);
        assert_eq!(c.model.decoder_mode, DecoderMode::LateSplit);
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.data.root, PathBuf::from("/env/root"));
        assert_eq!(c.preset.as_deref(), Some("tiny-desk"));
    }

    #[test]
    fn file_preset_and_nested_loss() {
        let src = ConfigSources {
            file: Some("preset = \"T\"\n[train.loss]\nalpha0 = 0.2\naux_domain = \"stft_mag\"\n[data]\nroot = \"/d\"\n".into()),
            data_root: Some("/env".into()),
            ..Default::default()
        };
        let c = RunConfig::resolve(&src).unwrap();
        assert_eq!(c.model, ModelConfig::preset("T").unwrap());
        assert_eq!(c.train.loss.alpha0, 0.2);
        assert_eq!(c.data.root, PathBuf::from("/d"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for (file, overrides) in [
            ("[model]\nwidth = 3\n", vec![]),
            ("bogus = 1\n", vec![]),
            ("", vec![ov("train.lr", "0.1")]),
            ("", vec![ov("model.decoder_mode", "sideways")]),
            ("", vec![ov("model.f", "\"wide\"")]),
            ("[model\n", vec![]),
            ("", vec![ov("train.lr0", "-1")]),
        ] {
            let err = RunConfig::resolve(&ConfigSources {
                file: Some(file.into()),
                overrides,
                ..Default::default()
            })
            .unwrap_err();
            assert_eq!(err.kind(), crate::ErrorKind::Config, "{err}");
        }
        assert!(RunConfig::resolve(&ConfigSources {
            preset: Some("XL".into()),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::resolve(&ConfigSources {
            preset: Some("tiny-desk".into()),
            overrides: vec![ov("train.seed", "9")],
            ..Default::default()
        })
        .unwrap();
        let again = RunConfig::resolve(&ConfigSources {
            file: Some(c.to_toml().unwrap()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override(" a.b = 3 ").unwrap(), ov("a.b", "3"));
        assert!(parse_override("nothing").is_err());
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("essd"), Value::String("essd".into()));
        assert_eq!(parse_value("true"), Value::Boolean(true));
    }
}
