//! Config files: TOML written by hand, or the `manifest.json` of an earlier
//! run of the same command.

use std::path::{Path, PathBuf};

use longiseg::synthgen::SynthConfig;
use longiseg::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError, Result};
use crate::manifest::RunManifest;

/// Resolved configuration of a training run, as stored in its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub train: TrainConfig,
    /// Checkpoint the run continued from.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

/// A training config file: the trainer fields plus an optional dataset path,
/// resolved relative to the file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
}

fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            CliError::config(format!("config {} does not exist", path.display()))
        }
        _ => io_error(path)(e),
    })
}

fn bad(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::config(format!("{}: {e}", path.display()))
}

/// The `config` section of a manifest written by `command`.
fn manifest_config<T: DeserializeOwned>(path: &Path, command: &str) -> Result<T> {
    let m = RunManifest::load(path)?;
    if m.command != command {
        return Err(bad(
            path,
            format!("manifest is from `{}`, expected `{command}`", m.command),
        ));
    }
    serde_json::from_value(m.config).map_err(|e| bad(path, e))
}

pub fn load_synth_config(path: &Path) -> Result<SynthConfig> {
    if is_json(path) {
        return manifest_config(path, "generate");
    }
    toml::from_str(&read(path)?).map_err(|e| bad(path, e))
}

pub fn load_train_file(path: &Path) -> Result<TrainFile> {
    if is_json(path) {
        let run: TrainRunConfig = manifest_config(path, "train")?;
        return Ok(TrainFile {
            train: run.train,
            data: Some(run.data),
        });
    }
    let mut table: toml::Table = toml::from_str(&read(path)?).map_err(|e| bad(path, e))?;
    let data = match table.remove("data") {
        None => None,
        Some(toml::Value::String(s)) => {
            let p = PathBuf::from(s);
            let base = path.parent().unwrap_or(Path::new("."));
            Some(if p.is_absolute() { p } else { base.join(p) })
        }
        Some(other) => {
            return Err(bad(
                path,
                format!("`data` must be a path string, got {other}"),
            ))
        }
    };
    let train: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| bad(path, e))?;
    Ok(TrainFile { train, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use longiseg::nets::ModelVariant;

    #[test]
    fn train_toml_with_data_path() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("train.toml");
        std::fs::write(
            &path,
            "data = \"ds\"\nvariant = \"static\"\nlearning_rate = 0.001\n[backbone]\nfirst_conv_channels = 8\n",
        )
        .unwrap();
        let f = load_train_file(&path).unwrap();
        assert_eq!(f.data, Some(tmp.path().join("ds")));
        assert_eq!(f.train.variant, ModelVariant::Static);
        assert_eq!(f.train.learning_rate, 1e-3);
        assert_eq!(f.train.backbone.first_conv_channels, 8);
    }

    #[test]
    fn unknown_train_field_is_a_config_error_naming_it() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("train.toml");
        std::fs::write(&path, "learning_rat = 0.1\n").unwrap();
        let err = load_train_file(&path).unwrap_err();
        assert_eq!(err.exit_code(), crate::EXIT_CONFIG);
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn manifest_round_trip_and_command_check() {
        let tmp = tempfile::tempdir().unwrap();
        let run = TrainRunConfig {
            data: PathBuf::from("/data"),
            train: TrainConfig::default(),
            resume: None,
        };
        RunManifest::start("train", serde_json::to_value(&run).unwrap(), Some(0))
            .write(tmp.path())
            .unwrap();
        let path = tmp.path().join(crate::manifest::MANIFEST_FILE);
        let f = load_train_file(&path).unwrap();
        assert_eq!(f.train, run.train);
        assert_eq!(f.data, Some(run.data));
        assert!(load_synth_config(&path).is_err());
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let err = load_synth_config(Path::new("/nonexistent/gen.toml")).unwrap_err();
        assert_eq!(err.exit_code(), crate::EXIT_CONFIG);
    }
}
