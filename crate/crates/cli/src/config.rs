//! Config file loading. Flags given on the command line win over file
//! values, which win over built-in defaults.

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use matchreg::synth::SynthConfig;
use matchreg::training::{EvalOptions, TrainConfig};

use crate::CliError;

pub const CONFIG_VERSION: u64 = 1;
const SECTIONS: [&str; 3] = ["synth", "train", "eval"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| CliError::usage(format!("{}: {}", path.display(), e.message)))
}

pub fn parse(text: &str) -> Result<FileConfig, CliError> {
    let root: Value = serde_json::from_str(text).map_err(|e| CliError::usage(format!("invalid JSON: {e}")))?;
    let Value::Object(root) = root else {
        return Err(CliError::usage("config must be a JSON object"));
    };
    for key in root.keys() {
        if key != "version" && !SECTIONS.contains(&key.as_str()) {
            return Err(CliError::usage(format!("unknown config key `{key}`")));
        }
    }
    match root.get("version") {
        None => {}
        Some(v) if v.as_u64() == Some(CONFIG_VERSION) => {}
        Some(v) => return Err(CliError::usage(format!("config key `version`: unsupported version {v}"))),
    }
    Ok(FileConfig {
        synth: section(&root, "synth")?,
        train: section(&root, "train")?,
        eval: section(&root, "eval")?,
    })
}

/// Deserializes one section, checking keys one at a time so errors name
/// the offending key.
fn section<T: DeserializeOwned + Default>(root: &Map<String, Value>, name: &str) -> Result<T, CliError> {
    let Some(value) = root.get(name) else {
        return Ok(T::default());
    };
    let Value::Object(obj) = value else {
        return Err(CliError::usage(format!("config key `{name}` must be an object")));
    };
    for (k, v) in obj {
        let mut single = Map::new();
        single.insert(k.clone(), v.clone());
        serde_json::from_value::<T>(Value::Object(single))
            .map_err(|e| CliError::usage(format!("config key `{name}.{k}`: {e}")))?;
    }
    serde_json::from_value(value.clone()).map_err(|e| CliError::usage(format!("config section `{name}`: {e}")))
}

/// Whether `id` was typed on the command line rather than defaulted.
pub fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Copies a flag value over `target` when it was given explicitly.
pub fn set<T: Clone>(m: &ArgMatches, id: &str, flag: &T, target: &mut T) {
    if explicit(m, id) {
        *target = flag.clone();
    }
}
