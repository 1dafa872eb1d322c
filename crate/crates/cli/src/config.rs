//! Run configuration: built-in defaults, overlaid by an optional TOML file,
//! overlaid by command-line flags. The resolved result is written with every
//! run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    /// Absent means 0, or the generator spec's own seed for `simulate`.
    pub seed: Option<u64>,
    /// Worker threads for the bootstrap and the grid; absent means all cores.
    pub threads: Option<usize>,
    pub data: DataSection,
    pub model: ModelSection,
    pub em: EmSection,
    pub bootstrap: BootstrapSection,
    pub propensity: PropensitySection,
    pub simulate: SimulateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            out: PathBuf::from("out"),
            seed: None,
            threads: None,
            data: DataSection::default(),
            model: ModelSection::default(),
            em: EmSection::default(),
            bootstrap: BootstrapSection::default(),
            propensity: PropensitySection::default(),
            simulate: SimulateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub delimiter: char,
    pub span_label: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            delimiter: ',',
            span_label: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `"free"` or a number.
    pub xi: String,
    pub eta_c: f64,
    /// One value for `fit`, a grid for `sensitivity`. Absent means 0 for
    /// `fit` and the default grid for `sensitivity`.
    pub eta_n: Option<Vec<f64>>,
    /// Fit the model without sensitivity parameters.
    pub base: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            xi: "free".into(),
            eta_c: 0.0,
            eta_n: None,
            base: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for EmSection {
    fn default() -> Self {
        EmSection {
            tol: 1e-8,
            max_iter: 2000,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    /// Replicates for the CATT bootstrap; 0 turns it off.
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropensitySection {
    /// Drop units with score outside `[trim, 1 - trim]` before fitting.
    pub trim: Option<f64>,
    /// Histogram bins for the overlap table.
    pub bins: usize,
    pub ridge: f64,
}

impl Default for PropensitySection {
    fn default() -> Self {
        PropensitySection {
            trim: None,
            bins: 20,
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub spec: Option<PathBuf>,
}

/// Deserializes TOML, reporting the path of the offending field on error.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T, CliError> {
    let de = toml::Deserializer::parse(text).map_err(|e| {
        CliError::Validation(format!("{}: {}", origin.display(), e.message()))
    })?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::Validation(format!(
            "{}: field `{}`: {}",
            origin.display(),
            e.path(),
            e.inner().message()
        ))
    })
}

/// Deserializes JSON, reporting the path of the offending field on error.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::Validation(format!(
            "{}: field `{}`: {}",
            origin.display(),
            e.path(),
            e.inner()
        ))
    })
}

/// Reads a TOML or (by `.json` extension) JSON file into `T`.
pub fn read_structured<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        parse_json(&text, path)
    } else {
        parse_toml(&text, path)
    }
}

/// Parses `"-400,-200,0"` (also accepting U+2212 as the minus sign).
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| {
            let v = v.trim().replace('\u{2212}', "-");
            v.parse::<f64>()
                .map_err(|_| format!("`{v}` is not a number"))
                .and_then(|x| if x.is_finite() { Ok(x) } else { Err(format!("`{v}` is not finite")) })
        })
        .collect()
}
