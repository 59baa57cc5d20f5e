//! Experiment runners behind the `pcdde-lab` commands. Each runner takes a
//! serde config, optionally writes CSVs and a manifest into an output
//! directory, and returns its numbers together with a [`Report`] of checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Architecture, ArgRole, InitScheme};
use crate::lab::write_json;
use crate::model::{Integrator, ModelKind, ModelSpec};

pub mod annuli;
pub mod fig1;
pub mod gradcheck;
pub mod map;
pub mod population;

/// One named pass/fail outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn default_substeps() -> usize {
    20
}

fn default_width() -> usize {
    10
}

/// Serializable description of one model to build and train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub kind: ModelKind,
    pub tau: f64,
    pub n_intervals: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<Integrator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<Vec<ArgRole>>,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub biases: bool,
    #[serde(default)]
    pub init: InitScheme,
}

impl ModelConfig {
    pub fn new(name: &str, kind: ModelKind, tau: f64, n_intervals: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            tau,
            n_intervals,
            substeps: default_substeps(),
            integrator: None,
            augment_dim: None,
            roles: None,
            width: default_width(),
            biases: false,
            init: InitScheme::XavierUniform,
        }
    }

    pub fn build(&self, data_dim: usize, seed: u64) -> Result<ModelSpec> {
        self.builder(data_dim, self.n_intervals)
            .init(
                &Architecture::two_hidden(self.width).with_biases(self.biases),
                self.init,
                seed,
            )
            .map_err(|e| Error::Config(format!("model {}: {e}", self.name)))
    }

    pub fn builder(&self, data_dim: usize, n_intervals: usize) -> crate::model::ModelBuilder {
        let mut b = ModelSpec::builder(self.kind, data_dim)
            .tau(self.tau)
            .intervals(n_intervals)
            .substeps(self.substeps);
        if let Some(i) = self.integrator {
            b = b.integrator(i);
        }
        if let Some(a) = self.augment_dim {
            b = b.augment(a);
        }
        if let Some(r) = &self.roles {
            b = b.roles(r.clone());
        }
        b
    }
}

/// The same trained field run over `n_intervals` intervals.
pub fn extend_horizon(spec: &ModelSpec, n_intervals: usize) -> Result<ModelSpec> {
    if spec.kind == ModelKind::Unpcdde {
        return Err(Error::Unsupported("per-interval parameters cannot be extended".into()));
    }
    let mut s = spec.clone();
    s.n_intervals = n_intervals;
    s.validate()?;
    Ok(s)
}

/// `--config` accepts a bare config or a manifest written by a previous run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
}

pub fn write_manifest<T: Serialize>(out: &Path, command: &str, config: &T) -> Result<()> {
    let m = Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(config)?,
    };
    write_json(&out.join("manifest.json"), &m)
}

/// Reads a config document, unwrapping a manifest if given one. Fails with
/// [`Error::Config`] on unreadable or mismatched input.
pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path, command: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let value = match value.as_object() {
        Some(obj) if obj.contains_key("command") && obj.contains_key("config") => {
            let m: Manifest = serde_json::from_value(value.clone())
                .map_err(|e| Error::Config(format!("manifest: {e}")))?;
            if m.command != command {
                return Err(Error::Config(format!(
                    "manifest is for `{}`, not `{command}`",
                    m.command
                )));
            }
            m.config
        }
        _ => value,
    };
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Creates `dir` (and parents) and returns it.
pub(crate) fn ensure_dir(dir: PathBuf) -> Result<PathBuf> {
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn model_config_json() {
        let text = r#"{"name":"m","kind":"npcdde_generic","tau":1.0,"n_intervals":3,
            "roles":["current",{"grid":0}],"biases":true}"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        let spec = cfg.build(1, 0).unwrap();
        assert_eq!(spec.signature.roles, vec![ArgRole::Current, ArgRole::Grid(0)]);
        assert_eq!(spec.substeps, 20);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"name":"m","kind":"node","tau":1,"n_intervals":1,"typo":1}"#).is_err());
    }
}
