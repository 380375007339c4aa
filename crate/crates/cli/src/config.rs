//! TOML loading with line-referenced diagnostics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rlavr_core::theory::FuzzConfig;
use rlavr_core::{RunConfig, Strategy};

use crate::CliError;

/// A parsed config file plus the source text, kept for locating fields.
pub struct Loaded<T> {
    pub value: T,
    pub path: PathBuf,
    text: String,
}

impl<T> Loaded<T> {
    /// Turns a core validation error into a message pointing at the offending line.
    pub fn explain(&self, err: rlavr_core::Error, prefix: &str) -> CliError {
        match err {
            rlavr_core::Error::Config { field, reason } => {
                let full = if prefix.is_empty() { field.clone() } else { format!("{prefix}.{field}") };
                let at = match find_key_line(&self.text, &full) {
                    Some(line) => format!("{}:{line}", self.path.display()),
                    None => format!("{} (default value)", self.path.display()),
                };
                CliError::Validation(format!("{at}: invalid value for `{full}`: {reason}"))
            }
            other => CliError::Validation(format!("{}: {other}", self.path.display())),
        }
    }

    /// Validation failure for a field this crate checks itself.
    pub fn field_error(&self, field: &str, reason: impl std::fmt::Display) -> CliError {
        let at = match find_key_line(&self.text, field) {
            Some(line) => format!("{}:{line}", self.path.display()),
            None => self.path.display().to_string(),
        };
        CliError::Validation(format!("{at}: invalid value for `{field}`: {reason}"))
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let value = toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        let at = match line {
            Some(l) => format!("{}:{l}", path.display()),
            None => path.display().to_string(),
        };
        CliError::Validation(format!("{at}: {}", e.message().trim()))
    })?;
    Ok(Loaded {
        value,
        path: path.to_path_buf(),
        text,
    })
}

/// 1-based line of a dotted key such as `env.train_size`, honouring `[table]`
/// headers and inline dotted keys.
pub fn find_key_line(text: &str, dotted: &str) -> Option<usize> {
    let mut table = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.starts_with('[') {
            table = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        let Some((key, _)) = line.split_once('=') else { continue };
        let key: String = key.split('.').map(|k| k.trim().trim_matches('"')).collect::<Vec<_>>().join(".");
        let full = if table.is_empty() { key } else { format!("{table}.{key}") };
        if full == dotted {
            return Some(i + 1);
        }
    }
    None
}

/// `compare` input: one base config replicated over strategies and seeds.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareFile {
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub base: RunConfig,
}

/// Values swept over; every listed axis must be non-empty.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Axes {
    pub p: Option<Vec<f64>>,
    pub p2: Option<Vec<f64>>,
    pub strategy: Option<Vec<Strategy>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFile {
    pub seeds: Vec<u64>,
    pub axes: Axes,
    pub base: RunConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryFile {
    pub seed: u64,
    pub theory: FuzzConfig,
}

/// One grid point of a sweep, with the axis values that produced it.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub coords: BTreeMap<&'static str, String>,
    pub config: RunConfig,
}

impl GridPoint {
    pub fn label(&self) -> String {
        self.coords
            .iter()
            .map(|(k, v)| format!("{k}-{v}"))
            .collect::<Vec<_>>()
            .join("_")
    }
}

impl Loaded<SweepFile> {
    pub fn grid(&self) -> Result<Vec<GridPoint>, CliError> {
        let axes = &self.value.axes;
        let check = |name: &str, len: Option<usize>| match len {
            Some(0) => Err(self.field_error(&format!("axes.{name}"), "axis is empty")),
            _ => Ok(()),
        };
        check("p", axes.p.as_ref().map(Vec::len))?;
        check("p2", axes.p2.as_ref().map(Vec::len))?;
        check("strategy", axes.strategy.as_ref().map(Vec::len))?;
        if axes.p.is_none() && axes.p2.is_none() && axes.strategy.is_none() {
            return Err(self.field_error("axes", "declare at least one of p, p2, strategy"));
        }

        let mut points = vec![GridPoint {
            coords: BTreeMap::new(),
            config: self.value.base.clone(),
        }];
        if let Some(values) = &axes.strategy {
            points = expand(points, values, "strategy", |c, v| c.strategy = *v, |v| v.to_string());
        }
        if let Some(values) = &axes.p {
            points = expand(points, values, "p", |c, v| c.p = *v, |v| v.to_string());
        }
        if let Some(values) = &axes.p2 {
            points = expand(points, values, "p2", |c, v| c.p2 = *v, |v| v.to_string());
        }
        Ok(points)
    }
}

fn expand<V>(
    points: Vec<GridPoint>,
    values: &[V],
    name: &'static str,
    set: impl Fn(&mut RunConfig, &V),
    show: impl Fn(&V) -> String,
) -> Vec<GridPoint> {
    let (set, show) = (&set, &show);
    points
        .into_iter()
        .flat_map(|pt| {
            values.iter().map(move |v| {
                let mut next = pt.clone();
                set(&mut next.config, v);
                next.coords.insert(name, show(v));
                next
            })
        })
        .collect::<Vec<_>>()
}
