//! Schema TOML loading and saving. The on-disk form is a list of
//! `[[column]]` tables; a fitted schema additionally carries the
//! standardization statistics of its continuous columns.

use std::path::Path;

use fairdiff_core::tabular::{ColumnStats, FeatureKind, FeatureRole, FeatureSpec, TabularSchema};
use fairdiff_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
struct ColumnToml {
    name: String,
    kind: String,
    role: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaToml {
    column: Vec<ColumnToml>,
}

fn kind_from_str(s: &str, col: &str) -> Result<FeatureKind> {
    match s {
        "continuous" => Ok(FeatureKind::Continuous),
        "categorical" => Ok(FeatureKind::Categorical),
        other => Err(Error::Config(format!(
            "column '{col}': kind must be 'continuous' or 'categorical', got '{other}'"
        ))),
    }
}

fn role_from_str(s: &str, col: &str) -> Result<FeatureRole> {
    match s {
        "feature" => Ok(FeatureRole::Feature),
        "label" => Ok(FeatureRole::Label),
        "sensitive" => Ok(FeatureRole::Sensitive),
        "domain" => Ok(FeatureRole::Domain),
        other => Err(Error::Config(format!(
            "column '{col}': role must be feature/label/sensitive/domain, got '{other}'"
        ))),
    }
}

pub fn load_schema(path: &Path) -> Result<TabularSchema> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read schema '{}': {e}", path.display())))?;
    let parsed: SchemaToml = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("schema '{}': {e}", path.display())))?;
    let mut features = Vec::with_capacity(parsed.column.len());
    for c in parsed.column {
        let kind = kind_from_str(&c.kind, &c.name)?;
        let role = role_from_str(&c.role, &c.name)?;
        let stats = match (c.mean, c.std) {
            (Some(mean), Some(std)) => Some(ColumnStats { mean, std }),
            (None, None) => None,
            _ => {
                return Err(Error::Config(format!(
                    "column '{}': mean and std must appear together",
                    c.name
                )))
            }
        };
        features.push(FeatureSpec { name: c.name, kind, role, categories: c.categories, stats });
    }
    TabularSchema::new(features)
}

pub fn save_schema(path: &Path, schema: &TabularSchema) -> Result<()> {
    let columns = schema
        .features
        .iter()
        .map(|f| ColumnToml {
            name: f.name.clone(),
            kind: match f.kind {
                FeatureKind::Continuous => "continuous".into(),
                FeatureKind::Categorical => "categorical".into(),
            },
            role: match f.role {
                FeatureRole::Feature => "feature".into(),
                FeatureRole::Label => "label".into(),
                FeatureRole::Sensitive => "sensitive".into(),
                FeatureRole::Domain => "domain".into(),
            },
            categories: f.categories.clone(),
            mean: f.stats.map(|s| s.mean),
            std: f.stats.map(|s| s.std),
        })
        .collect();
    let text = toml::to_string_pretty(&SchemaToml { column: columns })
        .map_err(|e| Error::Config(format!("cannot serialize schema: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| Error::Config(format!("cannot write '{}': {e}", path.display())))
}
