//! Tabular schema, encoding into the continuous diffusion space and back.
//!
//! Continuous columns are standardized (population convention, divide by n);
//! categorical feature columns become one-hot blocks diffused as ordinary
//! Gaussian dimensions and decoded by argmax. The label, sensitive and
//! domain columns are routed to separate index vectors and never enter the
//! feature matrix.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::{format, vec, vec::Vec};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRole {
    Feature,
    Label,
    Sensitive,
    Domain,
}

/// Fitted standardization statistics of a continuous column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

/// One column of the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub role: FeatureRole,
    /// Categorical only; order is load-bearing, it defines the one-hot layout.
    pub categories: Vec<String>,
    /// Continuous only; present after `fit_encode`.
    pub stats: Option<ColumnStats>,
}

impl FeatureSpec {
    pub fn continuous(name: &str, role: FeatureRole) -> Self {
        Self { name: name.to_string(), kind: FeatureKind::Continuous, role, categories: vec![], stats: None }
    }

    pub fn categorical(name: &str, role: FeatureRole, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Categorical,
            role,
            categories: categories.iter().map(|c| c.to_string()).collect(),
            stats: None,
        }
    }

    fn category_index(&self, value: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == value)
    }
}

/// Ordered column schema plus encoder statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSchema {
    pub features: Vec<FeatureSpec>,
}

impl TabularSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let schema = Self { features };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for role in [FeatureRole::Label, FeatureRole::Sensitive, FeatureRole::Domain] {
            let n = self.features.iter().filter(|f| f.role == role).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "schema needs exactly one {role:?} column, found {n}"
                )));
            }
        }
        let mut names: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate column names in schema".into()));
        }
        for f in &self.features {
            match f.kind {
                FeatureKind::Categorical => {
                    if f.categories.is_empty() {
                        return Err(Error::Config(format!("column '{}' has no categories", f.name)));
                    }
                    let mut cats: Vec<&str> = f.categories.iter().map(|c| c.as_str()).collect();
                    cats.sort_unstable();
                    if cats.windows(2).any(|w| w[0] == w[1]) {
                        return Err(Error::Config(format!("duplicate categories in '{}'", f.name)));
                    }
                }
                FeatureKind::Continuous => {
                    if f.role != FeatureRole::Feature {
                        return Err(Error::Config(format!(
                            "column '{}': label/sensitive/domain columns must be categorical",
                            f.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn role_feature(&self, role: FeatureRole) -> &FeatureSpec {
        self.features.iter().find(|f| f.role == role).unwrap()
    }

    pub fn label(&self) -> &FeatureSpec {
        self.role_feature(FeatureRole::Label)
    }

    pub fn sensitive(&self) -> &FeatureSpec {
        self.role_feature(FeatureRole::Sensitive)
    }

    pub fn domain(&self) -> &FeatureSpec {
        self.role_feature(FeatureRole::Domain)
    }

    pub fn feature_columns(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.features.iter().filter(|f| f.role == FeatureRole::Feature)
    }

    /// Width of the encoded feature space.
    pub fn encoded_width(&self) -> usize {
        self.feature_columns()
            .map(|f| match f.kind {
                FeatureKind::Continuous => 1,
                FeatureKind::Categorical => f.categories.len(),
            })
            .sum()
    }

    /// FNV-1a over the canonical schema description (names, kinds, roles,
    /// category order, fitted stats). Guards against one-hot layout drift
    /// between training and sampling.
    pub fn fingerprint(&self) -> u64 {
        let mut text = String::new();
        for f in &self.features {
            text.push_str(&f.name);
            text.push('|');
            text.push_str(match f.kind {
                FeatureKind::Continuous => "cont",
                FeatureKind::Categorical => "cat",
            });
            text.push('|');
            text.push_str(match f.role {
                FeatureRole::Feature => "feature",
                FeatureRole::Label => "label",
                FeatureRole::Sensitive => "sensitive",
                FeatureRole::Domain => "domain",
            });
            for c in &f.categories {
                text.push('|');
                text.push_str(c);
            }
            if let Some(s) = f.stats {
                text.push_str(&format!("|{:x}|{:x}", s.mean.to_bits(), s.std.to_bits()));
            }
            text.push('\n');
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Validated rows in schema column order, missing-marker rows dropped.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub rows: Vec<Vec<String>>,
    pub dropped: usize,
}

impl RawTable {
    /// Builds a table from parsed CSV records.
    ///
    /// The header must contain exactly the schema's column names (any
    /// order); rows containing the `?` missing marker are dropped and
    /// counted. Unknown categorical values and unparseable numerics are
    /// load errors.
    pub fn from_records<I>(header: &[String], records: I, schema: &TabularSchema) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut col_of = Vec::with_capacity(schema.features.len());
        for f in &schema.features {
            match header.iter().position(|h| h.trim() == f.name) {
                Some(idx) => col_of.push(idx),
                None => {
                    return Err(Error::Config(format!("schema error: column '{}' missing from header", f.name)))
                }
            }
        }
        let extra: Vec<&String> = header
            .iter()
            .filter(|h| !schema.features.iter().any(|f| f.name == h.trim()))
            .collect();
        if !extra.is_empty() {
            return Err(Error::Config(format!("schema error: unexpected columns {extra:?} in header")));
        }

        let mut rows = Vec::new();
        let mut dropped = 0usize;
        'rows: for (line, record) in records.into_iter().enumerate() {
            if record.len() != header.len() {
                return Err(Error::Data(format!(
                    "row {}: expected {} fields, got {}",
                    line + 1,
                    header.len(),
                    record.len()
                )));
            }
            let mut row = Vec::with_capacity(schema.features.len());
            for (f, &ci) in schema.features.iter().zip(&col_of) {
                let value = record[ci].trim();
                if value == "?" {
                    dropped += 1;
                    continue 'rows;
                }
                match f.kind {
                    FeatureKind::Categorical => {
                        if f.category_index(value).is_none() {
                            return Err(Error::Data(format!(
                                "row {}: unknown value '{}' in column '{}'",
                                line + 1,
                                value,
                                f.name
                            )));
                        }
                    }
                    FeatureKind::Continuous => {
                        let v: f64 = value.parse().map_err(|_| {
                            Error::Data(format!(
                                "row {}: cannot parse '{}' in column '{}'",
                                line + 1,
                                value,
                                f.name
                            ))
                        })?;
                        if !v.is_finite() {
                            return Err(Error::Data(format!(
                                "row {}: non-finite value in column '{}'",
                                line + 1,
                                f.name
                            )));
                        }
                    }
                }
                row.push(value.to_string());
            }
            rows.push(row);
        }
        Ok(Self { rows, dropped })
    }
}

/// Encoded dataset: standardized/one-hot feature matrix plus the routed
/// label, sensitive and domain index vectors.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub x: Array2<f32>,
    pub y: Vec<usize>,
    pub z: Vec<usize>,
    pub d: Vec<usize>,
    pub n_label_classes: usize,
    pub n_sensitive_classes: usize,
}

impl EncodedDataset {
    pub fn new(
        x: Array2<f32>,
        y: Vec<usize>,
        z: Vec<usize>,
        d: Vec<usize>,
        n_label_classes: usize,
        n_sensitive_classes: usize,
    ) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n || z.len() != n || d.len() != n {
            return Err(Error::Usage("X, y, z, d row counts differ".into()));
        }
        Ok(Self { x, y, z, d, n_label_classes, n_sensitive_classes })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn width(&self) -> usize {
        self.x.ncols()
    }

    /// Row subset (copies).
    pub fn select(&self, indices: &[usize]) -> EncodedDataset {
        let x = self.x.select(ndarray::Axis(0), indices);
        EncodedDataset {
            x,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            z: indices.iter().map(|&i| self.z[i]).collect(),
            d: indices.iter().map(|&i| self.d[i]).collect(),
            n_label_classes: self.n_label_classes,
            n_sensitive_classes: self.n_sensitive_classes,
        }
    }
}

/// Mapping domain index → row indices; disjoint cover, empty domains omitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainPartition {
    pub groups: BTreeMap<usize, Vec<usize>>,
}

impl DomainPartition {
    pub fn n_domains(&self) -> usize {
        self.groups.len()
    }
}

/// Groups rows by their domain index.
pub fn split_domains(ds: &EncodedDataset) -> Result<DomainPartition> {
    if ds.n() == 0 {
        return Err(Error::Usage("cannot partition an empty dataset".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &dom) in ds.d.iter().enumerate() {
        groups.entry(dom).or_default().push(i);
    }
    Ok(DomainPartition { groups })
}

/// Fits encoder statistics on `raw` and encodes it.
pub fn fit_encode(raw: &RawTable, schema: &TabularSchema) -> Result<(TabularSchema, EncodedDataset)> {
    if raw.rows.len() < 2 {
        return Err(Error::Data(format!("need at least 2 rows to fit, got {}", raw.rows.len())));
    }
    let n = raw.rows.len();
    let mut fitted = schema.clone();
    for (ci, f) in fitted.features.iter_mut().enumerate() {
        if f.kind == FeatureKind::Continuous {
            let values: Vec<f64> = raw.rows.iter().map(|r| r[ci].parse::<f64>().unwrap()).collect();
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = libm::sqrt(var);
            if std <= 0.0 {
                return Err(Error::Data(format!("constant continuous column '{}'", f.name)));
            }
            f.stats = Some(ColumnStats { mean, std });
        }
    }
    let ds = encode(raw, &fitted)?;
    Ok((fitted, ds))
}

/// Encodes rows with an already-fitted schema.
pub fn encode(raw: &RawTable, schema: &TabularSchema) -> Result<EncodedDataset> {
    for f in schema.feature_columns() {
        if f.kind == FeatureKind::Continuous && f.stats.is_none() {
            return Err(Error::Usage(format!("column '{}' has no fitted stats", f.name)));
        }
    }
    let n = raw.rows.len();
    let width = schema.encoded_width();
    let mut x = Array2::zeros((n, width));
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);

    for (ri, row) in raw.rows.iter().enumerate() {
        let mut col = 0usize;
        for (ci, f) in schema.features.iter().enumerate() {
            let value = row[ci].as_str();
            match f.role {
                FeatureRole::Feature => match f.kind {
                    FeatureKind::Continuous => {
                        let s = f.stats.unwrap();
                        let v: f64 = value.parse().unwrap();
                        x[[ri, col]] = ((v - s.mean) / s.std) as f32;
                        col += 1;
                    }
                    FeatureKind::Categorical => {
                        let idx = f.category_index(value).ok_or_else(|| {
                            Error::Data(format!("unknown value '{}' in column '{}'", value, f.name))
                        })?;
                        x[[ri, col + idx]] = 1.0;
                        col += f.categories.len();
                    }
                },
                role => {
                    let idx = f.category_index(value).ok_or_else(|| {
                        Error::Data(format!("unknown value '{}' in column '{}'", value, f.name))
                    })?;
                    match role {
                        FeatureRole::Label => y.push(idx),
                        FeatureRole::Sensitive => z.push(idx),
                        FeatureRole::Domain => d.push(idx),
                        FeatureRole::Feature => unreachable!(),
                    }
                }
            }
        }
    }
    EncodedDataset::new(x, y, z, d, schema.label().categories.len(), schema.sensitive().categories.len())
}

/// Decodes generated samples back to tabular rows.
///
/// Continuous dimensions are de-standardized; one-hot blocks decode by
/// argmax with ties broken toward the lowest index. The output carries the
/// feature columns in schema order plus the label column — no sensitive
/// column, by design the synthetic data does not contain one.
pub fn decode(
    samples: ArrayView2<f32>,
    labels: &[usize],
    schema: &TabularSchema,
) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let width = schema.encoded_width();
    if samples.ncols() != width {
        return Err(Error::Usage(format!(
            "sample width {} does not match encoded width {}",
            samples.ncols(),
            width
        )));
    }
    if samples.nrows() != labels.len() {
        return Err(Error::Usage("label count does not match sample count".into()));
    }
    let label_spec = schema.label();
    let mut header: Vec<String> = schema.feature_columns().map(|f| f.name.clone()).collect();
    header.push(label_spec.name.clone());

    let mut rows = Vec::with_capacity(samples.nrows());
    for (ri, sample) in samples.outer_iter().enumerate() {
        let mut row = Vec::with_capacity(header.len());
        let mut col = 0usize;
        for f in schema.feature_columns() {
            match f.kind {
                FeatureKind::Continuous => {
                    let s = f.stats.ok_or_else(|| {
                        Error::Usage(format!("column '{}' has no fitted stats", f.name))
                    })?;
                    let v = sample[col] as f64 * s.std + s.mean;
                    row.push(format!("{v}"));
                    col += 1;
                }
                FeatureKind::Categorical => {
                    let block = &sample.as_slice().unwrap()[col..col + f.categories.len()];
                    let mut best = 0usize;
                    for (j, &v) in block.iter().enumerate() {
                        if v > block[best] {
                            best = j;
                        }
                    }
                    row.push(f.categories[best].clone());
                    col += f.categories.len();
                }
            }
        }
        let y = labels[ri];
        if y >= label_spec.categories.len() {
            return Err(Error::Usage(format!("label index {y} out of range in row {ri}")));
        }
        row.push(label_spec.categories[y].clone());
        rows.push(row);
    }
    Ok((header, rows))
}
