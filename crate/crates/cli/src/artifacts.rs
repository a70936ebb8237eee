//! On-disk artifacts: the encoded dataset cache, model checkpoints, the
//! loss-history CSV and synthetic-data re-encoding for evaluation.
//!
//! Everything written here is deterministic given identical inputs, so a
//! rerun reproduces byte-identical files (sample sidecars carry the only
//! timestamp and are written elsewhere).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use fairdiff_core::meta::TrainState;
use fairdiff_core::nn::{Activation, Layer, MlpParams, MlpSpec, OptimizerState, OutputHead};
use fairdiff_core::tabular::{EncodedDataset, FeatureKind, TabularSchema};
use fairdiff_core::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub const CACHE_FILE: &str = "encoded.csv";
pub const FITTED_SCHEMA_FILE: &str = "schema_fitted.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOSS_FILE: &str = "loss_history.csv";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("'{}': {e}", path.display()))
}

// ------------------------------------------------------------------ cache

/// Writes the encoded dataset as CSV: label, sensitive and domain indices
/// followed by the encoded feature columns. f32 values use the shortest
/// round-trip decimal form, so reading the cache back is exact.
pub fn write_cache(dir: &Path, ds: &EncodedDataset) -> Result<()> {
    let path = dir.join(CACHE_FILE);
    let mut out = String::new();
    out.push_str("y,z,d");
    for j in 0..ds.width() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..ds.n() {
        out.push_str(&format!("{},{},{}", ds.y[i], ds.z[i], ds.d[i]));
        for j in 0..ds.width() {
            out.push_str(&format!(",{}", ds.x[[i, j]]));
        }
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(|e| io_err(&path, e))
}

/// Reads the cache back; class counts come from the fitted schema.
pub fn read_cache(dir: &Path, schema: &TabularSchema) -> Result<EncodedDataset> {
    let path = dir.join(CACHE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!("'{}': {e} (run `fairdiff prepare` first)", path.display()))
    })?;
    let width = schema.encoded_width();
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let expect_cols = 3 + width;
    if header.split(',').count() != expect_cols {
        return Err(Error::Data(format!(
            "cache '{}' does not match the fitted schema (expected {} columns)",
            path.display(),
            expect_cols
        )));
    }
    let (mut y, mut z, mut d) = (Vec::new(), Vec::new(), Vec::new());
    let mut values: Vec<f32> = Vec::new();
    for (ln, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let mut next_idx = |what: &str| -> Result<usize> {
            fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("cache row {}: bad {what}", ln + 1)))
        };
        y.push(next_idx("label index")?);
        z.push(next_idx("sensitive index")?);
        d.push(next_idx("domain index")?);
        for _ in 0..width {
            let v: f32 = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("cache row {}: bad feature value", ln + 1)))?;
            values.push(v);
        }
        if fields.next().is_some() {
            return Err(Error::Data(format!("cache row {}: too many fields", ln + 1)));
        }
    }
    let n = y.len();
    let x = Array2::from_shape_vec((n, width), values)
        .map_err(|e| Error::Data(format!("cache shape: {e}")))?;
    EncodedDataset::new(
        x,
        y,
        z,
        d,
        schema.label().categories.len(),
        schema.sensitive().categories.len(),
    )
}

// ------------------------------------------------------------- checkpoints

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    layer_widths: Vec<usize>,
    activation: String,
    head: String,
    learning_rate: f32,
    step_count: u64,
    has_moments: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    iteration: u64,
    seed: u64,
    /// Hex fingerprint of the fitted schema the models were trained against.
    schema_fingerprint: String,
    adam: bool,
    score: ModelManifest,
    label: ModelManifest,
    sensitive: ModelManifest,
}

fn head_str(h: OutputHead) -> &'static str {
    match h {
        OutputHead::Linear => "linear",
        OutputHead::LogSoftmax => "logsoftmax",
    }
}

fn write_tensors(path: &Path, params: &MlpParams) -> Result<()> {
    let mut bytes = Vec::new();
    for layer in &params.layers {
        for &v in layer.w.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &v in layer.b.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_tensors(path: &Path, spec: &MlpSpec) -> Result<MlpParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let mut layers = Vec::new();
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<Vec<f32>> {
        let need = n * 4;
        if pos + need > bytes.len() {
            return Err(Error::Data(format!("checkpoint '{}' is truncated", path.display())));
        }
        let vals = bytes[pos..pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        pos += need;
        Ok(vals)
    };
    for w in spec.layer_widths.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let wv = take(n_out * n_in)?;
        let bv = take(n_out)?;
        layers.push(Layer {
            w: Array2::from_shape_vec((n_out, n_in), wv).unwrap(),
            b: Array1::from_vec(bv),
        });
    }
    if pos != bytes.len() {
        return Err(Error::Data(format!("checkpoint '{}' has trailing bytes", path.display())));
    }
    Ok(MlpParams { spec: spec.clone(), layers })
}

fn model_manifest(params: &MlpParams, opt: &OptimizerState) -> ModelManifest {
    ModelManifest {
        layer_widths: params.spec.layer_widths.clone(),
        activation: match params.spec.activation {
            Activation::Relu => "relu".into(),
            Activation::Tanh => "tanh".into(),
        },
        head: head_str(params.spec.output_head).into(),
        learning_rate: opt.learning_rate,
        step_count: opt.step_count,
        has_moments: opt.moments().is_some(),
    }
}

fn save_model(dir: &Path, name: &str, params: &MlpParams, opt: &OptimizerState) -> Result<()> {
    write_tensors(&dir.join(format!("{name}.bin")), params)?;
    if let Some((m, v)) = opt.moments() {
        write_tensors(&dir.join(format!("{name}.m.bin")), m)?;
        write_tensors(&dir.join(format!("{name}.v.bin")), v)?;
    }
    Ok(())
}

/// Writes the full training state (parameters, optimizer moments, progress)
/// under `dir/checkpoints/`.
pub fn save_state(out_dir: &Path, state: &TrainState, seed: u64, fingerprint: u64, adam: bool) -> Result<()> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let manifest = Manifest {
        format: 1,
        iteration: state.iteration,
        seed,
        schema_fingerprint: format!("{fingerprint:016x}"),
        adam,
        score: model_manifest(&state.score, &state.opt_score),
        label: model_manifest(&state.label, &state.opt_label),
        sensitive: model_manifest(&state.sens, &state.opt_sens),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
    std::fs::write(dir.join("manifest.toml"), text).map_err(|e| io_err(&dir, e))?;
    save_model(&dir, "score", &state.score, &state.opt_score)?;
    save_model(&dir, "label", &state.label, &state.opt_label)?;
    save_model(&dir, "sensitive", &state.sens, &state.opt_sens)
}

fn load_model(dir: &Path, name: &str, mm: &ModelManifest, adam: bool) -> Result<(MlpParams, OptimizerState)> {
    let activation = match mm.activation.as_str() {
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        other => return Err(Error::Data(format!("unknown activation '{other}' in manifest"))),
    };
    let head = match mm.head.as_str() {
        "linear" => OutputHead::Linear,
        "logsoftmax" => OutputHead::LogSoftmax,
        other => return Err(Error::Data(format!("unknown head '{other}' in manifest"))),
    };
    let spec = MlpSpec::new(mm.layer_widths.clone(), activation, head)?;
    let params = read_tensors(&dir.join(format!("{name}.bin")), &spec)?;
    let mut opt = if adam {
        OptimizerState::adam(mm.learning_rate)
    } else {
        OptimizerState::sgd(mm.learning_rate)
    };
    opt.step_count = mm.step_count;
    if mm.has_moments {
        let m = read_tensors(&dir.join(format!("{name}.m.bin")), &spec)?;
        let v = read_tensors(&dir.join(format!("{name}.v.bin")), &spec)?;
        opt.set_moments(m, v);
    }
    Ok((params, opt))
}

pub struct LoadedState {
    pub state: TrainState,
    pub seed: u64,
}

/// Reads a checkpoint back; `expected_fingerprint` guards against sampling
/// with a schema that differs from the one the models were trained on.
pub fn load_state(out_dir: &Path, expected_fingerprint: Option<u64>) -> Result<LoadedState> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    let path = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!("'{}': {e} (run `fairdiff train` first)", path.display()))
    })?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| Error::Data(format!("manifest '{}': {e}", path.display())))?;
    if manifest.format != 1 {
        return Err(Error::Data(format!("unsupported checkpoint format {}", manifest.format)));
    }
    let fingerprint = u64::from_str_radix(&manifest.schema_fingerprint, 16)
        .map_err(|_| Error::Data("bad schema fingerprint in manifest".into()))?;
    if let Some(expect) = expected_fingerprint {
        if expect != fingerprint {
            return Err(Error::Config(format!(
                "schema fingerprint mismatch: checkpoint was trained against {:016x}, \
                 current fitted schema is {:016x}",
                fingerprint, expect
            )));
        }
    }
    let (score, opt_score) = load_model(&dir, "score", &manifest.score, manifest.adam)?;
    let (label, opt_label) = load_model(&dir, "label", &manifest.label, manifest.adam)?;
    let (sens, opt_sens) = load_model(&dir, "sensitive", &manifest.sensitive, manifest.adam)?;
    Ok(LoadedState {
        state: TrainState {
            score,
            label,
            sens,
            opt_score,
            opt_label,
            opt_sens,
            iteration: manifest.iteration,
        },
        seed: manifest.seed,
    })
}

/// Paths of the three parameter tensor files (for sidecar hashing).
pub fn tensor_paths(out_dir: &Path) -> [PathBuf; 3] {
    let dir = out_dir.join(CHECKPOINT_DIR);
    [dir.join("score.bin"), dir.join("label.bin"), dir.join("sensitive.bin")]
}

// ------------------------------------------------------------ loss history

pub fn write_loss_history(
    out_dir: &Path,
    records: &[fairdiff_core::meta::LossRecord],
    append: bool,
) -> Result<()> {
    let path = out_dir.join(LOSS_FILE);
    let mut text = String::new();
    if !append || !path.exists() {
        text.push_str("iteration,model,loss_in,loss_out\n");
    }
    for r in records {
        text.push_str(&format!("{},{},{},{}\n", r.iteration, r.model.as_str(), r.loss_in, r.loss_out));
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| io_err(&path, e))
}

// ------------------------------------------------------- synthetic re-read

/// Re-encodes a decoded synthetic CSV (feature columns + label column) with
/// the fitted schema, for downstream training.
pub fn encode_synthetic(
    schema: &TabularSchema,
    header: &[String],
    rows: &[Vec<String>],
) -> Result<(Array2<f32>, Vec<usize>)> {
    let mut col_of = Vec::new();
    for f in schema.feature_columns() {
        let idx = header
            .iter()
            .position(|h| h.trim() == f.name)
            .ok_or_else(|| Error::Data(format!("synthetic CSV is missing column '{}'", f.name)))?;
        col_of.push((f, idx));
    }
    let label_spec = schema.label();
    let label_col = header
        .iter()
        .position(|h| h.trim() == label_spec.name)
        .ok_or_else(|| Error::Data(format!("synthetic CSV is missing label column '{}'", label_spec.name)))?;

    let width = schema.encoded_width();
    let mut x = Array2::zeros((rows.len(), width));
    let mut y = Vec::with_capacity(rows.len());
    for (ri, row) in rows.iter().enumerate() {
        let mut col = 0usize;
        for (f, ci) in &col_of {
            let value = row
                .get(*ci)
                .map(|s| s.trim())
                .ok_or_else(|| Error::Data(format!("synthetic row {}: too few fields", ri + 1)))?;
            match f.kind {
                FeatureKind::Continuous => {
                    let s = f.stats.ok_or_else(|| {
                        Error::Usage(format!("column '{}' has no fitted stats", f.name))
                    })?;
                    let v: f64 = value.parse().map_err(|_| {
                        Error::Data(format!("synthetic row {}: bad number '{}'", ri + 1, value))
                    })?;
                    x[[ri, col]] = ((v - s.mean) / s.std) as f32;
                    col += 1;
                }
                FeatureKind::Categorical => {
                    let idx = f.categories.iter().position(|c| c == value).ok_or_else(|| {
                        Error::Data(format!(
                            "synthetic row {}: unknown value '{}' in column '{}'",
                            ri + 1,
                            value,
                            f.name
                        ))
                    })?;
                    x[[ri, col + idx]] = 1.0;
                    col += f.categories.len();
                }
            }
        }
        let value = row
            .get(label_col)
            .map(|s| s.trim())
            .ok_or_else(|| Error::Data(format!("synthetic row {}: too few fields", ri + 1)))?;
        let yi = label_spec.categories.iter().position(|c| c == value).ok_or_else(|| {
            Error::Data(format!("synthetic row {}: unknown label '{}'", ri + 1, value))
        })?;
        y.push(yi);
    }
    Ok((x, y))
}

// ------------------------------------------------------------------ hashes

pub fn sha256_hex(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fairdiff_core::pipeline::{self, PipelineParams};
    use fairdiff_core::tabular::{FeatureRole, FeatureSpec};

    fn tiny_schema() -> TabularSchema {
        TabularSchema::new(vec![
            FeatureSpec {
                name: "a".into(),
                kind: FeatureKind::Continuous,
                role: FeatureRole::Feature,
                categories: vec![],
                stats: Some(fairdiff_core::tabular::ColumnStats { mean: 0.0, std: 1.0 }),
            },
            FeatureSpec::categorical("y", FeatureRole::Label, &["n", "p"]),
            FeatureSpec::categorical("z", FeatureRole::Sensitive, &["u", "v"]),
            FeatureSpec::categorical("d", FeatureRole::Domain, &["d0", "d1"]),
        ])
        .unwrap()
    }

    #[test]
    fn cache_roundtrip_is_exact() {
        let schema = tiny_schema();
        let x = ndarray::array![[0.125f32], [-3.75], [1.0e-7]];
        let ds = EncodedDataset::new(x, vec![0, 1, 0], vec![1, 0, 1], vec![0, 1, 0], 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cache(dir.path(), &ds).unwrap();
        let back = read_cache(dir.path(), &schema).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.z, ds.z);
        assert_eq!(back.d, ds.d);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_state() {
        let params = PipelineParams {
            nets: pipeline::NetworkSizes { score_hidden: vec![8], classifier_hidden: vec![4] },
            adam_outer: true,
            ..Default::default()
        };
        let mut state = pipeline::build_state(3, 2, 2, &params, 9).unwrap();
        state.iteration = 17;
        // accumulate adam moments so the roundtrip covers them
        let grads = state.score.clone();
        state.opt_score.step(&mut state.score.clone(), &grads).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_state(dir.path(), &state, 9, 0xABCD, true).unwrap();
        let loaded = load_state(dir.path(), Some(0xABCD)).unwrap();
        assert_eq!(loaded.state.score, state.score);
        assert_eq!(loaded.state.label, state.label);
        assert_eq!(loaded.state.sens, state.sens);
        assert_eq!(loaded.state.iteration, 17);
        assert_eq!(loaded.seed, 9);
        assert!(load_state(dir.path(), Some(0x1234)).is_err());
    }

    #[test]
    fn synthetic_encoding_matches_real_encoding() {
        let schema = tiny_schema();
        let header: Vec<String> = vec!["a".into(), "y".into()];
        let rows = vec![vec!["2.0".to_string(), "p".to_string()]];
        let (x, y) = encode_synthetic(&schema, &header, &rows).unwrap();
        assert_eq!(x[[0, 0]], 2.0);
        assert_eq!(y, vec![1]);
    }
}
