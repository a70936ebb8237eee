//! Subcommand implementations.

use std::path::{Path, PathBuf};

use fairdiff_core::fairness::{self, FairnessReport};
use fairdiff_core::guidance::GuidanceWeights;
use fairdiff_core::pipeline::{self, PipelineParams};
use fairdiff_core::tabular::{self, split_domains, EncodedDataset, RawTable, TabularSchema};
use fairdiff_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts;
use crate::config::{parse_label_policy, PipelineConfig};
use crate::schema_io;

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot read '{}': {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("'{}': {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("'{}': {e}", path.display())))?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    Ok((header, rows))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::Config(format!("cannot write '{}': {e}", path.display())))
}

fn load_prepared(cfg: &PipelineConfig) -> Result<(TabularSchema, EncodedDataset)> {
    let schema_path = cfg.output_dir.join(artifacts::FITTED_SCHEMA_FILE);
    if !schema_path.exists() {
        return Err(Error::Config(format!(
            "'{}' not found — run `fairdiff prepare` first",
            schema_path.display()
        )));
    }
    let schema = schema_io::load_schema(&schema_path)?;
    let ds = artifacts::read_cache(&cfg.output_dir, &schema)?;
    Ok((schema, ds))
}

// ---------------------------------------------------------------- prepare

pub fn prepare(cfg: &PipelineConfig) -> Result<()> {
    let schema = schema_io::load_schema(&cfg.schema)?;
    let (header, records) = read_csv(&cfg.data)?;
    let raw = RawTable::from_records(&header, records, &schema)?;
    let dropped = raw.dropped;
    let (fitted, ds) = tabular::fit_encode(&raw, &schema)?;

    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::Config(format!("cannot create '{}': {e}", cfg.output_dir.display())))?;
    schema_io::save_schema(&cfg.output_dir.join(artifacts::FITTED_SCHEMA_FILE), &fitted)?;
    artifacts::write_cache(&cfg.output_dir, &ds)?;

    println!(
        "prepared {} rows ({} dropped) into {}",
        ds.n(),
        dropped,
        cfg.output_dir.display()
    );
    let part = split_domains(&ds)?;
    let names = &fitted.domain().categories;
    for (&dom, rows) in &part.groups {
        let name = names.get(dom).map(|s| s.as_str()).unwrap_or("?");
        println!("domain {name}: {} rows", rows.len());
    }
    Ok(())
}

// ------------------------------------------------------------------ train

pub fn train(cfg: &PipelineConfig, iterations: Option<u64>, resume: bool) -> Result<()> {
    let (schema, ds) = load_prepared(cfg)?;
    let fingerprint = schema.fingerprint();
    let part = split_domains(&ds)?;
    let mut params = cfg.params()?;
    if let Some(n) = iterations {
        params.fit.iterations = n;
    }

    let seed = cfg.seed;
    let adam = params.adam_outer;
    let out_dir = cfg.output_dir.clone();
    let on_checkpoint =
        |state: &fairdiff_core::meta::TrainState| artifacts::save_state(&out_dir, state, seed, fingerprint, adam);

    let manifest_exists = cfg
        .output_dir
        .join(artifacts::CHECKPOINT_DIR)
        .join("manifest.toml")
        .exists();
    let (state, history, appended) = if resume && manifest_exists {
        let loaded = artifacts::load_state(&cfg.output_dir, Some(fingerprint))?;
        let mut state = loaded.state;
        if state.iteration >= params.fit.iterations {
            println!(
                "checkpoint already at iteration {} (target {}), nothing to do",
                state.iteration, params.fit.iterations
            );
            return Ok(());
        }
        let history =
            pipeline::resume_training(&ds, &part, &params, loaded.seed, &mut state, on_checkpoint)?;
        (state, history, true)
    } else {
        let (state, history) = pipeline::train_models(&ds, &part, &params, seed, on_checkpoint)?;
        (state, history, false)
    };
    artifacts::write_loss_history(&cfg.output_dir, &history, appended)?;
    println!(
        "trained to iteration {}; checkpoints in {}",
        state.iteration,
        cfg.output_dir.join(artifacts::CHECKPOINT_DIR).display()
    );
    Ok(())
}

// ----------------------------------------------------------------- sample

pub struct SampleFlags {
    pub num_samples: Option<usize>,
    pub lambda_y: Option<f32>,
    pub lambda_z: Option<f32>,
    pub steps: Option<usize>,
    pub label_policy: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CheckpointHashes {
    score: String,
    label: String,
    sensitive: String,
}

#[derive(Serialize)]
struct SampleSidecar {
    command: &'static str,
    num_samples: usize,
    lambda_y: f32,
    lambda_z: f32,
    steps: usize,
    label_policy: String,
    seed: u64,
    schema_fingerprint: String,
    timestamp_unix: u64,
    checkpoint_hashes: CheckpointHashes,
}

pub fn sample(cfg: &PipelineConfig, flags: SampleFlags) -> Result<()> {
    let (schema, ds) = load_prepared(cfg)?;
    let fingerprint = schema.fingerprint();
    let loaded = artifacts::load_state(&cfg.output_dir, Some(fingerprint))?;

    let mut params = cfg.params()?;
    if let Some(n) = flags.num_samples {
        params.n_samples = n;
    }
    let lambda_y = flags.lambda_y.unwrap_or(cfg.guidance.lambda_y);
    let lambda_z = flags.lambda_z.unwrap_or(cfg.guidance.lambda_z);
    params.weights = GuidanceWeights::new(lambda_y, lambda_z)?;
    if let Some(s) = flags.steps {
        params.sched.n_steps = s;
    }
    let policy_text = flags
        .label_policy
        .clone()
        .unwrap_or_else(|| cfg.sampling.label_policy.clone());
    params.label_policy = parse_label_policy(&policy_text)?;
    let seed = flags.seed.unwrap_or(cfg.seed);

    let (x, labels) = pipeline::synthesize(&loaded.state, &ds, &params, seed)?;
    let (header, rows) = tabular::decode(x.view(), &labels, &schema)?;
    let out = flags
        .out
        .unwrap_or_else(|| cfg.output_dir.join("synthetic.csv"));
    write_csv(&out, &header, &rows)?;

    let [p_score, p_label, p_sens] = artifacts::tensor_paths(&cfg.output_dir);
    let sidecar = SampleSidecar {
        command: "sample",
        num_samples: params.n_samples,
        lambda_y,
        lambda_z,
        steps: params.sched.n_steps,
        label_policy: policy_text,
        seed,
        schema_fingerprint: format!("{fingerprint:016x}"),
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        checkpoint_hashes: CheckpointHashes {
            score: artifacts::sha256_hex(&p_score)?,
            label: artifacts::sha256_hex(&p_label)?,
            sensitive: artifacts::sha256_hex(&p_sens)?,
        },
    };
    let sidecar_path = sidecar_path_for(&out);
    let text = toml::to_string_pretty(&sidecar)
        .map_err(|e| Error::Config(format!("cannot serialize sidecar: {e}")))?;
    std::fs::write(&sidecar_path, text)
        .map_err(|e| Error::Config(format!("cannot write '{}': {e}", sidecar_path.display())))?;
    println!("wrote {} samples to {} (sidecar {})", rows.len(), out.display(), sidecar_path.display());
    Ok(())
}

fn sidecar_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".meta.toml");
    out.with_file_name(name)
}

// --------------------------------------------------------------- evaluate

pub fn evaluate(
    cfg: &PipelineConfig,
    syn: &Path,
    target_domain: Option<&str>,
    all_domains: bool,
) -> Result<()> {
    let (schema, ds) = load_prepared(cfg)?;
    let (header, rows) = read_csv(syn)?;
    let (syn_x, syn_y) = artifacts::encode_synthetic(&schema, &header, &rows)?;
    let net = fairness::train_downstream(
        syn_x.view(),
        &syn_y,
        ds.n_label_classes,
        &cfg.downstream(),
        cfg.seed,
    )?;

    let part = split_domains(&ds)?;
    let names = &schema.domain().categories;
    let wanted: Vec<usize> = if all_domains {
        part.groups.keys().copied().collect()
    } else {
        let name = target_domain.ok_or_else(|| {
            Error::Usage("pass --target-domain <name> or --all-domains".into())
        })?;
        let idx = names.iter().position(|c| c == name);
        match idx.filter(|i| part.groups.contains_key(i)) {
            Some(i) => vec![i],
            None => {
                let available: Vec<&str> = part
                    .groups
                    .keys()
                    .filter_map(|&d| names.get(d).map(|s| s.as_str()))
                    .collect();
                return Err(Error::Usage(format!(
                    "domain '{name}' not present in the data; available: {}",
                    available.join(", ")
                )));
            }
        }
    };

    let mut report = FairnessReport { rows: Vec::new() };
    for dom in wanted {
        let slice = ds.select(&part.groups[&dom]);
        let row = fairness::evaluate_target(&net, &slice)?;
        for w in &row.warnings {
            eprintln!("warning: domain {}: {w}", names[dom]);
        }
        report.rows.push((dom, names[dom].clone(), row));
    }

    std::fs::write(cfg.output_dir.join("report.csv"), report.to_csv())
        .map_err(|e| Error::Config(format!("cannot write report.csv: {e}")))?;
    let table = report.to_table();
    std::fs::write(cfg.output_dir.join("report.txt"), &table)
        .map_err(|e| Error::Config(format!("cannot write report.txt: {e}")))?;
    print!("{table}");
    Ok(())
}

// ------------------------------------------------------------------- lodo

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateToml {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    lambda_y: Option<f32>,
    #[serde(default)]
    lambda_z: Option<f32>,
    #[serde(default)]
    iterations: Option<u64>,
    #[serde(default)]
    num_samples: Option<usize>,
    #[serde(default)]
    score_hidden: Option<Vec<usize>>,
    #[serde(default)]
    classifier_hidden: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidatesToml {
    candidate: Vec<CandidateToml>,
}

fn apply_candidate(base: &PipelineParams, c: &CandidateToml) -> Result<PipelineParams> {
    let mut p = base.clone();
    let ly = c.lambda_y.unwrap_or(p.weights.lambda_y);
    let lz = c.lambda_z.unwrap_or(p.weights.lambda_z);
    p.weights = GuidanceWeights::new(ly, lz)?;
    if let Some(n) = c.iterations {
        p.fit.iterations = n;
    }
    if let Some(n) = c.num_samples {
        p.n_samples = n;
    }
    if let Some(h) = &c.score_hidden {
        p.nets.score_hidden = h.clone();
    }
    if let Some(h) = &c.classifier_hidden {
        p.nets.classifier_hidden = h.clone();
    }
    Ok(p)
}

pub fn lodo(cfg: &PipelineConfig, candidates_path: &Path, budget: Option<u64>) -> Result<()> {
    let (schema, ds) = load_prepared(cfg)?;
    let part = split_domains(&ds)?;
    let text = std::fs::read_to_string(candidates_path)
        .map_err(|e| Error::Config(format!("cannot read '{}': {e}", candidates_path.display())))?;
    let parsed: CandidatesToml = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("candidates '{}': {e}", candidates_path.display())))?;
    if parsed.candidate.is_empty() {
        return Err(Error::Usage("candidates file lists no candidates".into()));
    }
    let base = cfg.params()?;
    let names: Vec<String> = parsed
        .candidate
        .iter()
        .enumerate()
        .map(|(i, c)| c.name.clone().unwrap_or_else(|| format!("candidate-{i}")))
        .collect();
    let cands: Vec<PipelineParams> = parsed
        .candidate
        .iter()
        .map(|c| apply_candidate(&base, c))
        .collect::<Result<_>>()?;

    let budget = budget.unwrap_or(cfg.lodo.budget);
    let (report, state, winner_params) =
        pipeline::leave_one_domain_out(&ds, &part, &cands, budget, cfg.seed)?;

    let domain_names = &schema.domain().categories;
    let mut csv_text = String::from("candidate,domain,acc\n");
    for f in &report.folds {
        let dom = domain_names.get(f.domain).map(|s| s.as_str()).unwrap_or("?");
        csv_text.push_str(&format!("{},{},{:.4}\n", names[f.candidate], dom, f.acc));
        println!("fold {} / held-out {}: acc {:.4}", names[f.candidate], dom, f.acc);
    }
    for (ci, acc) in report.mean_acc.iter().enumerate() {
        csv_text.push_str(&format!("{},mean,{acc:.4}\n", names[ci]));
    }
    csv_text.push_str(&format!("{},winner,\n", names[report.winner]));
    std::fs::write(cfg.output_dir.join("lodo_report.csv"), csv_text)
        .map_err(|e| Error::Config(format!("cannot write lodo_report.csv: {e}")))?;

    artifacts::save_state(
        &cfg.output_dir,
        &state,
        cfg.seed,
        schema.fingerprint(),
        winner_params.adam_outer,
    )?;
    println!(
        "winner: {} (mean acc {:.4}); retrained on all domains, checkpoints in {}",
        names[report.winner],
        report.mean_acc[report.winner],
        cfg.output_dir.join(artifacts::CHECKPOINT_DIR).display()
    );
    Ok(())
}
