//! Run artifacts: canonical JSON, cluster cards, point files, manifests and
//! the end-to-end pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{iterative_discover, Cluster, ClusterRunParams};
use crate::graph::{knn_graph, Points};
use crate::ingest::{
    check_pairing, load_matrix_with_sidecar, load_token_metadata, preprocess, save_matrix, MatrixSidecar,
    SusceptibilityMatrix, TokenRecord,
};
use crate::lab::{per_token_susceptibility, run_lab, LabConfig, Pooling};
use crate::modes::{mode_decompose, DiscreteDistribution};
use crate::numeric::entropy_nats;
use crate::patterns::{classify_records, BigramStats, PatternFlags};
use crate::sae::{match_clusters, parse_dump, MatchParams};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MAX_SAMPLE_CONTEXTS: usize = 10;
pub const UNCLASSIFIED: &str = "unclassified";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("bad points file line {line}: {message}")]
    Points { line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `%.9g` formatting.
pub fn format_g9(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip(mant), exp.abs())
    } else {
        strip(&format!("{x:.*}", (8 - exp) as usize))
    }
}

fn write_canonical(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&format_g9(n.as_f64().expect("f64")));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            let flat = items.iter().all(|i| !matches!(i, Value::Array(_) | Value::Object(_)));
            if flat {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_canonical(item, indent, out);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_canonical(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let keys: std::collections::BTreeSet<&String> = map.keys().collect();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push_str(": ");
                write_canonical(&map[*k], indent + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// Sorted keys, two-space indentation, floats as `%.9g`.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String, ReportError> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_canonical(&v, 0, &mut out);
    out.push('\n');
    Ok(out)
}

pub fn write_canonical_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), ReportError> {
    fs::write(path, canonical_json(value)?)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String, ReportError> {
    let mut h = Sha256::new();
    let mut f = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub parameters: Value,
    /// Input path to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    pub rng_seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_unix: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, parameters: impl Serialize) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            parameters: serde_json::to_value(parameters).unwrap_or(Value::Null),
            inputs: BTreeMap::new(),
            rng_seeds: BTreeMap::new(),
            started_unix: Some(unix_now()),
            finished_unix: None,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), ReportError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.rng_seeds.insert(name.to_string(), seed);
    }

    pub fn finish(&mut self) {
        self.finished_unix = Some(unix_now());
    }

    /// Copy without timestamps, for embedding in reproducible outputs.
    pub fn embedded(&self) -> Self {
        Self {
            started_unix: None,
            finished_unix: None,
            ..self.clone()
        }
    }
}

/// On-disk cluster entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: usize,
    pub seed: usize,
    pub iteration: usize,
    pub conductance: f64,
    pub member_rows: Vec<usize>,
    pub member_row_ids: Vec<String>,
}

pub fn cluster_records(clusters: &[Cluster], row_ids: &[String]) -> Result<Vec<ClusterRecord>, ReportError> {
    clusters
        .iter()
        .map(|c| {
            let ids = c
                .members
                .iter()
                .map(|&i| {
                    row_ids.get(i).cloned().ok_or_else(|| {
                        ReportError::Pairing(format!("member row {i} has no id ({} ids)", row_ids.len()))
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok(ClusterRecord {
                id: c.id,
                seed: c.seed,
                iteration: c.iteration,
                conductance: c.conductance,
                member_rows: c.members.clone(),
                member_row_ids: ids,
            })
        })
        .collect()
}

pub fn load_cluster_records(path: &Path) -> Result<Vec<ClusterRecord>, ReportError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleContext {
    pub row: usize,
    pub row_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoded_target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_tag: Option<String>,
}

/// Entropies are in nats. Histogram entries are the fraction of members
/// carrying each flag; flags overlap, so they can sum past 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCard {
    pub id: usize,
    pub size: usize,
    pub conductance: f64,
    pub pattern_histogram: BTreeMap<String, f64>,
    pub target_entropy: Option<f64>,
    pub penultimate_entropy: Option<f64>,
    pub samples: Vec<SampleContext>,
}

fn count_entropy<T: Ord>(items: impl IntoIterator<Item = T>) -> f64 {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for t in items {
        *counts.entry(t).or_default() += 1;
    }
    entropy_nats(counts.into_values())
}

/// One card per cluster. `records` and `flags`, when given, must have one
/// entry per row id. Sample contexts are the first members in row order.
pub fn make_cards(
    clusters: &[ClusterRecord],
    row_ids: &[String],
    records: Option<&[TokenRecord]>,
    flags: Option<&[PatternFlags]>,
) -> Result<Vec<ClusterCard>, ReportError> {
    let n = row_ids.len();
    if let Some(r) = records {
        if r.len() != n {
            return Err(ReportError::Pairing(format!("{} token records for {n} rows", r.len())));
        }
    }
    if let Some(f) = flags {
        if f.len() != n {
            return Err(ReportError::Pairing(format!("{} flag rows for {n} rows", f.len())));
        }
    }
    clusters
        .iter()
        .map(|c| {
            if let Some(&bad) = c.member_rows.iter().find(|&&i| i >= n) {
                return Err(ReportError::Pairing(format!(
                    "cluster {} member {bad} outside {n} rows",
                    c.id
                )));
            }
            let size = c.member_rows.len();
            let mut hist: BTreeMap<String, f64> = PatternFlags::NAMES.iter().map(|k| (k.to_string(), 0.0)).collect();
            if let Some(f) = flags {
                for &i in &c.member_rows {
                    for (name, on) in PatternFlags::NAMES.iter().zip(f[i].as_array()) {
                        if on {
                            *hist.get_mut(*name).expect("known name") += 1.0;
                        }
                    }
                }
                for v in hist.values_mut() {
                    *v /= size.max(1) as f64;
                }
            }
            let (target_entropy, penultimate_entropy) = match records {
                Some(r) => (
                    Some(count_entropy(c.member_rows.iter().map(|&i| r[i].target))),
                    Some(count_entropy(
                        c.member_rows.iter().filter_map(|&i| r[i].context.last().copied()),
                    )),
                ),
                None => (None, None),
            };
            let mut rows = c.member_rows.clone();
            rows.sort_unstable();
            let samples = rows
                .iter()
                .take(MAX_SAMPLE_CONTEXTS)
                .map(|&i| {
                    let rec = records.map(|r| &r[i]);
                    SampleContext {
                        row: i,
                        row_id: row_ids[i].clone(),
                        context: rec.map(|r| r.context.clone()),
                        target: rec.map(|r| r.target),
                        decoded_target: rec.map(|r| r.decoded_target.clone()),
                        dataset_tag: rec.map(|r| r.dataset_tag.clone()),
                    }
                })
                .collect();
            Ok(ClusterCard {
                id: c.id,
                size,
                conductance: c.conductance,
                pattern_histogram: hist,
                target_entropy,
                penultimate_entropy,
                samples,
            })
        })
        .collect()
}

/// First set flag in category order, or "unclassified".
pub fn point_label(flags: Option<&PatternFlags>) -> &'static str {
    flags.and_then(|f| f.names().into_iter().next()).unwrap_or(UNCLASSIFIED)
}

/// Header `x1 .. xH label`, then one whitespace-separated row per point.
/// Coordinates use the shortest round-trip decimal form.
pub fn write_points(
    out: impl Write,
    m: &SusceptibilityMatrix,
    flags: Option<&[PatternFlags]>,
) -> Result<(), ReportError> {
    if let Some(f) = flags {
        if f.len() != m.rows() {
            return Err(ReportError::Pairing(format!(
                "{} flag rows for {} points",
                f.len(),
                m.rows()
            )));
        }
    }
    let mut w = BufWriter::new(out);
    let header: Vec<String> = (1..=m.cols())
        .map(|j| format!("x{j}"))
        .chain(["label".to_string()])
        .collect();
    writeln!(w, "{}", header.join(" "))?;
    for i in 0..m.rows() {
        let mut line = String::new();
        for v in m.row(i) {
            let _ = write!(line, "{v:?} ");
        }
        line.push_str(point_label(flags.map(|f| &f[i])));
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_points(path: &Path, m: &SusceptibilityMatrix, flags: Option<&[PatternFlags]>) -> Result<(), ReportError> {
    write_points(File::create(path)?, m, flags)
}

/// Coordinates and labels back from a points file.
pub fn read_points(input: impl BufRead) -> Result<(Vec<Vec<f64>>, Vec<String>), ReportError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.ok_or(ReportError::Points {
        line: 1,
        message: "missing header".into(),
    })?;
    let h = header.split_whitespace().count().saturating_sub(1);
    let (mut coords, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |message: String| ReportError::Points { line: i + 2, message };
        if fields.len() != h + 1 {
            return Err(bad(format!("{} fields, expected {}", fields.len(), h + 1)));
        }
        let row = fields[..h]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        coords.push(row);
        labels.push(fields[h].to_string());
    }
    Ok((coords, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeStage {
    pub dump: PathBuf,
    #[serde(flatten)]
    pub params: MatchParams,
}

/// Pipeline configuration. Relative paths are resolved against the
/// directory of the config file by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Susceptibility matrix; required unless `lab` produces one.
    pub matrix: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub bigrams: Option<PathBuf>,
    pub preprocess: bool,
    /// Graph construction uses `cluster.k`.
    pub cluster: ClusterRunParams,
    pub points: bool,
    pub lab: Option<LabConfig>,
    pub pooling: Pooling,
    pub modes: Option<PathBuf>,
    pub sae: Option<SaeStage>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            matrix: None,
            meta: None,
            bigrams: None,
            preprocess: true,
            cluster: ClusterRunParams::default(),
            points: true,
            lab: None,
            pooling: Pooling::Pooled,
            modes: None,
            sae: None,
        }
    }
}

impl PipelineConfig {
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.matrix, &mut self.meta, &mut self.bigrams, &mut self.modes]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let Some(s) = &mut self.sae {
            fix(&mut s.dump);
        }
    }
}

#[derive(Debug, Error)]
#[error("stage {stage} failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        message: e.to_string(),
    }
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(".spectro.lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| PipelineError {
                stage: "setup",
                message: format!("cannot lock {}: {e}", path.display()),
            })?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub rows: usize,
    pub components: usize,
    pub clusters: usize,
    pub iterations: usize,
    pub outputs: Vec<String>,
}

#[derive(Serialize)]
struct Embedded<'a, T: Serialize> {
    manifest: &'a RunManifest,
    #[serde(flatten)]
    body: T,
}

/// ingest -> preprocess -> graph -> cluster -> cards, plus the optional
/// lab, modes and SAE stages. Outputs written before a failing stage are
/// kept.
pub fn pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary, PipelineError> {
    fs::create_dir_all(out).map_err(stage("setup"))?;
    let _lock = RunLock::acquire(out)?;
    let mut manifest = RunManifest::new("pipeline", cfg);
    manifest.seed("cluster", cfg.cluster.rng_seed);
    let mut outputs = Vec::new();
    let mut wrote = |name: &str| outputs.push(name.to_string());

    // ingest
    let (matrix, sidecar) = if let Some(lab) = &cfg.lab {
        manifest.seed("lab_sampler", lab.sampler.rng_seed);
        manifest.seed("lab_model", lab.model.seed);
        let run = run_lab(lab).map_err(stage("lab"))?;
        let chi = per_token_susceptibility(&run.draws, cfg.pooling).map_err(stage("lab"))?;
        let chi = chi
            .with_ids(run.meta.row_ids.clone(), run.meta.component_ids.clone())
            .map_err(stage("lab"))?;
        let side = MatrixSidecar {
            component_ids: Some(chi.component_ids.clone()),
            row_ids: Some(chi.row_ids.clone()),
            transform: None,
        };
        save_matrix(&out.join("chi.susc"), &chi, Some(&side)).map_err(stage("lab"))?;
        write_canonical_json(&out.join("lab_pairs.json"), &run.meta).map_err(stage("lab"))?;
        wrote("chi.susc");
        wrote("lab_pairs.json");
        (chi, Some(side))
    } else {
        let path = cfg.matrix.as_ref().ok_or(PipelineError {
            stage: "ingest",
            message: "no matrix path and no lab stage configured".into(),
        })?;
        if !path.exists() {
            return Err(PipelineError {
                stage: "ingest",
                message: format!("matrix not found: {}", path.display()),
            });
        }
        manifest
            .add_input(path)
            .map_err(|e| stage("ingest")(format!("{}: {e}", path.display())))?;
        load_matrix_with_sidecar(path).map_err(|e| stage("ingest")(format!("{}: {e}", path.display())))?
    };
    let records = match &cfg.meta {
        Some(p) => {
            manifest
                .add_input(p)
                .map_err(|e| stage("ingest")(format!("{}: {e}", p.display())))?;
            let r = load_token_metadata(p).map_err(|e| stage("ingest")(format!("{}: {e}", p.display())))?;
            check_pairing(&matrix, &r).map_err(stage("ingest"))?;
            Some(r)
        }
        None => None,
    };
    let row_ids = matrix.row_ids.clone();

    // preprocess
    let prepared = if cfg.preprocess {
        let p = preprocess(&matrix).map_err(stage("preprocess"))?;
        let mut side = p.sidecar();
        side.row_ids = Some(row_ids.clone());
        if let Some(s) = &sidecar {
            side.component_ids = side.component_ids.or_else(|| s.component_ids.clone());
        }
        save_matrix(&out.join("prep.susc"), &p.matrix, Some(&side)).map_err(stage("preprocess"))?;
        wrote("prep.susc");
        p.matrix
    } else {
        matrix.clone()
    };

    // graph
    let points = Points::new(prepared.values(), prepared.cols()).map_err(stage("graph"))?;
    let graph = knn_graph(points, cfg.cluster.k).map_err(stage("graph"))?;
    graph.save(&out.join("graph.sgph")).map_err(stage("graph"))?;
    wrote("graph.sgph");

    // cluster
    let run = iterative_discover(&graph, &cfg.cluster).map_err(stage("cluster"))?;
    let records_out = cluster_records(&run.clusters, &row_ids).map_err(stage("cluster"))?;
    write_canonical_json(&out.join("clusters.json"), &records_out).map_err(stage("cluster"))?;
    wrote("clusters.json");

    // classify
    let flags = match &records {
        Some(r) => {
            let stats = match &cfg.bigrams {
                Some(p) => {
                    manifest.add_input(p).map_err(stage("classify"))?;
                    let v: Value = serde_json::from_reader(BufReader::new(File::open(p).map_err(stage("classify"))?))
                        .map_err(stage("classify"))?;
                    BigramStats::from_json(v).map_err(stage("classify"))?
                }
                None => BigramStats::from_records(r),
            };
            let f = classify_records(r, Some(&stats));
            let mut text = String::new();
            for (i, fl) in f.iter().enumerate() {
                let line = serde_json::json!({"row": i, "row_id": row_ids[i], "flags": fl});
                text.push_str(&serde_json::to_string(&line).map_err(stage("classify"))?);
                text.push('\n');
            }
            fs::write(out.join("flags.jsonl"), text).map_err(stage("classify"))?;
            wrote("flags.jsonl");
            Some(f)
        }
        None => None,
    };

    // cards
    let embedded = manifest.embedded();
    let cards = make_cards(&records_out, &row_ids, records.as_deref(), flags.as_deref()).map_err(stage("cards"))?;
    write_canonical_json(
        &out.join("cards.json"),
        &Embedded {
            manifest: &embedded,
            body: serde_json::json!({"entropy_unit": "nats", "cards": cards}),
        },
    )
    .map_err(stage("cards"))?;
    wrote("cards.json");

    if cfg.points {
        emit_points(&out.join("points.txt"), &prepared, flags.as_deref()).map_err(stage("points"))?;
        wrote("points.txt");
    }

    if let Some(p) = &cfg.modes {
        manifest.add_input(p).map_err(stage("modes"))?;
        let d: DiscreteDistribution =
            serde_json::from_reader(BufReader::new(File::open(p).map_err(stage("modes"))?)).map_err(stage("modes"))?;
        let md = mode_decompose(&d).map_err(stage("modes"))?;
        write_canonical_json(
            &out.join("modes.json"),
            &Embedded {
                manifest: &embedded,
                body: serde_json::json!({"distribution": d, "modes": md}),
            },
        )
        .map_err(stage("modes"))?;
        wrote("modes.json");
    }

    if let Some(s) = &cfg.sae {
        manifest.add_input(&s.dump).map_err(stage("sae-match"))?;
        manifest.seed("sae_match", s.params.rng_seed);
        let dump =
            parse_dump(BufReader::new(File::open(&s.dump).map_err(stage("sae-match"))?)).map_err(stage("sae-match"))?;
        let ids: Vec<Vec<String>> = records_out.iter().map(|c| c.member_row_ids.clone()).collect();
        let reports = match_clusters(&dump, &ids, &s.params).map_err(stage("sae-match"))?;
        write_canonical_json(
            &out.join("matches.json"),
            &Embedded {
                manifest: &embedded,
                body: serde_json::json!({"matches": reports}),
            },
        )
        .map_err(stage("sae-match"))?;
        wrote("matches.json");
    }

    manifest.finish();
    write_canonical_json(&out.join("manifest.json"), &manifest).map_err(stage("manifest"))?;
    wrote("manifest.json");
    Ok(PipelineSummary {
        rows: prepared.rows(),
        components: prepared.cols(),
        clusters: records_out.len(),
        iterations: run.events.len(),
        outputs,
    })
}
