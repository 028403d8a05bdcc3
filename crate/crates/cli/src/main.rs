use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};

use spectro::cluster::{cross_conductance, iterative_discover, Cluster, ClusterRunParams, SweepOrder};
use spectro::graph::{knn_graph, Points, WeightedGraph};
use spectro::ingest::{
    check_pairing, load_matrix, load_matrix_with_sidecar, load_token_metadata, preprocess, save_matrix, sidecar_path,
    MatrixSidecar,
};
use spectro::lab::{
    per_pattern_susceptibility, per_token_susceptibility, run_lab, DrawsMeta, LabConfig, Pooling, PosteriorDraws,
};
use spectro::modes::{
    mode_decompose, mode_susceptibilities, toy_distribution, toy_oracle, ChiBarAnchor, DiscreteDistribution,
};
use spectro::patterns::{classify_records, BigramStats};
use spectro::report::{
    cluster_records, load_cluster_records, pipeline, write_canonical_json, ClusterRecord, PipelineConfig, RunManifest,
    MANIFEST_SCHEMA_VERSION,
};
use spectro::sae::{match_clusters, parse_dump, MatchParams};

#[derive(Parser)]
#[command(
    name = "spectro",
    about = "Susceptibility clustering, mode analysis and posterior sampling",
    disable_version_flag = true
)]
struct Cli {
    /// Print tool and manifest schema versions.
    #[arg(short = 'V', long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    RawRank,
    DegreeNormalized,
}

impl From<Sweep> for SweepOrder {
    fn from(s: Sweep) -> Self {
        match s {
            Sweep::RawRank => SweepOrder::RawRank,
            Sweep::DegreeNormalized => SweepOrder::DegreeNormalized,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Pooled,
    PerChain,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Pooled => Pooling::Pooled,
            PoolingArg::PerChain => Pooling::PerChain,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a matrix and its token metadata, then preprocess.
    Ingest {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count bigrams over token metadata.
    Bigrams {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pattern flags for every token record.
    Classify {
        #[arg(long)]
        meta: PathBuf,
        /// Bigram table; counted from the metadata when omitted.
        #[arg(long)]
        bigrams: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the k-nearest-neighbor graph.
    Graph {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 45)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative conductance-based cluster discovery.
    Cluster {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 45)]
        k: usize,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-7)]
        eps: f64,
        #[arg(long = "main-body", default_value_t = 0.99)]
        main_body: f64,
        #[arg(long = "min-size", default_value_t = 20)]
        min_size: usize,
        #[arg(long, default_value_t = 0.001)]
        term: f64,
        #[arg(long = "rng-seed", default_value_t = 0)]
        rng_seed: u64,
        #[arg(long, value_enum, default_value_t = Sweep::RawRank)]
        sweep: Sweep,
        /// Matrix whose row ids label the graph nodes.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Conductance of existing clusters in another graph.
    CrossCond {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mode decomposition of a discrete distribution.
    Modes {
        #[arg(long)]
        dist: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Modes of the three-context toy distribution with closed-form values.
    ToyModes {
        #[arg(long, default_value_t = 0.5)]
        a: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mode susceptibilities from per-token susceptibilities.
    Invert {
        /// Output of the `modes` command; its distribution is renormalized
        /// (JSON floats carry nine digits) and decomposed again.
        #[arg(long, required_unless_present = "dist", conflicts_with = "dist")]
        modes: Option<PathBuf>,
        /// Distribution file, used exactly as given.
        #[arg(long)]
        dist: Option<PathBuf>,
        /// Matrix with one row per (context, token), token index fastest.
        #[arg(long)]
        chi: PathBuf,
        /// Known chi-bar, comma-separated; minimum-norm solution when omitted.
        #[arg(long = "chi-bar", value_delimiter = ',')]
        chi_bar: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior sampling on a small sequence model.
    Lab {
        #[command(subcommand)]
        command: LabCommand,
    },
    /// Match clusters against sparse-feature activations.
    SaeMatch {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long = "max-contexts", default_value_t = 30)]
        max_contexts: usize,
        #[arg(long = "baseline-clusters", default_value_t = 20)]
        baseline_clusters: usize,
        #[arg(long = "max-features", default_value_t = 50)]
        max_features: usize,
        #[arg(long = "rng-seed", default_value_t = 0)]
        rng_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline from a JSON config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum LabCommand {
    /// Train, sample and write draws plus pair metadata.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-token susceptibilities from draws.
    Chi {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long, value_enum, default_value_t = PoolingArg::Pooled)]
        pooling: PoolingArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average susceptibility of a set of rows.
    Pattern {
        #[arg(long)]
        chi: PathBuf,
        /// JSON array of row indices or row ids.
        #[arg(long)]
        members: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn manifest_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

/// Write `body` with the manifest embedded under `manifest`.
fn write_report(out: &Path, manifest: &RunManifest, body: Value) -> Result<()> {
    let mut body = body;
    body["manifest"] = serde_json::to_value(manifest.embedded())?;
    write_canonical_json(out, &body)?;
    Ok(())
}

fn finish(out: &Path, mut manifest: RunManifest) -> Result<()> {
    manifest.finish();
    write_canonical_json(&manifest_path(out), &manifest)?;
    Ok(())
}

fn records_to_clusters(records: &[ClusterRecord]) -> Vec<Cluster> {
    records
        .iter()
        .map(|r| Cluster {
            id: r.id,
            members: r.member_rows.clone(),
            conductance: r.conductance,
            seed: r.seed,
            iteration: r.iteration,
        })
        .collect()
}

fn renormalized(mut d: DiscreteDistribution) -> DiscreteDistribution {
    let norm = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|p| *p /= s);
        }
    };
    norm(&mut d.q_x);
    d.q_y_given_x.iter_mut().for_each(norm);
    d
}

fn print_json(v: &Value) -> Result<()> {
    print!("{}", spectro::report::canonical_json(v)?);
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { matrix, meta, out } => {
            let mut manifest = RunManifest::new("ingest", json!({"matrix": matrix, "meta": meta}));
            manifest.add_input(&matrix)?;
            let (m, side) =
                load_matrix_with_sidecar(&matrix).with_context(|| format!("loading {}", matrix.display()))?;
            if let Some(p) = &meta {
                manifest.add_input(p)?;
                let recs = load_token_metadata(p).with_context(|| format!("loading {}", p.display()))?;
                check_pairing(&m, &recs)?;
            }
            fs::create_dir_all(&out)?;
            let p = preprocess(&m)?;
            let mut sc = p.sidecar();
            sc.row_ids = Some(m.row_ids.clone());
            if let Some(s) = side {
                sc.component_ids = sc.component_ids.or(s.component_ids);
            }
            save_matrix(&out.join("prep.susc"), &p.matrix, Some(&sc))?;
            info!("{} rows, {} -> {} components", m.rows(), m.cols(), p.matrix.cols());
            manifest.finish();
            write_canonical_json(&out.join("manifest.json"), &manifest)?;
        }
        Command::Bigrams { meta, out } => {
            let mut manifest = RunManifest::new("bigrams", json!({"meta": meta}));
            manifest.add_input(&meta)?;
            let recs = load_token_metadata(&meta)?;
            write_canonical_json(&out, &BigramStats::from_records(&recs).to_json())?;
            finish(&out, manifest)?;
        }
        Command::Classify { meta, bigrams, out } => {
            let mut manifest = RunManifest::new("classify", json!({"meta": meta, "bigrams": bigrams}));
            manifest.add_input(&meta)?;
            let recs = load_token_metadata(&meta)?;
            let stats = match &bigrams {
                Some(p) => {
                    manifest.add_input(p)?;
                    BigramStats::from_json(read_json(p)?)?
                }
                None => BigramStats::from_records(&recs),
            };
            let flags = classify_records(&recs, Some(&stats));
            let mut text = String::new();
            for (i, f) in flags.iter().enumerate() {
                text.push_str(&serde_json::to_string(&json!({"row": i, "flags": f}))?);
                text.push('\n');
            }
            fs::write(&out, text)?;
            finish(&out, manifest)?;
        }
        Command::Graph { input, k, out } => {
            let mut manifest = RunManifest::new("graph", json!({"in": input, "k": k}));
            manifest.add_input(&input)?;
            let m = load_matrix(&input)?;
            let g = knn_graph(Points::new(m.values(), m.cols())?, k)?;
            g.save(&out)?;
            finish(&out, manifest)?;
        }
        Command::Cluster {
            graph,
            k,
            alpha,
            eps,
            main_body,
            min_size,
            term,
            rng_seed,
            sweep,
            matrix,
            out,
        } => {
            let params = ClusterRunParams {
                k,
                alpha,
                eps,
                main_body_threshold: main_body,
                min_cluster_size: min_size,
                termination_fraction: term,
                rng_seed,
                sweep_order: sweep.into(),
            };
            let mut manifest =
                RunManifest::new("cluster", json!({"graph": graph, "matrix": matrix, "cluster": params}));
            manifest.add_input(&graph)?;
            manifest.seed("cluster", rng_seed);
            let g = WeightedGraph::load(&graph)?;
            let row_ids = match &matrix {
                Some(p) => {
                    manifest.add_input(p)?;
                    let m = load_matrix(p)?;
                    if m.rows() != g.node_count() {
                        bail!("matrix has {} rows, graph has {} nodes", m.rows(), g.node_count());
                    }
                    m.row_ids
                }
                None => (0..g.node_count()).map(|i| i.to_string()).collect(),
            };
            let run = iterative_discover(&g, &params)?;
            info!("{} clusters in {} rounds", run.clusters.len(), run.events.len());
            write_canonical_json(&out, &cluster_records(&run.clusters, &row_ids)?)?;
            finish(&out, manifest)?;
        }
        Command::CrossCond { graph, clusters, out } => {
            let mut manifest = RunManifest::new("cross-cond", json!({"graph": graph, "clusters": clusters}));
            manifest.add_input(&graph)?;
            manifest.add_input(&clusters)?;
            let g = WeightedGraph::load(&graph)?;
            let recs = load_cluster_records(&clusters)?;
            let cond = cross_conductance(&g, &records_to_clusters(&recs))?;
            let rows: Vec<Value> = recs
                .iter()
                .zip(&cond)
                .map(|(r, c)| json!({"id": r.id, "original": r.conductance, "cross": c}))
                .collect();
            write_report(&out, &manifest, json!({"conductance": rows}))?;
        }
        Command::Modes { dist, out } => {
            let mut manifest = RunManifest::new("modes", json!({"dist": dist}));
            manifest.add_input(&dist)?;
            let d: DiscreteDistribution = read_json(&dist)?;
            let md = mode_decompose(&d)?;
            write_report(&out, &manifest, json!({"distribution": d, "modes": md}))?;
        }
        Command::ToyModes { a, out } => {
            let d = toy_distribution(a)?;
            let md = mode_decompose(&d)?;
            let oracle = toy_oracle(a)?;
            let body = json!({"distribution": d, "modes": md, "closed_form": oracle});
            match out {
                Some(p) => write_report(&p, &RunManifest::new("toy-modes", json!({"a": a})), body)?,
                None => print_json(&body)?,
            }
        }
        Command::Invert {
            modes,
            dist,
            chi,
            chi_bar,
            out,
        } => {
            let mut manifest = RunManifest::new(
                "invert",
                json!({"modes": modes, "dist": dist, "chi": chi, "chi_bar": chi_bar}),
            );
            manifest.add_input(&chi)?;
            let d = match (&modes, &dist) {
                (_, Some(p)) => {
                    manifest.add_input(p)?;
                    read_json(p)?
                }
                (Some(p), None) => {
                    manifest.add_input(p)?;
                    let v: Value = read_json(p)?;
                    let d: DiscreteDistribution =
                        serde_json::from_value(v["distribution"].clone()).context("modes file lacks a distribution")?;
                    renormalized(d)
                }
                (None, None) => bail!("one of --modes or --dist is required"),
            };
            let md = mode_decompose(&d)?;
            let m = load_matrix(&chi)?;
            let rows: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
            let anchor = chi_bar.map_or(ChiBarAnchor::MinNorm, ChiBarAnchor::Known);
            let r = mode_susceptibilities(&md, &d, &rows, &anchor)?;
            let (nx, ny) = (d.n_contexts(), d.n_tokens());
            let mut entries = Vec::new();
            for a in 0..nx {
                for b in 0..ny {
                    entries.push(json!({"a": a, "b": b, "chi": r.chi.get(a, b), "gauge": r.gauge[a][b]}));
                }
            }
            let body = json!({
                "mode_chi": entries,
                "chi_bar": r.chi_bar,
                "centering": r.centering,
                "diagonal_coefficient": r.diagonal_coefficient,
                "anchor": if matches!(anchor, ChiBarAnchor::MinNorm) { "min_norm" } else { "known" },
            });
            match out {
                Some(p) => write_report(&p, &manifest, body)?,
                None => print_json(&body)?,
            }
        }
        Command::Lab { command } => run_lab_cmd(command)?,
        Command::SaeMatch {
            dump,
            clusters,
            threshold,
            max_contexts,
            baseline_clusters,
            max_features,
            rng_seed,
            out,
        } => {
            let params = MatchParams {
                threshold,
                max_contexts,
                baseline_clusters,
                max_features,
                rng_seed,
            };
            let mut manifest = RunManifest::new(
                "sae-match",
                json!({"dump": dump, "clusters": clusters, "match": params}),
            );
            manifest.add_input(&dump)?;
            manifest.add_input(&clusters)?;
            manifest.seed("sae_match", rng_seed);
            let acts = parse_dump(BufReader::new(
                File::open(&dump).with_context(|| format!("opening {}", dump.display()))?,
            ))?;
            let recs = load_cluster_records(&clusters)?;
            let ids: Vec<Vec<String>> = recs.iter().map(|r| r.member_row_ids.clone()).collect();
            let reports = match_clusters(&acts, &ids, &params)?;
            let matched = reports.iter().filter(|r| r.matched_feature.is_some()).count();
            info!("{matched} of {} clusters matched", reports.len());
            write_report(&out, &manifest, json!({"matches": reports}))?;
        }
        Command::Pipeline { config, out } => {
            let mut cfg: PipelineConfig = read_json(&config)?;
            if let Some(base) = config.parent() {
                cfg.resolve_paths(base);
            }
            let summary = pipeline(&cfg, &out)?;
            info!("{} clusters over {} rows", summary.clusters, summary.rows);
            print_json(&serde_json::to_value(&summary)?)?;
        }
    }
    Ok(())
}

fn run_lab_cmd(cmd: LabCommand) -> Result<()> {
    match cmd {
        LabCommand::Run { config, out } => {
            let cfg: LabConfig = match &config {
                Some(p) => read_json(p)?,
                None => LabConfig::default(),
            };
            let mut manifest = RunManifest::new("lab run", &cfg);
            if let Some(p) = &config {
                manifest.add_input(p)?;
            }
            manifest.seed("sampler", cfg.sampler.rng_seed);
            manifest.seed("model", cfg.model.seed);
            let run = run_lab(&cfg)?;
            run.draws.save(&out)?;
            write_canonical_json(&sidecar_path(&out), &run.meta)?;
            info!(
                "loss {:.4} -> {:.4}; {} draws of {} pairs",
                run.meta.initial_loss,
                run.meta.trained_loss,
                run.draws.total(),
                run.meta.row_ids.len()
            );
            finish(&out, manifest)?;
        }
        LabCommand::Chi { draws, pooling, out } => {
            let mut manifest = RunManifest::new("lab chi", json!({"draws": draws, "pooling": Pooling::from(pooling)}));
            manifest.add_input(&draws)?;
            let d = PosteriorDraws::load(&draws)?;
            let mut chi = per_token_susceptibility(&d, pooling.into())?;
            let meta_path = sidecar_path(&draws);
            let side = if meta_path.exists() {
                let meta: DrawsMeta = read_json(&meta_path)?;
                chi = chi.with_ids(meta.row_ids, meta.component_ids)?;
                Some(MatrixSidecar {
                    component_ids: Some(chi.component_ids.clone()),
                    row_ids: Some(chi.row_ids.clone()),
                    transform: None,
                })
            } else {
                None
            };
            if out.extension().is_some_and(|e| e == "json") {
                bail!("chi output is a matrix file; use a .susc name");
            }
            save_matrix(&out, &chi, side.as_ref())?;
            finish(&out, manifest)?;
        }
        LabCommand::Pattern { chi, members, out } => {
            let m = load_matrix(&chi)?;
            let v: Value = read_json(&members)?;
            let list = v.as_array().context("members must be a JSON array")?;
            let rows = list
                .iter()
                .map(|e| match e {
                    Value::Number(n) => n
                        .as_u64()
                        .map(|i| i as usize)
                        .context("row index must be a non-negative integer"),
                    Value::String(s) => m
                        .row_ids
                        .iter()
                        .position(|r| r == s)
                        .with_context(|| format!("unknown row id {s}")),
                    _ => bail!("members must be integers or strings"),
                })
                .collect::<Result<Vec<_>>>()?;
            let avg = per_pattern_susceptibility(&m, &rows)?;
            let body = json!({"members": rows.len(), "component_ids": m.component_ids, "chi": avg});
            match out {
                Some(p) => {
                    let mut manifest = RunManifest::new("lab pattern", json!({"chi": chi, "members": members}));
                    manifest.add_input(&chi)?;
                    manifest.add_input(&members)?;
                    write_report(&p, &manifest, body)?;
                }
                None => print_json(&body)?,
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.version {
        println!(
            "spectro {} (manifest schema {MANIFEST_SCHEMA_VERSION})",
            env!("CARGO_PKG_VERSION")
        );
        return Ok(());
    }
    match cli.command {
        Some(cmd) => run(cmd),
        None => bail!("no command given; see --help"),
    }
}
