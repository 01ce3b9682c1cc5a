//! Command-line pipeline: generate a dataset, run an aggregation/classifier
//! cell, project embeddings to 2-D, and merge per-cell reports into one
//! table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::aggregate::{Sample, Strategy};
use crate::classify::{
    self, ClassifierKind, FcnnConfig, ForestConfig, TrainLog, TrainedKind,
};
use crate::dataio::{self, DatasetSplit, LabelRule, MetadataTable};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::numerics::Real;
use crate::project::{self, TsneConfig};
use crate::setattn::SetTransformerConfig;
use crate::synth::{self, SynthConfig};

pub const SEED_ENV: &str = "SETPOOL_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "setpool",
    version,
    about = "Abundance-aware set aggregation, classification, and inspection of sample embedding datasets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic benchmark dataset with a planted abundance signal.
    Synth(SynthArgs),
    /// Split, train, and evaluate one strategy/classifier cell.
    Run(RunArgs),
    /// Project an embeddings TSV to 2-D with t-SNE and plot it.
    Project(ProjectArgs),
    /// Merge per-cell report JSONs into one aligned table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON file with generator settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "synth-data")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub taxa: Option<usize>,
    #[arg(long)]
    pub signal_taxon: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub records_min: Option<usize>,
    #[arg(long)]
    pub records_max: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Dataset manifest (training data in cross-study mode).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Second manifest holding the test study; skips the stratified split.
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Metadata table for rule-based labeling.
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub classifier: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "run-out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// Embeddings TSV produced by `run` (sample_id, label, values...).
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value = "project-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report JSON files from `run`.
    pub reports: Vec<PathBuf>,
    /// Optional path for the merged table; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything one `run` invocation needs, as a single JSON document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub classifier: ClassifierKind,
    pub seed: Option<u64>,
    /// Repetition budget for the set-transformer strategy.
    pub budget: usize,
    pub train_fraction: f64,
    pub set_transformer: SetTransformerConfig,
    pub fcnn: FcnnConfig,
    pub forest: ForestConfig,
    pub label_rule: Option<LabelRule>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            strategy: Strategy::WeightedSetTransformer,
            classifier: ClassifierKind::Fcnn,
            seed: None,
            budget: 256,
            train_fraction: 0.8,
            set_transformer: SetTransformerConfig::default(),
            fcnn: FcnnConfig::default(),
            forest: ForestConfig::default(),
            label_rule: None,
        }
    }
}

fn load_json_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

/// Per-sample prediction row of the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSample {
    pub id: String,
    pub truth: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train_total: usize,
    pub test_total: usize,
    /// (class, count) pairs, ascending by class.
    pub train_per_class: Vec<(usize, usize)>,
    pub test_per_class: Vec<(usize, usize)>,
}

/// The JSON report emitted by `run`. Field order is fixed so identical runs
/// serialize byte-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub strategy: Strategy,
    pub classifier: ClassifierKind,
    pub seed: u64,
    pub precision: String,
    pub config: RunConfig,
    pub split: SplitSummary,
    pub metrics: MetricsReport,
    pub train_log: Option<TrainLog>,
    pub per_sample: Vec<PerSample>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => load_json_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed.or_else(env_seed) {
        cfg.seed = v;
    }
    if let Some(v) = args.n_samples {
        cfg.n_samples = v;
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    if let Some(v) = args.taxa {
        cfg.taxa = v;
    }
    if let Some(v) = args.signal_taxon {
        cfg.signal_taxon = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = args.records_min {
        cfg.records_min = v;
    }
    if let Some(v) = args.records_max {
        cfg.records_max = v;
    }
    let manifest = synth::generate_to_dir(&cfg, &args.out)?;
    println!("{}", manifest.display());
    Ok(manifest)
}

fn count_per_class(samples: &[Sample]) -> Vec<(usize, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for s in samples {
        if let Some(l) = s.label {
            *counts.entry(l).or_insert(0usize) += 1;
        }
    }
    counts.into_iter().collect()
}

/// Load a manifest and resolve labels, applying the configured rule when
/// present. Returns labeled samples only.
fn load_labeled(
    manifest: &Path,
    rule: Option<&LabelRule>,
    metadata: Option<&Path>,
) -> Result<Vec<Sample>> {
    let loaded = dataio::load_dataset(manifest)?;
    for id in &loaded.rejected {
        eprintln!("note: sample {id} had no positive-abundance records; skipped");
    }
    let samples = match rule {
        None => {
            let unlabeled: Vec<&str> = loaded
                .samples
                .iter()
                .filter(|s| s.label.is_none())
                .map(|s| s.id.as_str())
                .collect();
            if !unlabeled.is_empty() {
                return Err(Error::Schema(format!(
                    "manifest labels must be 0 or 1 (or configure label_rule); offending samples: {}",
                    unlabeled.join(", ")
                )));
            }
            loaded.samples
        }
        Some(rule) => {
            let table = match metadata {
                Some(p) => MetadataTable::load(p)?,
                None => {
                    // The manifest's label column doubles as a one-field
                    // metadata table.
                    MetadataTable {
                        fields: vec!["sample_id".into(), "label".into()],
                        rows: loaded
                            .raw_labels
                            .iter()
                            .map(|(id, raw)| vec![id.clone(), raw.clone()])
                            .collect(),
                    }
                }
            };
            let derived = dataio::derive_labels(&table, rule)?;
            for id in &derived.excluded {
                eprintln!("note: sample {id} excluded by label rule");
            }
            let (labeled, dropped) = dataio::apply_labels(loaded.samples, &derived);
            for id in &dropped {
                if !derived.excluded.contains(id) {
                    eprintln!("note: sample {id} missing from label table; skipped");
                }
            }
            labeled
        }
    };
    Ok(samples)
}

fn partition_by_ids(samples: Vec<Sample>, split: &DatasetSplit) -> (Vec<Sample>, Vec<Sample>) {
    let test_set: std::collections::BTreeSet<&str> =
        split.test_ids.iter().map(|s| s.as_str()).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        if test_set.contains(s.id.as_str()) {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    (train, test)
}

fn write_embeddings_tsv(path: &Path, samples: &[Sample], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for (s, row) in samples.iter().zip(rows) {
        let _ = write!(out, "{}\t{}", s.id, s.label.unwrap_or(0));
        for v in row {
            let _ = write!(out, "\t{}", dataio::format_value(*v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Single-run table in the shape of the merged report.
fn run_table(report: &RunReport) -> String {
    render_table(std::slice::from_ref(report))
}

fn render_table(reports: &[RunReport]) -> String {
    let header = [
        "Embedding Method",
        "Classifier",
        "Accuracy",
        "Macro Precision",
        "Macro Recall",
        "Macro F1",
    ];
    let mut rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            let cells = r.metrics.table_cells();
            [
                r.strategy.display_name().to_string(),
                r.classifier.display_name().to_string(),
                cells[0].clone(),
                cells[1].clone(),
                cells[2].clone(),
                cells[3].clone(),
            ]
        })
        .collect();
    // Report rows group by classifier, strategies in a fixed order within.
    let strategy_order = |s: &str| match s {
        "Set Transformer" => 0,
        "Average" => 1,
        "Weighted Average" => 2,
        _ => 3,
    };
    let classifier_order = |c: &str| usize::from(c != "FCNN");
    rows.sort_by_key(|r| (classifier_order(&r[1]), strategy_order(&r[0])));

    let mut widths = header.map(|h| h.len());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for (i, h) in header.iter().enumerate() {
        let _ = write!(out, "{h:<w$}", w = widths[i] + 2);
    }
    out.push('\n');
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            let _ = write!(out, "{cell:<w$}", w = widths[i] + 2);
        }
        out.push('\n');
    }
    out
}

fn run_pipeline<R: Real>(args: &RunArgs, cfg: &RunConfig, seed: u64) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    let samples = load_labeled(&args.manifest, cfg.label_rule.as_ref(), args.metadata.as_deref())?;
    // The encoder's input width is a property of the dataset.
    if let Some(first) = samples.first() {
        cfg.set_transformer.input_dim = first.dim();
    }
    let (train, test) = match &args.test_manifest {
        Some(test_manifest) => {
            let test_samples =
                load_labeled(test_manifest, cfg.label_rule.as_ref(), args.metadata.as_deref())?;
            dataio::cross_study_split(&samples, &test_samples)?;
            (samples, test_samples)
        }
        None => {
            let labels: Vec<(String, usize)> = samples
                .iter()
                .map(|s| (s.id.clone(), s.label.expect("labeled above")))
                .collect();
            let split = dataio::stratified_split(&labels, cfg.train_fraction, seed)?;
            partition_by_ids(samples, &split)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Degenerate(
            "both train and test sets must be nonempty".into(),
        ));
    }

    let mut fcnn_cfg = cfg.fcnn.clone();
    fcnn_cfg.seed = seed;
    let mut forest_cfg = cfg.forest.clone();
    forest_cfg.seed = seed;

    let model = classify::train_model::<R>(
        &train,
        cfg.strategy,
        cfg.classifier,
        &cfg.set_transformer,
        cfg.budget,
        &fcnn_cfg,
        &forest_cfg,
    )?;
    let mut store = model.param_store::<R>()?;

    let mut predictions = Vec::with_capacity(test.len());
    let mut per_sample = Vec::with_capacity(test.len());
    for s in &test {
        let (label, probabilities) = classify::predict_sample(&model, &mut store, s)?;
        predictions.push(label);
        per_sample.push(PerSample {
            id: s.id.clone(),
            truth: s.label.expect("labeled above"),
            predicted: label,
            probabilities,
        });
    }
    let truth: Vec<usize> = test.iter().map(|s| s.label.unwrap()).collect();
    let report_metrics = metrics::score(&predictions, &truth)?;

    fs::create_dir_all(&args.out)?;
    let train_rows = classify::embed_all(
        &train,
        model.strategy,
        &model.set_transformer,
        &mut store,
        model.budget,
    )?;
    let test_rows = classify::embed_all(
        &test,
        model.strategy,
        &model.set_transformer,
        &mut store,
        model.budget,
    )?;
    write_embeddings_tsv(&args.out.join("embeddings_train.tsv"), &train, &train_rows)?;
    write_embeddings_tsv(&args.out.join("embeddings_test.tsv"), &test, &test_rows)?;
    fs::write(args.out.join("model.json"), model.to_json()?)?;

    let train_log = match &model.kind {
        TrainedKind::Fcnn { log, .. } => Some(log.clone()),
        TrainedKind::Forest { pretrain_log, .. } => pretrain_log.clone(),
    };
    let report = RunReport {
        version: 1,
        strategy: cfg.strategy,
        classifier: cfg.classifier,
        seed,
        precision: if std::mem::size_of::<R>() == 4 { "f32" } else { "f64" }.to_string(),
        config: RunConfig {
            seed: Some(seed),
            ..cfg
        },
        split: SplitSummary {
            train_total: train.len(),
            test_total: test.len(),
            train_per_class: count_per_class(&train),
            test_per_class: count_per_class(&test),
        },
        metrics: report_metrics,
        train_log,
        per_sample,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Schema(format!("report serialization failed: {e}")))?;
    fs::write(args.out.join("report.json"), json + "\n")?;
    fs::write(args.out.join("report.txt"), run_table(&report))?;
    Ok(report)
}

pub fn cmd_run(args: &RunArgs) -> Result<RunReport> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => load_json_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &args.strategy {
        cfg.strategy = Strategy::parse(s)?;
    }
    if let Some(c) = &args.classifier {
        cfg.classifier = ClassifierKind::parse(c)?;
    }
    if let Some(b) = args.budget {
        cfg.budget = b;
    }
    let seed = args.seed.or(cfg.seed).or_else(env_seed).unwrap_or(0);
    let report = match args.precision {
        Precision::F32 => run_pipeline::<f32>(args, &cfg, seed)?,
        Precision::F64 => run_pipeline::<f64>(args, &cfg, seed)?,
    };
    println!(
        "{} + {}: accuracy {:.4}, macro F1 {:.4} ({} train / {} test)",
        report.strategy.display_name(),
        report.classifier.display_name(),
        report.metrics.accuracy,
        report.metrics.macro_f1,
        report.split.train_total,
        report.split.test_total
    );
    Ok(report)
}

/// Rows of an embeddings TSV: ids, labels, and embedding vectors.
pub type EmbeddingRows = (Vec<String>, Vec<usize>, Vec<Vec<f64>>);

/// Parse an embeddings TSV written by `run`.
pub fn read_embeddings_tsv(path: &Path) -> Result<EmbeddingRows> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Schema(format!("cannot read embeddings {name}: {e}")))?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                file: name.clone(),
                line: i + 1,
                msg: "expected sample_id, label, then embedding values".into(),
            });
        }
        ids.push(fields[0].to_string());
        labels.push(fields[1].parse::<usize>().map_err(|_| Error::Parse {
            file: name.clone(),
            line: i + 1,
            msg: format!("cannot parse label {:?}", fields[1]),
        })?);
        let row = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    file: name.clone(),
                    line: i + 1,
                    msg: format!("cannot parse value {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((ids, labels, rows))
}

pub fn cmd_project(args: &ProjectArgs) -> Result<()> {
    let (ids, labels, rows) = read_embeddings_tsv(&args.embeddings)?;
    let mut cfg = TsneConfig::default();
    if let Some(v) = args.seed.or_else(env_seed) {
        cfg.seed = v;
    }
    if let Some(v) = args.perplexity {
        cfg.perplexity = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    let result = project::tsne(&rows, &cfg)?;
    fs::create_dir_all(&args.out)?;
    project::write_coordinates_tsv(&args.out.join("coords.tsv"), &ids, &result.coordinates, &labels)?;
    project::emit_plot(&args.out.join("plot.svg"), &result.coordinates, &labels)?;
    println!(
        "projected {} points: final KL {:.6}, silhouette {:.4}",
        ids.len(),
        result.final_kl,
        project::silhouette(&result.coordinates, &labels)?
    );
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    if args.reports.is_empty() {
        return Err(Error::Config("no report files given".into()));
    }
    let reports = args
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Schema(format!("cannot read report {}: {e}", p.display())))?;
            serde_json::from_str::<RunReport>(&text)
                .map_err(|e| Error::Schema(format!("invalid report {}: {e}", p.display())))
        })
        .collect::<Result<Vec<RunReport>>>()?;
    let table = render_table(&reports);
    match &args.out {
        Some(p) => fs::write(p, &table)?,
        None => print!("{table}"),
    }
    Ok(table)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            cmd_synth(&args)?;
        }
        Command::Run(args) => {
            cmd_run(&args)?;
        }
        Command::Project(args) => {
            cmd_project(&args)?;
        }
        Command::Report(args) => {
            cmd_report(&args)?;
        }
    }
    Ok(())
}
