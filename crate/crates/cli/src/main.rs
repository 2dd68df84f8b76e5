//! `evoclust`: fit temporal or static multinomial mixtures on categorical
//! streams, trace cluster evolution, and evaluate the results.
//!
//! Exit codes: 0 success, 2 usage, 3 input-data error, 4 shape mismatch.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use evoclust_core::corpus::{self, Corpus};
use evoclust_core::evolution::{
    assign_instances, assign_instances_static, detect_merges, link_clusters,
    link_static_clusters, read_assignments_csv, write_assignments_csv, write_evolution_dot,
    Assignment, EvolutionGraph,
};
use evoclust_core::metrics::{build_report, LinkRef, MetricsReport};
use evoclust_core::mixture::{fit_mm, EpochParams, FitConfig};
use evoclust_core::model::ModelFile;
use evoclust_core::synth::{generate, write_truth_to_path, SynthConfig};
use evoclust_core::tmm::{fit_tmm, tmm_e_step};
use evoclust_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_SHAPE: u8 = 4;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn output(e: impl std::fmt::Display) -> CliError {
        CliError {
            code: 1,
            message: format!("writing output: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        let code = match &e {
            Error::ShapeMismatch(_) => EXIT_SHAPE,
            Error::InvalidConfig(_) => EXIT_USAGE,
            _ => EXIT_INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "evoclust", version, about = "Evolutionary clustering with temporal multinomial mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write it as JSON (plus a run manifest)
    Fit(FitArgs),
    /// Assign instances, link clusters across epochs, export CSV and DOT
    Assign(AssignArgs),
    /// Compute homogeneity, co-occurrence level, and unsmoothness
    Evaluate(EvaluateArgs),
    /// Generate a synthetic drifting corpus with planted truth
    Synth(SynthArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Mm,
    Tmm,
}

#[derive(Args)]
struct CorpusArgs {
    /// Instance file (JSON Lines)
    #[arg(long)]
    input: PathBuf,
    /// Feature registry JSON fixing the vocabulary and polarities
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Input carries timestamps instead of epochs; split at the median
    #[arg(long)]
    split_median: bool,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus, CliError> {
        let corpus = if self.split_median {
            corpus::load_corpus_split_median(&self.input, self.registry.as_ref())?
        } else {
            corpus::load_corpus(&self.input, self.registry.as_ref())?
        };
        Ok(corpus)
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Model to fit
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Number of clusters
    #[arg(long)]
    k: usize,
    /// Previous-epoch weight in (0, 1]; accepts a comma list to sweep
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-9)]
    floor_phi: f64,
    /// Output model path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AssignArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Fitted model JSON
    #[arg(long)]
    model_file: PathBuf,
    /// Output assignments CSV
    #[arg(long)]
    out: PathBuf,
    /// Output DOT path (default: the CSV path with a .dot extension)
    #[arg(long)]
    dot: Option<PathBuf>,
    /// How many ranked origins to keep per cluster
    #[arg(long, default_value_t = 3)]
    top_m: usize,
    /// Fraction of a cluster an origin must cover to count toward a merge
    #[arg(long, default_value_t = 0.25)]
    merge_threshold: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Fitted model JSON
    #[arg(long)]
    model_file: PathBuf,
    /// Assignments CSV produced by `assign`
    #[arg(long)]
    assignments: PathBuf,
    /// Report output path (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Second `<model.json>,<assignments.csv>` pair for a side-by-side table
    #[arg(long)]
    compare: Option<String>,
    /// Support threshold for the co-occurrence measure
    #[arg(long, default_value_t = 1e-8)]
    support_threshold: f64,
    /// Measure KL from the previous epoch toward the current one instead
    #[arg(long)]
    reverse_kl: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus path (JSON Lines)
    #[arg(long)]
    out: PathBuf,
    /// Truth sidecar path (default: <out>.truth.json)
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 12)]
    vocab: usize,
    /// Instances per epoch
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 8.0)]
    mean_components: f64,
    #[arg(long, default_value_t = 0.2)]
    drift: f64,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    tool_version: String,
    seed: u64,
    config: serde_json::Value,
    inputs: serde_json::Value,
    outputs: serde_json::Value,
    objective: Option<f64>,
    wall_time_secs: f64,
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).map_err(CliError::output)?;
    std::fs::write(manifest_path(path), text + "\n").map_err(CliError::output)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("EVOCLUST_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        } else {
            eprintln!("warning: ignoring unparsable EVOCLUST_THREADS={threads:?}");
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Assign(args) => cmd_assign(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn parse_alpha_list(raw: &str) -> Result<Vec<f64>, CliError> {
    raw.split(',')
        .map(|part| {
            let a: f64 = part
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("bad --alpha value {part:?}")))?;
            if !(a > 0.0 && a <= 1.0) {
                return Err(CliError::usage(format!(
                    "--alpha must lie in (0, 1], got {a}"
                )));
            }
            Ok(a)
        })
        .collect()
}

/// `model.json` -> `model.alpha0.5.json` for sweep outputs.
fn alpha_suffixed(out: &Path, alpha: f64) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("json");
    out.with_file_name(format!("{stem}.alpha{alpha}.{ext}"))
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let start = Instant::now();
    if args.k == 0 {
        return Err(CliError::usage("--k must be >= 1"));
    }
    let alphas = match (args.model, &args.alpha) {
        (ModelKind::Tmm, Some(raw)) => parse_alpha_list(raw)?,
        (ModelKind::Tmm, None) => {
            return Err(CliError::usage(
                "--alpha is required when --model tmm (e.g. --alpha 0.7)",
            ));
        }
        (ModelKind::Mm, Some(_)) => {
            eprintln!("warning: --alpha is ignored for --model mm");
            Vec::new()
        }
        (ModelKind::Mm, None) => Vec::new(),
    };
    let config = FitConfig {
        k: args.k,
        max_iter: args.max_iter,
        tol: args.tol,
        restarts: args.restarts,
        seed: args.seed,
        floor_phi: args.floor_phi,
    };
    let corpus = args.corpus.load()?;
    config.validate(corpus.v()).map_err(CliError::from)?;

    let manifest = |cmd_config: serde_json::Value, out: &Path, objective: f64| RunManifest {
        command: "fit".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: args.seed,
        config: cmd_config,
        inputs: serde_json::json!({
            "input": args.corpus.input,
            "registry": args.corpus.registry,
            "split_median": args.corpus.split_median,
        }),
        outputs: serde_json::json!({ "model": out }),
        objective: Some(objective),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };

    match args.model {
        ModelKind::Mm => {
            let fits = fit_mm(&corpus, &config)?;
            let objective: f64 = fits.iter().map(|f| f.objective()).sum();
            let params: Vec<EpochParams> = fits.into_iter().map(|f| f.params).collect();
            let model = ModelFile::from_mm(&params, &corpus.features);
            model.save(&args.out)?;
            let cfg = serde_json::json!({ "model": "mm", "fit": config });
            write_manifest(&args.out, &manifest(cfg, &args.out, objective))?;
        }
        ModelKind::Tmm => {
            let multi = alphas.len() > 1;
            for &alpha in &alphas {
                let fit = fit_tmm(&corpus, &config, alpha)?;
                let out = if multi {
                    alpha_suffixed(&args.out, alpha)
                } else {
                    args.out.clone()
                };
                let model = ModelFile::from_tmm(&fit.params, &corpus.features);
                model.save(&out)?;
                let cfg = serde_json::json!({ "model": "tmm", "alpha": alpha, "fit": config });
                write_manifest(&out, &manifest(cfg, &out, fit.objective()))?;
            }
        }
    }
    Ok(())
}

/// Assignments plus the evolution graph for either model kind.
fn assignments_and_graph(
    corpus: &Corpus,
    model: &ModelFile,
    top_m: usize,
    merge_threshold: f64,
) -> Result<(Vec<Assignment>, EvolutionGraph, Option<Vec<Vec<evoclust_core::evolution::OriginRanking>>>), CliError> {
    if model.model == "tmm" {
        let params = model.to_tmm_params()?;
        let post = tmm_e_step(corpus, &params);
        let assignments = assign_instances(corpus, &post);
        let graph = link_clusters(&assignments, model.k, corpus.t());
        let merges = detect_merges(&assignments, model.k, corpus.t(), top_m, merge_threshold);
        Ok((assignments, graph, Some(merges)))
    } else {
        let params = model.to_epoch_params();
        let assignments = assign_instances_static(corpus, &params);
        let graph = link_static_clusters(&assignments, &params, 1e-9);
        Ok((assignments, graph, None))
    }
}

fn cmd_assign(args: AssignArgs) -> Result<(), CliError> {
    let corpus = args.corpus.load()?;
    let model = ModelFile::load(&args.model_file)?;
    model.check_compatible(&corpus)?;
    if !(args.merge_threshold > 0.0 && args.merge_threshold <= 1.0) {
        return Err(CliError::usage("--merge-threshold must lie in (0, 1]"));
    }
    if args.top_m == 0 {
        return Err(CliError::usage("--top-m must be >= 1"));
    }
    let (assignments, graph, merges) =
        assignments_and_graph(&corpus, &model, args.top_m, args.merge_threshold)?;
    let csv = std::fs::File::create(&args.out).map_err(CliError::output)?;
    write_assignments_csv(csv, &assignments)?;
    let dot_path = args
        .dot
        .clone()
        .unwrap_or_else(|| args.out.with_extension("dot"));
    let dot = std::fs::File::create(&dot_path).map_err(CliError::output)?;
    write_evolution_dot(dot, &graph, merges.as_deref()).map_err(CliError::output)?;
    Ok(())
}

fn links_for(model: &ModelFile, assignments: &[Assignment], corpus: &Corpus) -> Vec<LinkRef> {
    if model.model == "tmm" {
        link_clusters(assignments, model.k, corpus.t()).link_refs()
    } else {
        link_static_clusters(assignments, &model.to_epoch_params(), 1e-9).link_refs()
    }
}

fn evaluate_one(
    corpus: &Corpus,
    model_path: &Path,
    assignments_path: &Path,
    args: &EvaluateArgs,
) -> Result<MetricsReport, CliError> {
    let model = ModelFile::load(model_path)?;
    model.check_compatible(corpus)?;
    let file = std::fs::File::open(assignments_path).map_err(Error::from)?;
    let assignments = read_assignments_csv(file)?;
    let links = links_for(&model, &assignments, corpus);
    let polarity_reason = args
        .corpus
        .registry
        .is_none()
        .then(|| "no polarity registry provided".to_string());
    let report = build_report(
        corpus,
        &assignments,
        &model.to_epoch_params(),
        &links,
        args.support_threshold,
        1e-9,
        args.reverse_kl,
        polarity_reason,
    )?;
    Ok(report)
}

fn comparison_table(primary: &MetricsReport, compare: &MetricsReport) -> String {
    let fmt_opt = |v: Option<f64>| v.map_or("excluded".to_string(), |x| format!("{x:.4}"));
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:>12} {:>12}", "measure", "primary", "compare");
    let _ = writeln!(
        out,
        "{:<28} {:>12} {:>12}",
        "homogeneity (avg)",
        fmt_opt(primary.homogeneity.average),
        fmt_opt(compare.homogeneity.average)
    );
    let _ = writeln!(
        out,
        "{:<28} {:>12} {:>12}",
        "co-occurrence (total)",
        primary.cooccurrence_level.total,
        compare.cooccurrence_level.total
    );
    let _ = writeln!(
        out,
        "{:<28} {:>12.2} {:>12.2}",
        "co-occurrence (per epoch)",
        primary.cooccurrence_level.per_epoch_average,
        compare.cooccurrence_level.per_epoch_average
    );
    let _ = writeln!(
        out,
        "{:<28} {:>12} {:>12}",
        "unsmoothness (avg)",
        fmt_opt(primary.unsmoothness.average),
        fmt_opt(compare.unsmoothness.average)
    );
    out
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let corpus = args.corpus.load()?;
    let primary = evaluate_one(&corpus, &args.model_file, &args.assignments, &args)?;
    let json = if let Some(raw) = &args.compare {
        let (model2, csv2) = raw.split_once(',').ok_or_else(|| {
            CliError::usage("--compare takes <model.json>,<assignments.csv>")
        })?;
        let compare = evaluate_one(&corpus, Path::new(model2), Path::new(csv2), &args)?;
        print!("{}", comparison_table(&primary, &compare));
        serde_json::json!({ "primary": primary, "compare": compare })
    } else {
        serde_json::to_value(&primary).map_err(CliError::output)?
    };
    let text = serde_json::to_string_pretty(&json).map_err(CliError::output)? + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, text).map_err(CliError::output)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let config = SynthConfig {
        epochs: args.epochs,
        clusters: args.k,
        vocab: args.vocab,
        instances_per_epoch: args.n,
        mean_components: args.mean_components,
        drift: args.drift,
        separation: args.separation,
        alpha: args.alpha,
        seed: args.seed,
    };
    let synth = generate(&config)?;
    corpus::write_corpus_to_path(&synth.corpus, &args.out)?;
    let truth_path = args.truth.clone().unwrap_or_else(|| {
        let mut s = args.out.as_os_str().to_os_string();
        s.push(".truth.json");
        PathBuf::from(s)
    });
    write_truth_to_path(&synth, &truth_path)?;
    let manifest = RunManifest {
        command: "synth".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: args.seed,
        config: serde_json::to_value(&config).map_err(CliError::output)?,
        inputs: serde_json::json!({}),
        outputs: serde_json::json!({ "corpus": args.out, "truth": truth_path }),
        objective: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    write_manifest(&args.out, &manifest)?;
    Ok(())
}
