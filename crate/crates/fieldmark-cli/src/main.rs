//! Command-line front end: synthesize datasets, train, evaluate, predict,
//! and inspect graph statistics.
//!
//! Exit codes: 0 on success, 1 for usage problems (bad flags or config
//! files), 2 for runtime failures (I/O, bad data, diverged training).
//! Every option can also come from a `--config` TOML or JSON file; command
//! line flags win over file values, and the effective configuration is
//! echoed into each artifact a command writes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fieldmark::data::{
    crowded_suite, default_suite, dense_suite, load_dataset, load_document, synth_generate,
    write_dataset, GeneratorEcho, TypeDocs,
};
use fieldmark::eval::{self, EvalSettings};
use fieldmark::graph::{build_graph, graph_stats, LabelSpace, RayConfig};
use fieldmark::model::{self, ModelConfig, UnarySource};
use fieldmark::train::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "fieldmark",
    about = "One-shot text field labeling on document graphs",
    version
)]
struct Cli {
    /// RNG seed (overrides any config-file value).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML or JSON file with default option values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Suppress progress chatter on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into a directory.
    Synth(SynthArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Label one query document from support document(s).
    Predict(PredictArgs),
    /// Print document graph statistics for a dataset.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Template family: default, crowded, or dense.
    #[arg(long)]
    preset: Option<String>,
    /// Documents per template type.
    #[arg(long)]
    per_type: Option<usize>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path; the loss trace lands next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lr_period: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Also write the checkpoint every N iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Comma-separated MLP hidden widths, e.g. "16,16".
    #[arg(long)]
    hidden: Option<String>,
    /// Loopy refinement steps after the unary scores (0 disables).
    #[arg(long)]
    bp_steps: Option<usize>,
    /// Pool landmark features before attention instead of after.
    #[arg(long)]
    avg_attention: bool,
    /// Unary source: lfattn or uniform.
    #[arg(long)]
    unary: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Report directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Supports per prediction: 1 or 5.
    #[arg(long)]
    shots: Option<usize>,
    /// Exclude regions whose ground truth is background.
    #[arg(long)]
    drop_background: bool,
    /// Remove N matched landmark pairs per support/query pair.
    #[arg(long)]
    landmark_drop: Option<usize>,
    /// Evaluate the train split instead of the test split.
    #[arg(long)]
    train_split: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Support document JSON (repeat for few-shot).
    #[arg(long = "support", required = true)]
    supports: Vec<PathBuf>,
    /// Query document JSON.
    #[arg(long)]
    query: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
}

/// Optional values a `--config` file may provide.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    preset: Option<String>,
    per_type: Option<usize>,
    iterations: Option<usize>,
    batch_size: Option<usize>,
    base_lr: Option<f64>,
    lr_decay: Option<f64>,
    lr_period: Option<usize>,
    momentum: Option<f64>,
    checkpoint_every: Option<usize>,
    hidden: Option<Vec<usize>>,
    bp_steps: Option<usize>,
    avg_before_attention: Option<bool>,
    unary: Option<String>,
    shots: Option<usize>,
    drop_background: Option<bool>,
    landmark_drop: Option<usize>,
}

enum CliError {
    /// Bad invocation: malformed flags or config files. Exit 1.
    Usage(String),
    /// The command itself failed. Exit 2.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<fieldmark::Error> for CliError {
    fn from(e: fieldmark::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .map_err(|e| usage(format!("invalid TOML config {}: {e}", path.display()))),
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid JSON config {}: {e}", path.display()))),
        _ => Err(usage(format!(
            "config file {} must end in .toml or .json",
            path.display()
        ))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = load_file_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let quiet = cli.quiet;
    match cli.command {
        Command::Synth(args) => cmd_synth(args, &file, seed, quiet),
        Command::Train(args) => cmd_train(args, &file, seed, quiet),
        Command::Eval(args) => cmd_eval(args, &file, seed, quiet),
        Command::Predict(args) => cmd_predict(args, quiet),
        Command::Stats(args) => cmd_stats(args),
    }
}

fn cmd_synth(args: SynthArgs, file: &FileConfig, seed: u64, quiet: bool) -> Result<(), CliError> {
    let preset = args
        .preset
        .or_else(|| file.preset.clone())
        .unwrap_or_else(|| "default".to_string());
    let specs = match preset.as_str() {
        "default" => default_suite(),
        "crowded" => crowded_suite(),
        "dense" => dense_suite(),
        other => return Err(usage(format!("unknown preset `{other}` (try default, crowded, dense)"))),
    };
    let per_type = args.per_type.or(file.per_type).unwrap_or(30);

    if args.out.exists() {
        let occupied = std::fs::read_dir(&args.out)?.next().is_some();
        if occupied && !args.force {
            return Err(CliError::Runtime(format!(
                "output directory {} is not empty (pass --force to write anyway)",
                args.out.display()
            )));
        }
    }

    let types = synth_generate(&specs, per_type, seed)?;
    let echo = GeneratorEcho { preset, templates: specs.len(), per_type, seed };
    write_dataset(&types, Some(echo), &args.out)?;
    if !quiet {
        let n: usize = types.iter().map(|t| t.docs.len()).sum();
        eprintln!("wrote {n} documents across {} types to {}", types.len(), args.out.display());
    }
    Ok(())
}

fn parse_hidden(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("--hidden wants comma-separated widths, got `{s}`")))
}

fn parse_unary(s: &str) -> Result<UnarySource, CliError> {
    match s {
        "lfattn" => Ok(UnarySource::LfAttn),
        "uniform" => Ok(UnarySource::Uniform),
        other => Err(usage(format!("unknown unary source `{other}` (try lfattn or uniform)"))),
    }
}

fn cmd_train(args: TrainArgs, file: &FileConfig, seed: u64, quiet: bool) -> Result<(), CliError> {
    let defaults = TrainConfig::default();
    let model_defaults = ModelConfig::default();
    let hidden = match &args.hidden {
        Some(s) => parse_hidden(s)?,
        None => file.hidden.clone().unwrap_or(model_defaults.hidden),
    };
    let unary = match &args.unary {
        Some(s) => parse_unary(s)?,
        None => match &file.unary {
            Some(s) => parse_unary(s)?,
            None => model_defaults.unary_source,
        },
    };
    let config = TrainConfig {
        iterations: args.iterations.or(file.iterations).unwrap_or(defaults.iterations),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        base_lr: args.base_lr.or(file.base_lr).unwrap_or(defaults.base_lr),
        lr_decay: args.lr_decay.or(file.lr_decay).unwrap_or(defaults.lr_decay),
        lr_period: args.lr_period.or(file.lr_period).unwrap_or(defaults.lr_period),
        momentum: args.momentum.or(file.momentum).unwrap_or(defaults.momentum),
        seed,
        checkpoint_every: args
            .checkpoint_every
            .or(file.checkpoint_every)
            .unwrap_or(defaults.checkpoint_every),
        model: ModelConfig {
            hidden,
            bp_steps: args.bp_steps.or(file.bp_steps).unwrap_or(model_defaults.bp_steps),
            avg_before_attention: args.avg_attention
                || file.avg_before_attention.unwrap_or(model_defaults.avg_before_attention),
            unary_source: unary,
        },
    };

    let dataset = load_dataset(&args.data)?;
    let types = dataset.train_types();
    if types.is_empty() {
        return Err(CliError::Runtime(format!(
            "dataset {} has no train-split types",
            args.data.display()
        )));
    }

    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let ray = RayConfig::default();
    let mut trainer = Trainer::new(config.clone());
    let out = args.out.clone();
    let trace = trainer.run(&types, &ray, |t| {
        save_checkpoint(&t.checkpoint(), &out)?;
        Ok(())
    })?;
    save_checkpoint(&trainer.checkpoint(), &args.out)?;

    // Loss trace CSV next to the checkpoint, with the effective config on
    // a leading comment line.
    let mut csv = format!(
        "# {}\niteration,lr,loss\n",
        serde_json::to_string(&config).map_err(fieldmark::Error::from)?
    );
    for row in &trace {
        csv.push_str(&format!("{},{},{}\n", row.iteration, row.lr, row.loss));
    }
    let trace_path = args.out.with_extension("loss.csv");
    std::fs::write(&trace_path, csv)?;

    if !quiet {
        let last = trace.last().map(|r| r.loss);
        eprintln!(
            "trained {} iterations (final loss {}); checkpoint at {}, trace at {}",
            trace.len(),
            last.map_or("n/a".to_string(), |l| format!("{l:.4}")),
            args.out.display(),
            trace_path.display()
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, file: &FileConfig, seed: u64, quiet: bool) -> Result<(), CliError> {
    let settings = EvalSettings {
        shots: args.shots.or(file.shots).unwrap_or(1),
        drop_background: args.drop_background || file.drop_background.unwrap_or(false),
        landmark_drop: args.landmark_drop.or(file.landmark_drop).unwrap_or(0),
        seed,
    };
    let dataset = load_dataset(&args.data)?;
    let types: Vec<&TypeDocs> =
        if args.train_split { dataset.train_types() } else { dataset.test_types() };
    if types.is_empty() {
        let which = if args.train_split { "train" } else { "test" };
        return Err(CliError::Runtime(format!(
            "dataset {} has no {which}-split types",
            args.data.display()
        )));
    }
    let ck = load_checkpoint(&args.model)?;
    let report = eval::evaluate(&types, &ck.params, &settings, &RayConfig::default())?;

    std::fs::create_dir_all(&args.out)?;
    let mut json = serde_json::to_vec_pretty(&report).map_err(fieldmark::Error::from)?;
    json.push(b'\n');
    std::fs::write(args.out.join("report.json"), json)?;
    let table = eval::render_table(&report);
    std::fs::write(args.out.join("report.txt"), &table)?;
    for t in &report.types {
        std::fs::write(
            args.out.join(format!("confusion_{}.csv", t.type_id)),
            eval::confusion_csv(t),
        )?;
    }
    if !quiet {
        print!("{table}");
        eprintln!("report written to {}", args.out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictedRegion {
    id: String,
    label: String,
    prob: f64,
}

#[derive(Serialize)]
struct PredictOutput {
    query: String,
    supports: Vec<String>,
    model_config: ModelConfig,
    regions: Vec<PredictedRegion>,
}

fn cmd_predict(args: PredictArgs, quiet: bool) -> Result<(), CliError> {
    let supports: Vec<_> =
        args.supports.iter().map(|p| load_document(p)).collect::<Result<_, _>>()?;
    let query = load_document(&args.query)?;
    let ck = load_checkpoint(&args.model)?;

    let support_refs: Vec<&_> = supports.iter().collect();
    let prediction =
        model::fewshot_predict(&support_refs, &query, &ck.params, &RayConfig::default())?;

    let k = prediction.label_space.len();
    let regions = prediction
        .region_ids
        .iter()
        .zip(&prediction.labels)
        .enumerate()
        .map(|(i, (id, &y))| PredictedRegion {
            id: id.clone(),
            label: prediction.label_space.name(y).to_string(),
            prob: prediction.probs.data()[i * k..(i + 1) * k]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    let out = PredictOutput {
        query: query.doc_id.clone(),
        supports: supports.iter().map(|s| s.doc_id.clone()).collect(),
        model_config: ck.params.config.clone(),
        regions,
    };
    let mut json = serde_json::to_vec_pretty(&out).map_err(fieldmark::Error::from)?;
    json.push(b'\n');
    match &args.out {
        Some(path) => {
            std::fs::write(path, json)?;
            if !quiet {
                eprintln!("prediction written to {}", path.display());
            }
        }
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&json)?;
        }
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.data)?;
    let ray = RayConfig::default();
    println!(
        "{:<20} {:>7} {:>7} {:>7} {:>8} {:>11}",
        "doc", "fields", "edges", "beta", "sparse", "reduction"
    );
    let mut beta_sum = 0.0;
    let mut red_sum = 0.0;
    let mut n = 0usize;
    for t in &dataset.types {
        for doc in &t.docs {
            let space = LabelSpace::from_document(doc);
            let g = build_graph(doc, None, &space, &ray)?;
            let s = graph_stats(&g, space.len());
            println!(
                "{:<20} {:>7} {:>7} {:>7.2} {:>8} {:>10.1}%",
                doc.doc_id,
                s.n_fields,
                s.n_ff_edges,
                s.beta,
                s.mem_sparse_units,
                100.0 * s.reduction
            );
            beta_sum += s.beta;
            red_sum += s.reduction;
            n += 1;
        }
    }
    if n > 0 {
        println!(
            "{:<20} {:>7} {:>7} {:>7.2} {:>8} {:>10.1}%",
            "mean",
            "",
            "",
            beta_sum / n as f64,
            "",
            100.0 * red_sum / n as f64
        );
    }
    Ok(())
}
