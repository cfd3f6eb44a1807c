//! Command-line pipeline: synth → ingest → pretrain → train → evaluate/compare,
//! plus the end-to-end `experiment`.

pub mod config;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clickdrop::clickstream::{parse_events, CourseVocab, Dataset, InputFormat, ParseOptions};
use clickdrop::dropout::{parse_predictions_tsv, predictions_tsv, train_dropout, DropoutPredictor, PretrainedTables};
use clickdrop::experiment::run_experiment_full;
use clickdrop::metrics::{auc, paired_bootstrap, ScoredInstance};
use clickdrop::ngram::{train_ngram_embeddings, NGramEmbeddingModel, PretrainCorpus};
use clickdrop::persist::{tsv, write_atomic};
use clickdrop::synth::{generate, signal_check, GroundTruth, SignalStatus};
use clickdrop::video::{build_embedding_set, train_video_classifier, VideoEmbeddingSet};
use serde::Serialize;
use serde_json::{json, Value};

use config::{parse_override, ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "clickdrop", version, about = "Dropout prediction from MOOC clickstreams")]
pub struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set dropout.d_h=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override, global = true)]
    set: Vec<(String, String)>,
    /// Master seed (same as `--set seed=..`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// N-gram order (same as `--set n=..`).
    #[arg(short = 'n', long = "order", global = true)]
    n: Option<usize>,
    /// Model variant a, b, c or d (same as `--set variant=..`).
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Output directory.
    #[arg(long, short, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted signal.
    Synth,
    /// Parse events into a training dataset.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Take course start and horizon from a synthetic truth sidecar.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Pretrain click n-gram embeddings.
    PretrainNgrams {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Pretrain video embeddings from a video-label classifier.
    PretrainVideos {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ngram_model: PathBuf,
    },
    /// Train one dropout predictor variant on every instance of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ngram_model: Option<PathBuf>,
        #[arg(long)]
        video_emb: Option<PathBuf>,
    },
    /// AUC of a predictions file, or of a model scored on a dataset.
    Evaluate {
        #[arg(long, conflicts_with_all = ["model", "dataset"])]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        dataset: Option<PathBuf>,
    },
    /// Paired user-level bootstrap of the AUC difference `b − a`.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Compare all four variants across several seeds.
    Experiment {
        /// Ingested dataset; a synthetic corpus is generated when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] clickdrop::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(n) = common.n {
        overrides.push(("n".into(), n.to_string()));
    }
    if let Some(v) = &common.variant {
        overrides.push(("variant".into(), json!(v).to_string()));
    }
    Ok(RunConfig::resolve(common.config.as_deref(), &overrides)?)
}

fn execute(cli: Cli) -> CliResult<()> {
    let config = resolve(&cli.common)?;
    let out = cli.common.out.as_path();
    std::fs::create_dir_all(out).map_err(|source| CliError::Io { path: out.to_path_buf(), source })?;
    match cli.command {
        Command::Synth => synth(&config, out),
        Command::Ingest { input, format, truth } => ingest(&config, out, &input, format, truth.as_deref()),
        Command::PretrainNgrams { dataset } => pretrain_ngrams(&config, out, &dataset),
        Command::PretrainVideos { dataset, ngram_model } => pretrain_videos(&config, out, &dataset, &ngram_model),
        Command::Train { dataset, ngram_model, video_emb } => {
            train(&config, out, &dataset, ngram_model.as_deref(), video_emb.as_deref())
        }
        Command::Evaluate { predictions, model, dataset } => match (predictions, model, dataset) {
            (Some(p), _, _) => evaluate_predictions(&config, out, &p),
            (None, Some(m), Some(d)) => evaluate_model(&config, out, &m, &d),
            _ => Err(ConfigError::new("evaluate", "pass --predictions, or --model with --dataset").into()),
        },
        Command::Compare { a, b } => compare(&config, out, &a, &b),
        Command::Experiment { dataset } => experiment(&config, out, dataset.as_deref()),
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn read_string(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write(out: &Path, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
    let path = out.join(name);
    write_atomic(&path, bytes.as_ref())?;
    Ok(path)
}

fn write_json(out: &Path, name: &str, value: &impl Serialize) -> CliResult<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(clickdrop::Error::from)?;
    text.push('\n');
    write(out, name, text)
}

/// Report body with the resolved configuration echoed first.
fn report(command: &str, config: &RunConfig, body: Value) -> Value {
    let mut v = json!({ "command": command, "config": config });
    if let (Some(dst), Value::Object(src)) = (v.as_object_mut(), body) {
        dst.extend(src);
    }
    v
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::from_json(&read_string(path)?)?)
}

fn check_order(config: &RunConfig, dataset: &Dataset) -> CliResult<()> {
    if dataset.vocab.n != config.n {
        return Err(ConfigError::new(
            "n",
            format!("dataset was ingested with n = {} but the config says {}", dataset.vocab.n, config.n),
        )
        .into());
    }
    Ok(())
}

fn synth(config: &RunConfig, out: &Path) -> CliResult<()> {
    let corpus = generate(&config.synth)?;
    let events = write(out, "events.jsonl", corpus.to_jsonl()?)?;
    write_json(out, "truth.json", &corpus.truth)?;
    let signal = signal_check(&corpus.events, &corpus.truth);
    write_json(out, "signal.json", &signal)?;
    println!("wrote {} events for {} users to {}", corpus.events.len(), corpus.truth.users.len(), events.display());
    match &signal.status {
        SignalStatus::Ok => println!("signal check: ok"),
        SignalStatus::Failed { reasons } => eprintln!("warning: signal check FAILED: {}", reasons.join("; ")),
        SignalStatus::InsufficientData { reason } => eprintln!("warning: signal check: insufficient data ({reason})"),
    }
    Ok(())
}

fn ingest_events(
    config: &RunConfig,
    input: &Path,
    format: Option<Format>,
    truth: Option<&Path>,
) -> CliResult<(Dataset, Vec<clickdrop::clickstream::Rejection>)> {
    let (course_start, horizon) = match truth {
        Some(p) => {
            let t: GroundTruth = serde_json::from_str(&read_string(p)?).map_err(clickdrop::Error::from)?;
            (t.course_start, t.horizon)
        }
        None => (config.course_start, config.horizon),
    };
    let format = match format {
        Some(Format::Csv) => InputFormat::Csv,
        Some(Format::Jsonl) => InputFormat::Jsonl,
        None if input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => InputFormat::Csv,
        None => InputFormat::Jsonl,
    };
    let file = File::open(input).map_err(|source| CliError::Io { path: input.to_path_buf(), source })?;
    let opts = ParseOptions { n: config.n, course_start, horizon };
    let parsed = parse_events(BufReader::new(file), format, &opts)?;
    let dataset = Dataset::from_events(&parsed.events, parsed.vocab)?;
    Ok((dataset, parsed.rejected))
}

fn ingest(config: &RunConfig, out: &Path, input: &Path, format: Option<Format>, truth: Option<&Path>) -> CliResult<()> {
    let (dataset, rejected) = ingest_events(config, input, format, truth)?;
    write_json(out, "dataset.json", &dataset)?;
    write_json(out, "vocab.json", &dataset.vocab.to_json_map())?;
    write(out, "rejects.tsv", tsv(rejected.iter().map(|r| [r.line.to_string(), r.reason.clone()])))?;
    let positives = dataset.instances.iter().filter(|i| i.label).count();
    println!(
        "{} instances ({positives} dropouts), {} videos, {} video sequences, {} rejected lines, {} events past the horizon",
        dataset.instances.len(),
        dataset.vocab.num_videos(),
        dataset.video_sequences.len(),
        rejected.len(),
        dataset.dropped_events
    );
    Ok(())
}

fn pretrain_ngrams(config: &RunConfig, out: &Path, dataset: &Path) -> CliResult<()> {
    let dataset = load_dataset(dataset)?;
    check_order(config, &dataset)?;
    let corpus = PretrainCorpus::from_instances(config.n, &dataset.instances)?;
    let (model, rep) = train_ngram_embeddings(&corpus, &config.ngram)?;
    write(out, "ngram_model.bin", model.to_bytes())?;
    write(out, "ngram_embeddings.tsv", model.embeddings_tsv())?;
    write_json(out, "ngram_report.json", &report("pretrain-ngrams", config, json!({ "training": rep })))?;
    println!(
        "n-gram objective {:.4} -> {:.4} over {} epochs",
        rep.initial_loss,
        rep.epoch_losses.last().copied().unwrap_or(rep.initial_loss),
        rep.epoch_losses.len()
    );
    Ok(())
}

fn load_ngram_model(path: &Path, n: usize) -> CliResult<NGramEmbeddingModel> {
    let model = NGramEmbeddingModel::from_bytes(&read(path)?)?;
    if model.n() != n {
        return Err(ConfigError::new("n", format!("{} has n = {}, config says {n}", path.display(), model.n())).into());
    }
    Ok(model)
}

fn pretrain_videos(config: &RunConfig, out: &Path, dataset: &Path, ngram_model: &Path) -> CliResult<()> {
    let dataset = load_dataset(dataset)?;
    check_order(config, &dataset)?;
    let ngram = load_ngram_model(ngram_model, config.n)?;
    let table = ngram.export_embeddings();
    let (clf, rep) =
        train_video_classifier(&dataset.video_sequences, dataset.vocab.num_videos(), &table, &config.video)?;
    let set = build_embedding_set(&clf, &config.extract, &dataset.vocab.video_ids)?;
    write(out, "video_emb.bin", set.to_bytes())?;
    write(out, "video_emb.tsv", set.to_tsv())?;
    write_json(out, "video_report.json", &report("pretrain-videos", config, json!({ "training": rep })))?;
    println!("video classifier accuracy {:.4} on {} sequences", rep.train_accuracy, rep.sequences);
    Ok(())
}

fn train(
    config: &RunConfig,
    out: &Path,
    dataset: &Path,
    ngram_model: Option<&Path>,
    video_emb: Option<&Path>,
) -> CliResult<()> {
    let dataset = load_dataset(dataset)?;
    check_order(config, &dataset)?;
    let variant = config.variant;
    let ngram = match ngram_model {
        Some(p) if variant.pretrained_ngrams() => Some(load_ngram_model(p, config.n)?.export_embeddings()),
        None if variant.pretrained_ngrams() => {
            return Err(ConfigError::new("ngram_model", format!("variant {variant} needs --ngram-model")).into())
        }
        _ => None,
    };
    let video = match video_emb {
        Some(p) if variant.pretrained_video() => Some(VideoEmbeddingSet::from_bytes(&read(p)?)?),
        None if variant.pretrained_video() => {
            return Err(ConfigError::new("video_emb", format!("variant {variant} needs --video-emb")).into())
        }
        _ => None,
    };
    if let Some(v) = &video {
        if v.video_ids != dataset.vocab.video_ids {
            return Err(CliError::Runtime("video embeddings were built for a different video vocabulary".into()));
        }
    }
    let tables = PretrainedTables { ngram: ngram.as_ref(), video: video.as_ref().map(|v| &v.table) };
    let mut dcfg = config.dropout.clone();
    if let Some(v) = &video {
        dcfg.d_v = v.dim();
    }
    let (model, rep) =
        train_dropout(variant, config.n, dataset.vocab.num_videos(), &dataset.instances, tables, &dcfg, None)?;
    write(out, &format!("predictor_{variant}.bin"), model.to_bytes())?;
    write_json(out, &format!("train_{variant}.json"), &report("train", config, json!({ "training": rep })))?;
    println!("variant {variant}: pair loss {:.4} -> {:.4} on {} pairs", rep.initial_loss, rep.final_loss, rep.pairs);
    Ok(())
}

fn evaluation_body(scored: &[ScoredInstance]) -> CliResult<Value> {
    let positives = scored.iter().filter(|s| s.label).count();
    Ok(json!({ "auc": auc(scored)?, "instances": scored.len(), "positives": positives }))
}

fn evaluate_predictions(config: &RunConfig, out: &Path, predictions: &Path) -> CliResult<()> {
    let scored = parse_predictions_tsv(&read_string(predictions)?)?;
    let mut body = evaluation_body(&scored)?;
    body["predictions"] = json!(predictions.display().to_string());
    write_json(out, "evaluation.json", &report("evaluate", config, body.clone()))?;
    println!("AUC {:.6}", body["auc"].as_f64().unwrap_or(f64::NAN));
    Ok(())
}

fn evaluate_model(config: &RunConfig, out: &Path, model: &Path, dataset: &Path) -> CliResult<()> {
    let predictor = DropoutPredictor::from_bytes(&read(model)?)?;
    let dataset = load_dataset(dataset)?;
    let scored = predictor.score(&dataset.instances)?;
    let variant = predictor.variant();
    write(out, &format!("predictions_{variant}.tsv"), predictions_tsv(&scored))?;
    let mut body = evaluation_body(&scored)?;
    body["variant"] = json!(variant);
    write_json(out, "evaluation.json", &report("evaluate", config, body.clone()))?;
    println!("variant {variant}: AUC {:.6}", body["auc"].as_f64().unwrap_or(f64::NAN));
    Ok(())
}

fn compare(config: &RunConfig, out: &Path, a: &Path, b: &Path) -> CliResult<()> {
    let sa = parse_predictions_tsv(&read_string(a)?)?;
    let sb = parse_predictions_tsv(&read_string(b)?)?;
    let rep = paired_bootstrap(&sa, &sb, config.bootstrap_replicates, config.seed)?;
    write_json(out, "comparison.json", &report("compare", config, json!({ "comparison": rep })))?;
    println!("AUC a {:.4}, b {:.4}, delta {:+.4}, p = {:.4}", rep.auc_a, rep.auc_b, rep.delta, rep.p_value);
    Ok(())
}

fn experiment(config: &RunConfig, out: &Path, dataset: Option<&Path>) -> CliResult<()> {
    let start = Instant::now();
    let dataset = match dataset {
        Some(p) => {
            let d = load_dataset(p)?;
            check_order(config, &d)?;
            d
        }
        None => {
            let corpus = generate(&config.synth)?;
            write(out, "events.jsonl", corpus.to_jsonl()?)?;
            write_json(out, "truth.json", &corpus.truth)?;
            let vocab = CourseVocab::new(
                corpus.truth.videos.iter().map(|v| v.video_id.clone()).collect(),
                config.n,
                corpus.truth.course_start,
                corpus.truth.horizon,
            )?;
            let d = Dataset::from_events(&corpus.events, vocab)?;
            eprintln!(
                "generated {} events, {} instances ({:.1}s)",
                corpus.events.len(),
                d.instances.len(),
                start.elapsed().as_secs_f64()
            );
            d
        }
    };
    let output = run_experiment_full(&dataset, &config.experiment(), |line| {
        eprintln!("{line} ({:.1}s)", start.elapsed().as_secs_f64());
    })?;
    let first = &output.first_run;
    write(out, "ngram_model.bin", first.ngram_model.to_bytes())?;
    write(out, "video_emb.bin", first.video_embeddings.to_bytes())?;
    for (v, model) in &first.predictors {
        write(out, &format!("predictor_{v}.bin"), model.to_bytes())?;
    }
    for (v, scored) in &output.averaged_scores {
        write(out, &format!("predictions_{v}.tsv"), predictions_tsv(scored))?;
    }
    let mut body = serde_json::to_value(&output.report).map_err(clickdrop::Error::from)?;
    if let Some(obj) = body.as_object_mut() {
        obj.remove("config");
    }
    write_json(out, "report.json", &report("experiment", config, body))?;
    for (v, s) in &output.report.variants {
        println!("({v}) {:<48} AUC {:.4} ± {:.4}", s.description, s.mean_auc, s.std_auc);
    }
    for c in &output.report.comparisons {
        println!("({}) vs ({}): delta {:+.4}, p = {:.4}", c.b, c.a, c.report.delta, c.report.p_value);
    }
    eprintln!("finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
