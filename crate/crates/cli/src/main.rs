//! Command-line front end: synthetic corpora, CF pretraining, training,
//! evaluation, completion and explanation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bundlekit::cf::{pretrain, CfEmbeddings};
use bundlekit::config::apply_overrides;
use bundlekit::corpus::{split_indices, Corpus};
use bundlekit::eval::{evaluate, explain, rank_candidates, ModelScorer, Setting};
use bundlekit::numerics::NumericsError;
use bundlekit::synth::{generate, SynthSpec};
use bundlekit::trainer::{eval_options, fit};
use bundlekit::{Checkpoint, Model, ModelError, RunConfig};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "bundlekit", version, about = "Bundle completion from partial item sets")]
struct Cli {
    /// Caps the evaluation thread pool (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log progress at info level (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a manifest of its planted structure.
    Synth {
        /// JSON generator spec; missing keys take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Spec overrides as key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Pretrain collaborative-filtering item embeddings.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Propagation layers.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the completion model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cf: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log; defaults to the checkpoint path with a
        /// `.log.jsonl` extension.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on the test bundles.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// standard, warm, sparsify or noisify.
        #[arg(long, default_value = "standard")]
        setting: String,
        /// Corruption rate for sparsify and noisify.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the top-k completions of a seed set.
    Complete {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated item tokens.
        #[arg(long)]
        seeds: String,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Print feature and item similarity tables of a bundle as JSON.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Bundle token.
        #[arg(long)]
        bundle: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as dotted key=value, e.g. `train.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, threads: usize) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let mut config = base.with_overrides(&self.overrides)?;
        if threads > 0 {
            config.eval.threads = threads;
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if closed_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// The reader of stdout went away (e.g. `| head`).
fn closed_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|cause| matches!(cause.downcast_ref::<std::io::Error>(), Some(e) if e.kind() == std::io::ErrorKind::BrokenPipe))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|cause| {
        cause.downcast_ref::<NumericsError>().is_some()
            || matches!(cause.downcast_ref::<ModelError>(), Some(ModelError::Diverged { .. } | ModelError::Numerics(_)))
    });
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, overrides } => synth(spec.as_deref(), &out, &overrides),
        Command::Pretrain {
            data,
            out,
            k,
            epochs,
            lr,
            run,
        } => {
            let mut config = run.resolve(cli.threads)?;
            config.cf.layers = k.unwrap_or(config.cf.layers);
            config.cf.epochs = epochs.unwrap_or(config.cf.epochs);
            config.cf.lr = lr.unwrap_or(config.cf.lr);
            cf_pretrain(&data, &out, &config)
        }
        Command::Train {
            data,
            cf,
            out,
            log,
            epochs,
            run,
        } => {
            let mut config = run.resolve(cli.threads)?;
            config.train.epochs = epochs.unwrap_or(config.train.epochs);
            let log = log.unwrap_or_else(|| out.with_extension("log.jsonl"));
            train(&data, &cf, &out, &log, &config)
        }
        Command::Eval {
            model,
            data,
            setting,
            rate,
            k,
            out,
        } => eval(&model, &data, &parse_setting(&setting, rate)?, k, &out, cli.threads),
        Command::Complete { model, data, seeds, k } => complete(&model, &data, &seeds, k),
        Command::Explain { model, data, bundle } => explain_bundle(&model, &data, &bundle),
    }
}

fn synth(spec: Option<&Path>, out: &Path, overrides: &[String]) -> Result<()> {
    let base = match spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SynthSpec::default(),
    };
    let spec: SynthSpec = apply_overrides(&base, overrides)?;
    let output = generate(&spec)?;
    output.write_dir(out)?;
    let c = &output.manifest.counts;
    log::info!(
        "wrote {} items, {} bundles, {} interactions to {}; oracle recall@20 {:.4}",
        c.items,
        c.bundles,
        c.user_items,
        out.display(),
        output.manifest.oracle_recall20
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load_dir(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn cf_pretrain(data: &Path, out: &Path, config: &RunConfig) -> Result<()> {
    let corpus = load_corpus(data)?;
    if corpus.interactions.edges.is_empty() {
        log::warn!("no interactions; embeddings untrained");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cf = pretrain(&corpus.interactions, &config.cf, &mut rng);
    cf.save(out).with_context(|| format!("writing {}", out.display()))?;
    log::info!(
        "wrote {}×{} item and {}×{} user embeddings to {}",
        cf.items.rows(),
        cf.dim(),
        cf.users.rows(),
        cf.dim(),
        out.display()
    );
    Ok(())
}

fn train(data: &Path, cf_path: &Path, out: &Path, log_path: &Path, config: &RunConfig) -> Result<()> {
    let corpus = load_corpus(data)?;
    let cf = CfEmbeddings::load(cf_path).with_context(|| format!("loading {}", cf_path.display()))?;
    let file = File::create(log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{}", serde_json::json!({ "config": config }))?;
    let mut write_err = None;
    let fitted = fit(&corpus, &cf, config, &mut |line| {
        if write_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, line).map_err(std::io::Error::from).and_then(|()| writeln!(log)) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush()?;
    fitted.checkpoint.save(out)?;
    let meta = &fitted.checkpoint.meta;
    log::info!(
        "best epoch {}: val recall@20 {:.4} ndcg@20 {:.4}",
        meta.epoch,
        meta.val_recall20.unwrap_or(0.0),
        meta.val_ndcg20.unwrap_or(0.0)
    );
    Ok(())
}

fn parse_setting(name: &str, rate: Option<f64>) -> Result<Setting> {
    Ok(match (name, rate) {
        ("standard", None) => Setting::Standard,
        ("warm", None) => Setting::Warm,
        ("sparsify", Some(r)) => Setting::Sparsify(r),
        ("noisify", Some(r)) => Setting::Noisify(r),
        ("sparsify" | "noisify", None) => bail!("--setting {name} needs --rate"),
        ("standard" | "warm", Some(_)) => bail!("--rate only applies to sparsify and noisify"),
        _ => name.parse()?,
    })
}

fn load_model(path: &Path, corpus: &Corpus) -> Result<Model> {
    let checkpoint = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(checkpoint.into_model(&corpus.features)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn eval(model_path: &Path, data: &Path, setting: &Setting, k: usize, out: &Path, threads: usize) -> Result<()> {
    let corpus = load_corpus(data)?;
    let checkpoint = Checkpoint::load(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let warm = checkpoint.warm.clone();
    let model = checkpoint.into_model(&corpus.features)?;
    let mut config = model.config.clone();
    if threads > 0 {
        config.eval.threads = threads;
    }
    let split = split_indices(corpus.catalog.bundles.len(), config.split_seed)?;
    let scorer = ModelScorer::new(&model)?;
    let mut report = evaluate(&scorer, &corpus.catalog, &split.test, &warm, *setting, &eval_options(&config, k))?;
    report.config = Some(serde_json::to_value(&model.config)?);
    write_json(out, &report)?;
    log::info!(
        "{}: recall@{k} {:.4} ndcg@{k} {:.4} over {} bundles",
        report.setting,
        report.recall,
        report.ndcg,
        report.n_bundles
    );
    Ok(())
}

fn complete(model_path: &Path, data: &Path, seeds: &str, k: usize) -> Result<()> {
    let corpus = load_corpus(data)?;
    let model = load_model(model_path, &corpus)?;
    let items = &corpus.catalog.items;
    let mut indices: Vec<usize> = Vec::new();
    for token in seeds.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let Some(i) = items.get(token) else {
            bail!("unknown item token `{token}`");
        };
        if indices.contains(&i) {
            log::warn!("duplicate seed `{token}` ignored");
        } else {
            indices.push(i);
        }
    }
    if indices.is_empty() {
        bail!("no seed items given");
    }
    let table = model.item_table()?;
    let scores = model.scores(&table.table, &indices)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for i in rank_candidates(&scores, &indices, k) {
        writeln!(out, "{}\t{:.6}", items.token(i), scores[i])?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ExplainLine<'a> {
    level: &'a str,
    item: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature: Option<&'a str>,
    cosine: f64,
}

fn explain_bundle(model_path: &Path, data: &Path, bundle: &str) -> Result<()> {
    let corpus = load_corpus(data)?;
    let model = load_model(model_path, &corpus)?;
    let Some(b) = corpus.catalog.bundle_index(bundle) else {
        bail!("unknown bundle `{bundle}`");
    };
    let items = &corpus.catalog.bundles[b].items;
    let rows = explain(&model, items)?;
    let lines: Vec<ExplainLine> = rows
        .iter()
        .map(|r| ExplainLine {
            level: &r.level,
            item: corpus.catalog.items.token(r.item),
            feature: r.feature.as_deref(),
            cosine: r.cosine,
        })
        .collect();
    let doc = serde_json::json!({ "bundle": bundle, "rows": lines });
    writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}
