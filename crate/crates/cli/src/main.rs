use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use tracing_subscriber::EnvFilter;

use mind2_core::bck::{extract_corpus, term_stats, BckStore, ExtractOptions, ExtractionCache};
use mind2_core::corpus::{load_corpus, sample_split_with, save_jsonl, CorpusSplit, SplitOptions};
use mind2_core::discourse::DEFAULT_SPAN;
use mind2_core::linearize::{export_training_jsonl, AblationMask};
use mind2_core::metrics::{evaluate, EvalPair, Labeled, MetricOptions, MetricReport, ReportMeta};
use mind2_core::runner::{
    render_dir, run_ablation_grid, run_fraction_sweep, run_generation, BackendSpec, EvalTurns, PredictionRecord,
    RunSpec,
};
use mind2_service::{AppState, JsonlStore, ServiceConfig, TOKEN_ENV};

#[derive(Parser)]
#[command(name = "mind2", version, about = "Emotional-support dialogue pipeline toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus (ESConv JSON or JSONL) and write normalized JSONL.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write seeded train/validation/test splits.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Extract cognitive knowledge for every utterance of a corpus.
    Extract {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        backend: BackendArg,
        #[arg(long, default_value_t = DEFAULT_SPAN)]
        span: usize,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        /// Extraction cache; reruns only call the backend for missing entries.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Export linearized (Ω, target) training pairs.
    Linearize {
        #[arg(long)]
        corpus: PathBuf,
        /// Knowledge store written by `extract`.
        #[arg(long)]
        bck: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        mask: AblationMask,
        /// Whitespace-token budget for Ω.
        #[arg(long, default_value_t = 256)]
        budget: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a predictions file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        metrics: MetricArgs,
        #[arg(long)]
        json: bool,
    },
    /// Generate and evaluate over the test split.
    Run(RunArgs),
    /// One run per ablation mask.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// `all` for the seven standard configurations, or masks separated
        /// by `;` (e.g. `btm;btm,peu;full`).
        #[arg(long, default_value = "all")]
        masks: String,
    },
    /// One run per training fraction, with relative change rows.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.10,0.25,0.50,0.75,1.0")]
        fractions: Vec<f64>,
    },
    /// Print the results stored in an output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Serve the session HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[command(flatten)]
        backend: BackendArg,
        #[arg(long, env = "MIND2_DATA_DIR", default_value = "mind2-data")]
        data_dir: PathBuf,
    },
}

#[derive(Args)]
struct BackendArg {
    /// `mock`, `mock:<rules.json>`, `echo`, or an endpoint URL with an
    /// optional `#model` suffix.
    #[arg(long, env = "MIND2_BACKEND_URL", default_value = "mock")]
    backend: String,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    stratify: bool,
}

#[derive(Args, Clone)]
struct MetricArgs {
    /// `corpus` or `sentence`.
    #[arg(long)]
    bleu: Option<String>,
    /// `present` or `all`.
    #[arg(long)]
    f1_labels: Option<String>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Backend for both extraction and generation.
    #[arg(long, env = "MIND2_BACKEND_URL")]
    backend: Option<String>,
    #[arg(long)]
    extraction_backend: Option<String>,
    #[arg(long)]
    generation_backend: Option<String>,
    #[arg(long)]
    mask: Option<AblationMask>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    span: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    max_conversations: Option<usize>,
    /// Score only the final eligible System turn of each conversation.
    #[arg(long)]
    final_turn_only: bool,
    #[command(flatten)]
    metrics: MetricArgs,
}

fn enum_arg<T: DeserializeOwned>(name: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .with_context(|| format!("invalid --{name} value {value:?}"))
}

impl MetricArgs {
    fn apply(&self, mut opts: MetricOptions) -> Result<MetricOptions> {
        if let Some(b) = &self.bleu {
            opts.bleu = enum_arg("bleu", b)?;
        }
        if let Some(f) = &self.f1_labels {
            opts.f1_labels = enum_arg("f1-labels", f)?;
        }
        Ok(opts)
    }
}

impl RunArgs {
    fn to_spec(&self) -> Result<RunSpec> {
        let mut s = match &self.spec {
            Some(p) => RunSpec::load(p)?,
            None => RunSpec::default(),
        };
        if let Some(v) = &self.corpus {
            s.corpus = v.clone();
        }
        if let Some(v) = &self.out_dir {
            s.out_dir = v.clone();
        }
        if let Some(b) = &self.backend {
            s.extraction_backend = BackendSpec::parse(b)?;
            s.generation_backend = BackendSpec::parse(b)?;
        }
        if let Some(b) = &self.extraction_backend {
            s.extraction_backend = BackendSpec::parse(b)?;
        }
        if let Some(b) = &self.generation_backend {
            s.generation_backend = BackendSpec::parse(b)?;
        }
        if let Some(m) = self.mask {
            s.mask = m;
        }
        if let Some(f) = self.fraction {
            s.fraction = f;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.span {
            s.window_span = v;
        }
        if let Some(v) = self.concurrency {
            s.concurrency = v;
        }
        if self.max_conversations.is_some() {
            s.max_conversations = self.max_conversations;
        }
        if self.final_turn_only {
            s.eval_turns = EvalTurns::FinalOnly;
        }
        s.metrics = self.metrics.apply(s.metrics)?;
        s.validate()?;
        Ok(s)
    }
}

fn parse_masks(raw: &str) -> Result<Vec<AblationMask>> {
    if raw.trim().eq_ignore_ascii_case("all") {
        return Ok(AblationMask::ablation_grid());
    }
    raw.split(';')
        .map(|m| m.parse::<AblationMask>().with_context(|| format!("invalid mask {m:?}")))
        .collect()
}

fn write_split(split: &CorpusSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, list) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        save_jsonl(list, &dir.join(format!("{name}.jsonl")))?;
    }
    let manifest = serde_json::json!({
        "fraction": split.fraction,
        "seed": split.seed,
        "stratified": split.stratified,
        "full_train_size": split.full_train_size,
        "train": CorpusSplit::ids(&split.train),
        "validation": CorpusSplit::ids(&split.validation),
        "test": CorpusSplit::ids(&split.test),
    });
    fs::write(dir.join("split.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn eval_predictions(path: &Path, opts: MetricOptions) -> Result<MetricReport> {
    let records = read_predictions(path)?;
    let failed = records.iter().filter(|r| r.flags.error.is_some()).count();
    let pairs: Vec<EvalPair> = records
        .iter()
        .filter(|r| r.flags.error.is_none())
        .map(|r| EvalPair {
            conversation_id: r.conversation_id.clone(),
            turn: r.turn,
            generated: Labeled {
                strategy: r.strategy,
                response: r.response.clone(),
            },
            reference: Labeled {
                strategy: r.reference_strategy,
                response: r.reference_response.clone(),
            },
        })
        .collect();
    let values = evaluate(&pairs, None, &opts)?;
    let mut notes = vec!["PPL needs token logprobs and is not recomputed from predictions".to_string()];
    if failed > 0 {
        notes.push(format!("{failed} failed turns excluded"));
    }
    Ok(MetricReport {
        values,
        meta: ReportMeta {
            label: path.display().to_string(),
            pairs: pairs.len(),
            generation_backend: "predictions file".into(),
            scoring_backend: None,
            options: opts,
            notes,
        },
    })
}

fn serve(port: u16, host: &str, backend: &str, data_dir: &Path) -> Result<()> {
    let spec = BackendSpec::parse(backend)?;
    let backend = spec.build(&[])?;
    let store = Arc::new(JsonlStore::open(data_dir)?);
    let config = ServiceConfig {
        auth_token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        ..ServiceConfig::default()
    };
    let state = AppState::new(store, backend.clone(), backend, config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        tracing::info!("listening on {}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        mind2_service::serve(listener, state, shutdown).await?;
        Ok(())
    })
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest { input, output } => {
            let convs = load_corpus(&input)?;
            let mut invalid = 0;
            for c in &convs {
                if let Err(e) = c.validate() {
                    tracing::warn!(conversation = %c.id, "{e}");
                    invalid += 1;
                }
            }
            if invalid > 0 {
                bail!("{invalid} of {} conversations failed validation", convs.len());
            }
            save_jsonl(&convs, &output)?;
            let utterances: usize = convs.iter().map(|c| c.len()).sum();
            println!("{} conversations, {utterances} utterances -> {}", convs.len(), output.display());
        }
        Command::Split { corpus, split, out_dir } => {
            let convs = load_corpus(&corpus)?;
            let s = sample_split_with(
                &convs,
                &SplitOptions {
                    fraction: split.fraction,
                    seed: split.seed,
                    stratify: split.stratify,
                },
            )?;
            write_split(&s, &out_dir)?;
            println!(
                "train {} (of {}), validation {}, test {} -> {}",
                s.train.len(),
                s.full_train_size,
                s.validation.len(),
                s.test.len(),
                out_dir.display()
            );
        }
        Command::Extract {
            corpus,
            backend,
            span,
            concurrency,
            cache,
            output,
        } => {
            let convs = load_corpus(&corpus)?;
            let backend = BackendSpec::parse(&backend.backend)?.build(&convs)?;
            let cache = match cache {
                Some(p) => ExtractionCache::open(&p)?,
                None => ExtractionCache::in_memory(),
            };
            let opts = ExtractOptions {
                span,
                concurrency,
                ..ExtractOptions::default()
            };
            let ex = extract_corpus(&convs, &backend, &cache, &opts)?;
            ex.store.save_jsonl(&output)?;
            println!(
                "{} triplets -> {}; {} backend calls, {} cache hits, {} rejected terms, {} malformed outputs",
                ex.store.len(),
                output.display(),
                ex.backend_calls,
                ex.cache_hits,
                ex.rejected_terms,
                ex.malformed_outputs
            );
            if let Ok(stats) = term_stats(&ex.store) {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            }
        }
        Command::Linearize {
            corpus,
            bck,
            mask,
            budget,
            output,
        } => {
            let convs = load_corpus(&corpus)?;
            let store = match bck {
                Some(p) => BckStore::load_jsonl(&p)?,
                None if mask.is_empty() => BckStore::new(),
                None => bail!("--bck is required unless --mask none"),
            };
            let n = export_training_jsonl(&convs, &store, &mask, Some(budget), &output)?;
            println!("{n} examples -> {}", output.display());
        }
        Command::Eval {
            predictions,
            metrics,
            json,
        } => {
            let report = eval_predictions(&predictions, metrics.apply(MetricOptions::default())?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
                for n in &report.meta.notes {
                    println!("note: {n}");
                }
            }
        }
        Command::Run(args) => {
            let spec = args.to_spec()?;
            let art = run_generation(&spec)?;
            print!("{}", art.report);
            println!(
                "{} turns ({} failed) -> {}",
                art.predictions.len(),
                art.failed_turns(),
                spec.out_dir.display()
            );
        }
        Command::Ablate { run, masks } => {
            let spec = run.to_spec()?;
            let table = run_ablation_grid(&spec, &parse_masks(&masks)?)?;
            print!("{}", table.render());
        }
        Command::Sweep { run, fractions } => {
            let spec = run.to_spec()?;
            let table = run_fraction_sweep(&spec, &fractions)?;
            print!("{}", table.render());
            if !table.nested {
                bail!("training samples are not nested across fractions");
            }
        }
        Command::Report { dir } => print!("{}", render_dir(&dir)?),
        Command::Serve {
            port,
            host,
            backend,
            data_dir,
        } => serve(port, &host, &backend.backend, &data_dir)?,
    }
    Ok(())
}
