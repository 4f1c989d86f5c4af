//! Experiment orchestration: generation over the test split, ablation
//! grids and training-fraction sweeps, each writing predictions and
//! metric reports to an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    complete_with_retry, Backend, BackendError, CompletionRequest, Dialect, GenerationConfig, LogprobBase, MockBackend,
    RemoteBackend, RemoteOptions, RetryPolicy,
};
use crate::bck::{extract_corpus, BckError, BckStore, ExtractOptions, ExtractionCache};
use crate::corpus::{load_corpus, sample_split_with, Conversation, CorpusError, CorpusSplit, Speaker, SplitOptions, Strategy};
use crate::discourse::DEFAULT_SPAN;
use crate::linearize::{
    build_omega, export_training_jsonl, markers, parse_target, reference_target, AblationMask, LinearizeError,
};
use crate::metrics::{
    evaluate, rc_cells, relative_change, render_table, report_cells, EvalPair, Labeled, Metric, MetricError,
    MetricOptions, MetricReport, ReportMeta,
};

pub const API_KEY_ENV: &str = "MIND2_API_KEY";

/// Instruction placed before Ω when a prompted model stands in for the
/// fine-tuned decoder.
pub const GENERATION_PREAMBLE: &str = "Continue the emotional support conversation below as the supporter. \
The input gives the seeker's situation, the dialogue so far with speaker tags, and cognitive knowledge terms. \
Reply with a single line of the form \"[str] <strategy> [rsp] <response>\" where <strategy> is one of: \
Question, Restatement or Paraphrasing, Reflection of Feelings, Self-disclosure, Affirmation and Reassurance, \
Providing Suggestions, Information, Others.";

pub fn generation_prompt(omega: &str) -> String {
    format!("{GENERATION_PREAMBLE}\n\n{omega}")
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Bck(#[from] BckError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("backend setup: {0}")]
    Backend(#[from] BackendError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid run spec: {0}")]
    InvalidSpec(String),
    #[error("{failed} of {total} turns failed, above the {budget} error budget")]
    ErrorBudget { failed: usize, total: usize, budget: f64 },
    #[error("no turns to evaluate")]
    NoEvalTurns,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Deterministic in-process backend; optional rule table file.
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rules: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        uniform_logprob: Option<f64>,
    },
    /// Mock that answers each generation request with its gold target.
    ReferenceEcho {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        uniform_logprob: Option<f64>,
    },
    /// OpenAI-style chat completion endpoint. The key is read from the
    /// `MIND2_API_KEY` environment variable.
    Remote {
        url: String,
        model: String,
        #[serde(default)]
        dialect: Dialect,
        #[serde(default)]
        logprob_base: LogprobBase,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_timeout() -> u64 {
    60
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Mock {
            rules: None,
            uniform_logprob: None,
        }
    }
}

impl BackendSpec {
    /// `mock`, `echo`, `mock:<rules.json>` or an http(s) URL (model name
    /// after `#`, default `default`).
    pub fn parse(s: &str) -> Result<Self, RunError> {
        let s = s.trim();
        if s == "mock" {
            return Ok(BackendSpec::default());
        }
        if s == "echo" || s == "reference-echo" {
            return Ok(BackendSpec::ReferenceEcho { uniform_logprob: None });
        }
        if let Some(path) = s.strip_prefix("mock:") {
            return Ok(BackendSpec::Mock {
                rules: Some(PathBuf::from(path)),
                uniform_logprob: None,
            });
        }
        if s.starts_with("http://") || s.starts_with("https://") {
            let (url, model) = s.split_once('#').unwrap_or((s, "default"));
            return Ok(BackendSpec::Remote {
                url: url.to_string(),
                model: model.to_string(),
                dialect: Dialect::default(),
                logprob_base: LogprobBase::default(),
                timeout_secs: default_timeout(),
            });
        }
        Err(RunError::InvalidSpec(format!("unrecognised backend {s:?}")))
    }

    /// Instantiates the backend. `references` feeds the reference-echo mock.
    pub fn build(&self, references: &[Conversation]) -> Result<Arc<dyn Backend>, RunError> {
        Ok(match self {
            BackendSpec::Mock { rules, uniform_logprob } => {
                let mut m = match rules {
                    Some(p) => MockBackend::from_file(p)?,
                    None => MockBackend::standard(),
                };
                if let Some(lp) = uniform_logprob {
                    m = m.with_uniform_logprob(*lp);
                }
                Arc::new(m)
            }
            BackendSpec::ReferenceEcho { uniform_logprob } => {
                let mut entries = Vec::new();
                for c in references {
                    for u in c.system_turns() {
                        if let Ok(t) = reference_target(c, u.index) {
                            entries.push((turn_key(&c.id, u.index), t));
                        }
                    }
                }
                let mut m = MockBackend::keyed(entries).named("reference-echo");
                if let Some(lp) = uniform_logprob {
                    m = m.with_uniform_logprob(*lp);
                }
                Arc::new(m)
            }
            BackendSpec::Remote {
                url,
                model,
                dialect,
                logprob_base,
                timeout_secs,
            } => {
                let mut o = RemoteOptions::new(url.clone(), model.clone());
                o.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
                o.dialect = *dialect;
                o.logprob_base = *logprob_base;
                o.timeout_secs = *timeout_secs;
                Arc::new(RemoteBackend::new(o)?)
            }
        })
    }
}

pub fn turn_key(conversation_id: &str, turn: usize) -> String {
    format!("{conversation_id}#{turn}")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTurns {
    /// Every System turn with at least one preceding utterance.
    #[default]
    AllEligible,
    /// Only the last such turn of each conversation.
    FinalOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Validation,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionBackend {
    pub fraction: f64,
    pub backend: BackendSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub label: String,
    pub corpus: PathBuf,
    pub fraction: f64,
    pub seed: u64,
    pub stratify: bool,
    pub eval_split: EvalSplit,
    /// Evaluate only the first k conversations of the split.
    pub max_conversations: Option<usize>,
    pub eval_turns: EvalTurns,
    pub window_span: usize,
    pub mask: AblationMask,
    pub generation: GenerationConfig,
    pub extraction: GenerationConfig,
    pub extraction_backend: BackendSpec,
    pub generation_backend: BackendSpec,
    /// Defaults to the generation backend.
    pub scoring_backend: Option<BackendSpec>,
    /// Generation backend per training fraction, for sweeps over
    /// externally trained models.
    pub generation_by_fraction: Vec<FractionBackend>,
    pub concurrency: usize,
    pub retry: RetryPolicy,
    /// Largest tolerated share of failed turns.
    pub error_budget: f64,
    pub metrics: MetricOptions,
    /// Extraction cache; defaults to `<out_dir>/bck_cache.jsonl`.
    pub cache: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Also write linearized training data for the sampled train split.
    pub export_training: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            label: "mind2".into(),
            corpus: PathBuf::from("data/esconv.json"),
            fraction: 1.0,
            seed: 7,
            stratify: false,
            eval_split: EvalSplit::Test,
            max_conversations: None,
            eval_turns: EvalTurns::AllEligible,
            window_span: DEFAULT_SPAN,
            mask: AblationMask::FULL,
            generation: GenerationConfig::default(),
            extraction: GenerationConfig::extraction(),
            extraction_backend: BackendSpec::default(),
            generation_backend: BackendSpec::default(),
            scoring_backend: None,
            generation_by_fraction: Vec::new(),
            concurrency: 4,
            retry: RetryPolicy::default(),
            error_budget: 0.05,
            metrics: MetricOptions::default(),
            cache: None,
            out_dir: PathBuf::from("runs/default"),
            export_training: false,
        }
    }
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let spec: RunSpec =
            serde_json::from_str(&text).map_err(|e| RunError::InvalidSpec(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let mut problems = Vec::new();
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            problems.push(format!("fraction {} outside (0, 1]", self.fraction));
        }
        if self.window_span == 0 {
            problems.push("window_span must be at least 1".into());
        }
        if self.concurrency == 0 {
            problems.push("concurrency must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.error_budget) {
            problems.push(format!("error_budget {} outside [0, 1]", self.error_budget));
        }
        for (name, cfg) in [("generation", &self.generation), ("extraction", &self.extraction)] {
            for (field, msg) in cfg.violations() {
                problems.push(format!("{name}.{field}: {msg}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RunError::InvalidSpec(problems.join("; ")))
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out_dir.join("bck_cache.jsonl"))
    }

    fn generation_backend_for_fraction(&self) -> &BackendSpec {
        self.generation_by_fraction
            .iter()
            .find(|fb| (fb.fraction - self.fraction).abs() < 1e-9)
            .map(|fb| &fb.backend)
            .unwrap_or(&self.generation_backend)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionFlags {
    pub well_formed: bool,
    pub truncated_pairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub conversation_id: String,
    pub turn: usize,
    pub omega: String,
    pub generated_text: String,
    pub strategy: Strategy,
    pub response: String,
    pub reference_strategy: Strategy,
    pub reference_response: String,
    pub flags: PredictionFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub spec: RunSpec,
    pub predictions: Vec<PredictionRecord>,
    pub report: MetricReport,
    pub store: BckStore,
    pub extraction_calls: usize,
    pub cache_hits: usize,
    pub log: Vec<String>,
}

impl RunArtifacts {
    pub fn failed_turns(&self) -> usize {
        self.predictions.iter().filter(|p| p.flags.error.is_some()).count()
    }
}

/// (conversation, turn) pairs to evaluate, in corpus then turn order.
pub fn eval_turns(conversations: &[Conversation], mode: EvalTurns) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ci, c) in conversations.iter().enumerate() {
        let eligible: Vec<usize> = c
            .utterances
            .iter()
            .filter(|u| u.speaker == Speaker::System && u.index >= 2)
            .map(|u| u.index)
            .collect();
        match mode {
            EvalTurns::AllEligible => out.extend(eligible.into_iter().map(|t| (ci, t))),
            EvalTurns::FinalOnly => out.extend(eligible.last().map(|t| (ci, *t))),
        }
    }
    out
}

fn split_for(spec: &RunSpec, corpus: &[Conversation]) -> Result<CorpusSplit, RunError> {
    Ok(sample_split_with(
        corpus,
        &SplitOptions {
            fraction: spec.fraction,
            seed: spec.seed,
            stratify: spec.stratify,
        },
    )?)
}

struct TurnOutput {
    record: PredictionRecord,
    logprobs: Option<Vec<f64>>,
}

fn run_turn(
    spec: &RunSpec,
    conv: &Conversation,
    turn: usize,
    store: Option<&BckStore>,
    generator: &dyn Backend,
    scorer: &dyn Backend,
) -> Result<TurnOutput, String> {
    let empty = BckStore::new();
    let omega = build_omega(
        conv,
        turn,
        store.unwrap_or(&empty),
        &spec.mask,
        Some(spec.generation.max_input_tokens),
    )
    .map_err(|e| format!("linearize: {e}"))?;
    let target = reference_target(conv, turn).map_err(|e| format!("reference: {e}"))?;
    let prompt = generation_prompt(&omega.text);
    let request = CompletionRequest::new(prompt.clone(), spec.generation).with_key(turn_key(&conv.id, turn));
    let response = complete_with_retry(generator, &request, &spec.retry).map_err(|e| format!("generation: {e}"))?;
    let parsed = parse_target(&response.text);
    let logprobs = scorer
        .score(&prompt, &target)
        .map_err(|e| format!("scoring: {e}"))?
        .map(|v| v.into_iter().map(|t| t.logprob).collect());
    let reference = parse_target(&target);
    Ok(TurnOutput {
        record: PredictionRecord {
            conversation_id: conv.id.clone(),
            turn,
            omega: omega.text,
            generated_text: response.text,
            strategy: parsed.strategy,
            response: parsed.response,
            reference_strategy: reference.strategy,
            reference_response: reference.response,
            flags: PredictionFlags {
                well_formed: parsed.well_formed,
                truncated_pairs: omega.dropped,
                error: None,
            },
        },
        logprobs,
    })
}

fn failed_record(conv: &Conversation, turn: usize, error: String) -> PredictionRecord {
    let reference = reference_target(conv, turn).map(|t| parse_target(&t)).ok();
    PredictionRecord {
        conversation_id: conv.id.clone(),
        turn,
        omega: String::new(),
        generated_text: String::new(),
        strategy: Strategy::Others,
        response: String::new(),
        reference_strategy: reference.as_ref().map(|r| r.strategy).unwrap_or(Strategy::Others),
        reference_response: reference.map(|r| r.response).unwrap_or_default(),
        flags: PredictionFlags {
            well_formed: false,
            truncated_pairs: 0,
            error: Some(error),
        },
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("values serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Extraction, linearization, generation and scoring for every evaluated
/// turn, then metrics. Writes `predictions.jsonl`, `report.json`,
/// `report.txt`, `run_spec.json` and `run.log` into `spec.out_dir`.
pub fn run_generation(spec: &RunSpec) -> Result<RunArtifacts, RunError> {
    let corpus = load_corpus(&spec.corpus)?;
    run_generation_on(spec, &corpus)
}

/// [`run_generation`] over an already loaded corpus.
pub fn run_generation_on(spec: &RunSpec, corpus: &[Conversation]) -> Result<RunArtifacts, RunError> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir).map_err(io_err(&spec.out_dir))?;
    let split = split_for(spec, corpus)?;
    let mut eval_convs: Vec<Conversation> = match spec.eval_split {
        EvalSplit::Train => split.train.clone(),
        EvalSplit::Validation => split.validation.clone(),
        EvalSplit::Test => split.test.clone(),
    };
    if let Some(k) = spec.max_conversations {
        eval_convs.truncate(k);
    }
    let turns = eval_turns(&eval_convs, spec.eval_turns);
    if turns.is_empty() {
        return Err(RunError::NoEvalTurns);
    }

    let generator = spec.generation_backend_for_fraction().build(&eval_convs)?;
    let scorer = match &spec.scoring_backend {
        Some(s) => s.build(&eval_convs)?,
        None => generator.clone(),
    };

    let mut log = vec![
        format!("label: {}", spec.label),
        format!(
            "corpus: {} conversations; train {} of {} (fraction {}), validation {}, test {}",
            corpus.len(),
            split.train.len(),
            split.full_train_size,
            spec.fraction,
            split.validation.len(),
            split.test.len()
        ),
        format!("evaluated conversations: {}; turns: {}", eval_convs.len(), turns.len()),
        format!("mask: {} ({})", spec.mask, spec.mask.label()),
        format!("generation backend: {}", generator.label()),
    ];

    let extractor = spec.extraction_backend.build(&eval_convs)?;
    let cache = ExtractionCache::open(&spec.cache_path())?;
    let opts = ExtractOptions {
        span: spec.window_span,
        concurrency: spec.concurrency,
        config: spec.extraction,
        retry: spec.retry,
    };
    let mut store = BckStore::new();
    let mut conv_errors: Vec<Option<String>> = vec![None; eval_convs.len()];
    let (mut extraction_calls, mut cache_hits) = (0, 0);
    if !spec.mask.is_empty() {
        for (ci, c) in eval_convs.iter().enumerate() {
            match extract_corpus(std::slice::from_ref(c), &extractor, &cache, &opts) {
                Ok(ex) => {
                    extraction_calls += ex.backend_calls;
                    cache_hits += ex.cache_hits;
                    store.extend(ex.store.iter().cloned());
                }
                Err(e) => conv_errors[ci] = Some(format!("extraction: {e}")),
            }
        }
    }
    log.push(format!("extraction: {extraction_calls} backend calls, {cache_hits} cache hits"));

    if spec.export_training {
        let path = spec.out_dir.join("train_export.jsonl");
        let train_store = if spec.mask.is_empty() {
            BckStore::new()
        } else {
            extract_corpus(&split.train, &extractor, &cache, &opts)?.store
        };
        let n = export_training_jsonl(
            &split.train,
            &train_store,
            &spec.mask,
            Some(spec.generation.max_input_tokens),
            &path,
        )?;
        log.push(format!("training export: {n} examples"));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.concurrency)
        .build()
        .map_err(|e| RunError::InvalidSpec(format!("worker pool: {e}")))?;
    let outputs: Vec<Result<TurnOutput, String>> = pool.install(|| {
        turns
            .par_iter()
            .map(|&(ci, turn)| match &conv_errors[ci] {
                Some(e) => Err(e.clone()),
                None => run_turn(spec, &eval_convs[ci], turn, Some(&store), &*generator, &*scorer),
            })
            .collect()
    });

    let mut predictions = Vec::with_capacity(turns.len());
    let mut pairs = Vec::new();
    let mut logprobs: Vec<f64> = Vec::new();
    let mut ppl_available = true;
    for (&(ci, turn), out) in turns.iter().zip(outputs) {
        match out {
            Ok(o) => {
                match o.logprobs {
                    Some(l) => logprobs.extend(l),
                    None => ppl_available = false,
                }
                pairs.push(EvalPair {
                    conversation_id: o.record.conversation_id.clone(),
                    turn,
                    generated: Labeled {
                        strategy: o.record.strategy,
                        response: o.record.response.clone(),
                    },
                    reference: Labeled {
                        strategy: o.record.reference_strategy,
                        response: o.record.reference_response.clone(),
                    },
                });
                predictions.push(o.record);
            }
            Err(e) => {
                log.push(format!("turn {}: {e}", turn_key(&eval_convs[ci].id, turn)));
                predictions.push(failed_record(&eval_convs[ci], turn, e));
            }
        }
    }
    let failed = predictions.len() - pairs.len();
    log.push(format!("failed turns: {failed} of {}", predictions.len()));

    write_jsonl(&spec.out_dir.join("predictions.jsonl"), &predictions)?;
    write_json(&spec.out_dir.join("run_spec.json"), spec)?;
    let write_log = |log: &[String]| {
        let path = spec.out_dir.join("run.log");
        fs::write(&path, log.join("\n") + "\n").map_err(io_err(&path))
    };
    if failed as f64 > spec.error_budget * predictions.len() as f64 || pairs.is_empty() {
        write_log(&log)?;
        return Err(RunError::ErrorBudget {
            failed,
            total: predictions.len(),
            budget: spec.error_budget,
        });
    }

    let lp = (ppl_available && !logprobs.is_empty()).then_some(logprobs.as_slice());
    let values = evaluate(&pairs, lp, &spec.metrics)?;
    let mut notes = vec![
        "responses come from a prompted backend given the linearized input, not a fine-tuned decoder".to_string(),
        match spec.eval_turns {
            EvalTurns::AllEligible => "evaluated every System turn with at least one preceding utterance".to_string(),
            EvalTurns::FinalOnly => "evaluated the final eligible System turn of each conversation".to_string(),
        },
    ];
    if values.ppl.is_none() {
        notes.push("PPL unavailable: scoring backend returned no logprobs".to_string());
    }
    let report = MetricReport {
        values,
        meta: ReportMeta {
            label: spec.label.clone(),
            pairs: pairs.len(),
            generation_backend: generator.label(),
            scoring_backend: values.ppl.map(|_| scorer.label()),
            options: spec.metrics,
            notes,
        },
    };
    write_json(&spec.out_dir.join("report.json"), &report)?;
    let report_txt = spec.out_dir.join("report.txt");
    fs::write(&report_txt, report.to_string()).map_err(io_err(&report_txt))?;
    write_log(&log)?;

    Ok(RunArtifacts {
        spec: spec.clone(),
        predictions,
        report,
        store,
        extraction_calls,
        cache_hits,
        log,
    })
}

/// Hex SHA-256 over the predictions and report files of a run directory.
pub fn run_digest(out_dir: &Path) -> Result<String, RunError> {
    let mut h = Sha256::new();
    for name in ["predictions.jsonl", "report.json"] {
        let p = out_dir.join(name);
        h.update(fs::read(&p).map_err(io_err(&p))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub mask: AblationMask,
    pub report: MetricReport,
    pub extraction_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<GridRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let rows: Vec<(String, Vec<String>)> =
            self.rows.iter().map(|r| (r.label.clone(), report_cells(&r.report.values))).collect();
        render_table(&rows)
    }
}

fn mask_slug(mask: &AblationMask) -> String {
    mask.to_string().replace(',', "-")
}

/// One run per mask with a shared extraction cache; rows keep the mask
/// order (the standard grid ends with the full mask).
pub fn run_ablation_grid(base: &RunSpec, masks: &[AblationMask]) -> Result<AblationTable, RunError> {
    let corpus = load_corpus(&base.corpus)?;
    run_ablation_grid_on(base, masks, &corpus)
}

pub fn run_ablation_grid_on(
    base: &RunSpec,
    masks: &[AblationMask],
    corpus: &[Conversation],
) -> Result<AblationTable, RunError> {
    if masks.is_empty() {
        return Err(RunError::InvalidSpec("no masks given".into()));
    }
    let cache = base.cache_path();
    let mut rows = Vec::new();
    for (i, mask) in masks.iter().enumerate() {
        let spec = RunSpec {
            label: mask.label(),
            mask: *mask,
            cache: Some(cache.clone()),
            out_dir: base.out_dir.join("ablation").join(format!("{i}-{}", mask_slug(mask))),
            ..base.clone()
        };
        let art = run_generation_on(&spec, corpus)?;
        rows.push(GridRow {
            label: spec.label,
            mask: *mask,
            report: art.report,
            extraction_calls: art.extraction_calls,
        });
    }
    let table = AblationTable { rows };
    write_json(&base.out_dir.join("ablation.json"), &table)?;
    let txt = base.out_dir.join("ablation.txt");
    fs::write(&txt, table.render()).map_err(io_err(&txt))?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub train_size: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcRow {
    pub baseline: f64,
    pub fraction: f64,
    pub changes: Vec<(Metric, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub rc: Vec<RcRow>,
    /// Train splits are nested across the fractions.
    pub nested: bool,
}

fn pct(f: f64) -> String {
    let p = f * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}%", p.round())
    } else {
        format!("{p}%")
    }
}

impl SweepTable {
    pub fn render(&self) -> String {
        let mut rows: Vec<(String, Vec<String>)> =
            self.rows.iter().map(|r| (pct(r.fraction), report_cells(&r.report.values))).collect();
        for rc in &self.rc {
            rows.push((format!("RC {} → {}", pct(rc.baseline), pct(rc.fraction)), rc_cells(&rc.changes)));
        }
        render_table(&rows)
    }
}

/// Relative-change rows of every other row against the smallest fraction.
pub fn rc_rows(rows: &[(f64, crate::metrics::MetricValues)]) -> Vec<RcRow> {
    let Some((base_f, base)) = rows.iter().min_by(|a, b| a.0.total_cmp(&b.0)) else {
        return Vec::new();
    };
    rows.iter()
        .filter(|(f, _)| f != base_f)
        .map(|(f, v)| RcRow {
            baseline: *base_f,
            fraction: *f,
            changes: relative_change(base, v),
        })
        .collect()
}

/// One run per training fraction on nested splits, plus relative change
/// against the smallest fraction.
pub fn run_fraction_sweep(base: &RunSpec, fractions: &[f64]) -> Result<SweepTable, RunError> {
    let corpus = load_corpus(&base.corpus)?;
    run_fraction_sweep_on(base, fractions, &corpus)
}

pub fn run_fraction_sweep_on(base: &RunSpec, fractions: &[f64], corpus: &[Conversation]) -> Result<SweepTable, RunError> {
    if fractions.is_empty() {
        return Err(RunError::InvalidSpec("no fractions given".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(RunError::InvalidSpec(format!("fraction {f} outside (0, 1]")));
    }
    let cache = base.cache_path();
    let mut rows = Vec::new();
    let mut train_sets: Vec<(f64, Vec<String>)> = Vec::new();
    for &fraction in fractions {
        let spec = RunSpec {
            label: pct(fraction),
            fraction,
            cache: Some(cache.clone()),
            out_dir: base.out_dir.join("sweep").join(format!("f{fraction:.2}")),
            ..base.clone()
        };
        let split = split_for(&spec, corpus)?;
        train_sets.push((fraction, split.train.iter().map(|c| c.id.clone()).collect()));
        let art = run_generation_on(&spec, corpus)?;
        rows.push(SweepRow {
            fraction,
            train_size: split.train.len(),
            report: art.report,
        });
    }
    train_sets.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nested = train_sets
        .windows(2)
        .all(|w| w[0].1.iter().all(|id| w[1].1.contains(id)));
    let values: Vec<(f64, crate::metrics::MetricValues)> = rows.iter().map(|r| (r.fraction, r.report.values)).collect();
    let table = SweepTable {
        rc: rc_rows(&values),
        rows,
        nested,
    };
    write_json(&base.out_dir.join("sweep.json"), &table)?;
    let txt = base.out_dir.join("sweep.txt");
    fs::write(&txt, table.render()).map_err(io_err(&txt))?;
    Ok(table)
}

/// Text rendering of whatever results `dir` holds: a sweep, an ablation
/// grid, or a single run report.
pub fn render_dir(dir: &Path) -> Result<String, RunError> {
    let read = |name: &str| -> Option<Result<String, RunError>> {
        let p = dir.join(name);
        p.exists().then(|| fs::read_to_string(&p).map_err(io_err(&p)))
    };
    let bad = |name: &str, e: serde_json::Error| RunError::InvalidSpec(format!("{}: {e}", dir.join(name).display()));
    let mut out = String::new();
    if let Some(text) = read("report.json") {
        let r: MetricReport = serde_json::from_str(&text?).map_err(|e| bad("report.json", e))?;
        out.push_str(&r.to_string());
        for n in &r.meta.notes {
            out.push_str(&format!("note: {n}\n"));
        }
    }
    if let Some(text) = read("ablation.json") {
        let t: AblationTable = serde_json::from_str(&text?).map_err(|e| bad("ablation.json", e))?;
        out.push_str(&t.render());
    }
    if let Some(text) = read("sweep.json") {
        let t: SweepTable = serde_json::from_str(&text?).map_err(|e| bad("sweep.json", e))?;
        out.push_str(&t.render());
    }
    if out.is_empty() {
        return Err(RunError::InvalidSpec(format!("no results in {}", dir.display())));
    }
    Ok(out)
}

/// Ω of a request prompt, for inspecting backend call logs.
pub fn omega_of(prompt: &str) -> &str {
    prompt.find(markers::CLS).map(|i| &prompt[i..]).unwrap_or(prompt)
}
