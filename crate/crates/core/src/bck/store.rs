//! Extraction cache, corpus-wide extraction driver, the in-memory BCK
//! store and term statistics.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    extract_component, prompt_version, BckError, BckTriplet, CognitiveComponent, ComponentExtraction, Perspective,
    TermRejection,
};
use crate::backend::{Backend, GenerationConfig, RetryPolicy};
use crate::corpus::Conversation;
use crate::discourse::{window, ContextWindow, DEFAULT_SPAN};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub component: CognitiveComponent,
    pub perspective: Perspective,
    pub span: usize,
    pub prompt_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    #[serde(flatten)]
    pub key: CacheKey,
    /// Guards against reusing a record after the conversation text changed.
    pub window_digest: String,
    pub accepted: Vec<String>,
    pub rejected: Vec<TermRejection>,
    pub raw: String,
    pub malformed: bool,
    pub created_at_ms: u64,
}

pub fn window_digest(window: &ContextWindow) -> String {
    let digest = Sha256::digest(window.rendered_text.as_bytes());
    hex::encode(&digest[..8])
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct CacheInner {
    entries: BTreeMap<CacheKey, CacheRecord>,
    file: Option<File>,
}

/// Append-only JSONL cache of subtask results. Later records for the same
/// key win; unreadable lines (e.g. a write cut short) are skipped.
pub struct ExtractionCache {
    path: Option<PathBuf>,
    inner: Mutex<CacheInner>,
}

impl ExtractionCache {
    pub fn in_memory() -> Self {
        ExtractionCache {
            path: None,
            inner: Mutex::new(CacheInner {
                entries: BTreeMap::new(),
                file: None,
            }),
        }
    }

    pub fn open(path: &Path) -> Result<Self, BckError> {
        let io_err = |source| BckError::Cache {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err)?;
        let mut entries = BTreeMap::new();
        let mut skipped = 0usize;
        for line in BufReader::new(&file).lines() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheRecord>(&line) {
                Ok(rec) => {
                    entries.insert(rec.key.clone(), rec);
                }
                Err(_) => skipped += 1,
            }
        }
        if skipped > 0 {
            tracing::warn!(path = %path.display(), skipped, "skipped unreadable cache lines");
        }
        let len = file.seek(SeekFrom::End(0)).map_err(io_err)?;
        if len > 0 {
            file.seek(SeekFrom::Start(len - 1)).map_err(io_err)?;
            let mut last = [0u8; 1];
            file.read_exact(&mut last).map_err(io_err)?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(io_err)?;
            }
        }
        Ok(ExtractionCache {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(CacheInner {
                entries,
                file: Some(file),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, CacheInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<CacheKey> {
        self.lock().entries.keys().cloned().collect()
    }

    /// Record for `key`, if one exists for the same window text.
    pub fn get(&self, key: &CacheKey, digest: &str) -> Option<CacheRecord> {
        self.lock()
            .entries
            .get(key)
            .filter(|r| r.window_digest == digest)
            .cloned()
    }

    pub fn put(&self, record: CacheRecord) -> Result<(), BckError> {
        let mut inner = self.lock();
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&record).expect("cache records serialize");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| BckError::Cache {
                    path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                    source,
                })?;
        }
        inner.entries.insert(record.key.clone(), record);
        Ok(())
    }
}

/// Triplets keyed by (conversation id, utterance index).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BckStore {
    triplets: BTreeMap<(String, usize), BckTriplet>,
}

impl BckStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, triplet: BckTriplet) {
        self.triplets
            .insert((triplet.conversation_id.clone(), triplet.utterance_index), triplet);
    }

    pub fn get(&self, conversation_id: &str, utterance_index: usize) -> Option<&BckTriplet> {
        self.triplets.get(&(conversation_id.to_string(), utterance_index))
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BckTriplet> {
        self.triplets.values()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in self.iter() {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), BckError> {
        let io_err = |source| BckError::Cache {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).map_err(io_err)?;
        fs::write(path, buf).map_err(io_err)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, BckError> {
        let text = fs::read_to_string(path).map_err(|source| BckError::Cache {
            path: path.display().to_string(),
            source,
        })?;
        let mut store = BckStore::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let t: BckTriplet = serde_json::from_str(line).map_err(|e| BckError::Store {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })?;
            store.insert(t);
        }
        Ok(store)
    }
}

impl FromIterator<BckTriplet> for BckStore {
    fn from_iter<I: IntoIterator<Item = BckTriplet>>(iter: I) -> Self {
        let mut s = BckStore::new();
        s.extend(iter);
        s
    }
}

impl Extend<BckTriplet> for BckStore {
    fn extend<I: IntoIterator<Item = BckTriplet>>(&mut self, iter: I) {
        for t in iter {
            self.insert(t);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub span: usize,
    pub concurrency: usize,
    pub config: GenerationConfig,
    pub retry: RetryPolicy,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            span: DEFAULT_SPAN,
            concurrency: 4,
            config: GenerationConfig::extraction(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusExtraction {
    pub store: BckStore,
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub rejected_terms: usize,
    pub malformed_outputs: usize,
}

/// One triplet per utterance of every conversation, with the perspective of
/// the utterance's speaker. Subtask results are cached; completed results
/// stay in the cache even when another subtask fails, so a rerun resumes.
/// On failure the error of the earliest failing subtask (corpus order) is
/// returned.
pub fn extract_corpus(
    conversations: &[Conversation],
    backend: &dyn Backend,
    cache: &ExtractionCache,
    opts: &ExtractOptions,
) -> Result<CorpusExtraction, BckError> {
    if opts.concurrency == 0 {
        return Err(BckError::ZeroConcurrency);
    }
    let version = prompt_version().to_string();
    let mut windows: Vec<(Perspective, ContextWindow)> = Vec::new();
    for conv in conversations {
        for u in &conv.utterances {
            let w = window(conv, u.index, opts.span).map_err(|source| BckError::Window {
                conversation_id: conv.id.clone(),
                source,
            })?;
            windows.push((Perspective::from(u.speaker), w));
        }
    }
    let jobs: Vec<(usize, CognitiveComponent)> = windows
        .iter()
        .enumerate()
        .filter(|(_, (_, w))| !w.is_empty())
        .flat_map(|(i, _)| CognitiveComponent::ALL.into_iter().map(move |c| (i, c)))
        .collect();

    let run_job = |&(i, component): &(usize, CognitiveComponent)| -> Result<(ComponentExtraction, bool), BckError> {
        let (perspective, w) = &windows[i];
        let key = CacheKey {
            conversation_id: w.conversation_id.clone(),
            utterance_index: w.target_index,
            component,
            perspective: *perspective,
            span: opts.span,
            prompt_version: version.clone(),
        };
        let digest = window_digest(w);
        if let Some(rec) = cache.get(&key, &digest) {
            return Ok((
                ComponentExtraction {
                    component,
                    accepted: rec.accepted,
                    rejected: rec.rejected,
                    raw: rec.raw,
                    malformed: rec.malformed,
                },
                true,
            ));
        }
        let ex = extract_component(w, component, *perspective, backend, &opts.config, &opts.retry)?;
        cache.put(CacheRecord {
            key,
            window_digest: digest,
            accepted: ex.accepted.clone(),
            rejected: ex.rejected.clone(),
            raw: ex.raw.clone(),
            malformed: ex.malformed,
            created_at_ms: now_ms(),
        })?;
        Ok((ex, false))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency)
        .build()
        .map_err(|e| BckError::Pool(e.to_string()))?;
    let results: Vec<Result<(ComponentExtraction, bool), BckError>> =
        pool.install(|| jobs.par_iter().map(run_job).collect());

    let mut triplets: Vec<BckTriplet> = windows
        .iter()
        .map(|(p, w)| BckTriplet::empty(w.clone(), *p))
        .collect();
    let mut summary = CorpusExtraction {
        store: BckStore::new(),
        backend_calls: 0,
        cache_hits: 0,
        rejected_terms: 0,
        malformed_outputs: 0,
    };
    for ((i, component), result) in jobs.iter().zip(results) {
        let (ex, hit) = result?;
        if hit {
            summary.cache_hits += 1;
        } else {
            summary.backend_calls += 1;
        }
        summary.rejected_terms += ex.rejected.len();
        summary.malformed_outputs += usize::from(ex.malformed);
        *triplets[*i].terms_mut(*component) = ex.accepted;
    }
    summary.store.extend(triplets);
    Ok(summary)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub non_empty: usize,
    pub total: usize,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.non_empty as f64 / self.total as f64
        }
    }

    fn add(&mut self, non_empty: bool) {
        self.total += 1;
        self.non_empty += usize::from(non_empty);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub overall: Ratio,
    pub by_perspective: BTreeMap<Perspective, Ratio>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TermStats {
    pub components: BTreeMap<CognitiveComponent, ComponentStats>,
}

impl TermStats {
    pub fn ratio(&self, component: CognitiveComponent) -> f64 {
        self.components.get(&component).map(|c| c.overall.value()).unwrap_or(0.0)
    }
}

/// Share of extractions that kept at least one term, per component and per
/// perspective. Utterances with an empty window are not extractions.
pub fn term_stats(store: &BckStore) -> Result<TermStats, BckError> {
    let mut stats = TermStats::default();
    for t in store.iter().filter(|t| !t.source_window.is_empty()) {
        for c in CognitiveComponent::ALL {
            let hit = !t.terms(c).is_empty();
            let entry = stats.components.entry(c).or_default();
            entry.overall.add(hit);
            entry.by_perspective.entry(t.perspective).or_default().add(hit);
        }
    }
    if stats.components.is_empty() {
        return Err(BckError::EmptyStore);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, BackendResponse, CompletionRequest, MockBackend};
    use crate::corpus::{Metadata, Speaker, Utterance};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn conv(id: &str, t: usize) -> Conversation {
        let texts = [
            "I lost my job last week and feel anxious",
            "That sounds really stressful, how are you coping",
            "Not well, I keep worrying about money",
            "Worrying about money after losing work is understandable",
            "Thanks for listening to me",
            "Have you talked with friends about this",
        ];
        Conversation {
            id: id.into(),
            situation: "job loss".into(),
            emotion_type: "anxiety".into(),
            problem_type: "job crisis".into(),
            partition: None,
            utterances: (1..=t)
                .map(|i| {
                    let sp = if i % 2 == 1 { Speaker::User } else { Speaker::System };
                    Utterance::new(i, sp, texts[(i - 1) % texts.len()])
                })
                .collect(),
            metadata: Metadata::new(),
        }
    }

    fn opts() -> ExtractOptions {
        ExtractOptions {
            retry: RetryPolicy::immediate(1),
            ..ExtractOptions::default()
        }
    }

    #[test]
    fn four_utterances_cold_then_warm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let c = vec![conv("a", 4)];
        let backend = MockBackend::standard();
        let cache = ExtractionCache::open(&path).unwrap();
        let out = extract_corpus(&c, &backend, &cache, &opts()).unwrap();
        assert_eq!(out.store.len(), 4);
        assert_eq!(backend.call_count(), 9);
        assert_eq!(out.backend_calls, 9);
        for t in out.store.iter() {
            let speaker = c[0].utterance(t.utterance_index).unwrap().speaker;
            assert_eq!(t.perspective, Perspective::from(speaker));
            assert!(t.unresolved_terms().is_empty());
        }
        drop(cache);

        backend.clear_calls();
        let cache = ExtractionCache::open(&path).unwrap();
        let again = extract_corpus(&c, &backend, &cache, &opts()).unwrap();
        assert_eq!(backend.call_count(), 0);
        assert_eq!(again.cache_hits, 9);
        assert_eq!(again.store, out.store);
    }

    #[test]
    fn result_is_independent_of_concurrency() {
        let c = vec![conv("a", 6), conv("b", 5)];
        let backend = MockBackend::standard();
        let one = extract_corpus(&c, &backend, &ExtractionCache::in_memory(), &ExtractOptions { concurrency: 1, ..opts() })
            .unwrap();
        let eight = extract_corpus(&c, &backend, &ExtractionCache::in_memory(), &ExtractOptions { concurrency: 8, ..opts() })
            .unwrap();
        assert_eq!(one.store, eight.store);
    }

    struct FailAfter {
        inner: MockBackend,
        budget: AtomicUsize,
    }

    impl Backend for FailAfter {
        fn label(&self) -> String {
            "flaky".into()
        }
        fn complete(&self, r: &CompletionRequest) -> Result<BackendResponse, BackendError> {
            let left = self.budget.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1));
            match left {
                Ok(_) => self.inner.complete(r),
                Err(_) => Err(BackendError::Auth("revoked".into())),
            }
        }
    }

    #[test]
    fn interrupted_run_resumes_to_the_cold_key_set() {
        let c = vec![conv("a", 5), conv("b", 4)];
        let dir = tempfile::tempdir().unwrap();
        let cold_path = dir.path().join("cold.jsonl");
        let cold_cache = ExtractionCache::open(&cold_path).unwrap();
        let cold = extract_corpus(&c, &MockBackend::standard(), &cold_cache, &opts()).unwrap();

        let path = dir.path().join("resume.jsonl");
        let flaky = FailAfter {
            inner: MockBackend::standard(),
            budget: AtomicUsize::new(7),
        };
        let cache = ExtractionCache::open(&path).unwrap();
        assert!(extract_corpus(&c, &flaky, &cache, &ExtractOptions { concurrency: 1, ..opts() }).is_err());
        assert_eq!(cache.len(), 7);
        drop(cache);

        let cache = ExtractionCache::open(&path).unwrap();
        let backend = MockBackend::standard();
        let resumed = extract_corpus(&c, &backend, &cache, &opts()).unwrap();
        assert_eq!(backend.call_count(), cold.backend_calls - 7);
        assert_eq!(cache.keys(), cold_cache.keys());
        assert_eq!(resumed.store, cold.store);
    }

    #[test]
    fn truncated_cache_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let c = vec![conv("a", 3)];
        {
            let cache = ExtractionCache::open(&path).unwrap();
            extract_corpus(&c, &MockBackend::standard(), &cache, &opts()).unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 20]).unwrap();
        let cache = ExtractionCache::open(&path).unwrap();
        assert_eq!(cache.len(), 5);
        let backend = MockBackend::standard();
        extract_corpus(&c, &backend, &cache, &opts()).unwrap();
        assert_eq!(backend.call_count(), 1);
        drop(cache);
        assert_eq!(ExtractionCache::open(&path).unwrap().len(), 6);
    }

    #[test]
    fn edited_text_invalidates_cached_record() {
        let cache = ExtractionCache::in_memory();
        let mut c = vec![conv("a", 2)];
        extract_corpus(&c, &MockBackend::standard(), &cache, &opts()).unwrap();
        c[0].utterances[0].text = "Something else entirely happened".into();
        let backend = MockBackend::standard();
        extract_corpus(&c, &backend, &cache, &opts()).unwrap();
        assert_eq!(backend.call_count(), 3);
    }

    fn synthetic_store(btm_hits: usize, total: usize) -> BckStore {
        let c = conv("s", 2);
        (0..total)
            .map(|i| {
                let w = window(&c, 2, 5).unwrap();
                let mut t = BckTriplet::empty(
                    ContextWindow {
                        conversation_id: format!("s{i}"),
                        ..w
                    },
                    Perspective::SystemSide,
                );
                if i < btm_hits {
                    t.btm_terms = vec!["lost my job".into()];
                }
                t.bcr_terms = vec!["anxious".into()];
                t
            })
            .collect()
    }

    #[test]
    fn stats_boundaries() {
        let s = term_stats(&synthetic_store(10, 10)).unwrap();
        assert_eq!(s.ratio(CognitiveComponent::Btm), 1.0);
        assert_eq!(s.ratio(CognitiveComponent::Peu), 0.0);
        assert_eq!(s.ratio(CognitiveComponent::Bcr), 1.0);
    }

    #[test]
    fn stats_hand_counted_fixture() {
        let s = term_stats(&synthetic_store(736, 1000)).unwrap();
        let btm = &s.components[&CognitiveComponent::Btm];
        assert_eq!(btm.overall, Ratio { non_empty: 736, total: 1000 });
        assert_eq!(btm.overall.value(), 0.736);
        assert_eq!(btm.by_perspective[&Perspective::SystemSide].value(), 0.736);
        assert!(!btm.by_perspective.contains_key(&Perspective::UserSide));
    }

    #[test]
    fn stats_reject_empty_store() {
        assert!(matches!(term_stats(&BckStore::new()), Err(BckError::EmptyStore)));
        let only_first: BckStore = [BckTriplet::empty(window(&conv("x", 2), 1, 5).unwrap(), Perspective::UserSide)]
            .into_iter()
            .collect();
        assert!(matches!(term_stats(&only_first), Err(BckError::EmptyStore)));
    }

    #[test]
    fn store_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = extract_corpus(&[conv("a", 4)], &MockBackend::standard(), &ExtractionCache::in_memory(), &opts())
            .unwrap();
        let p = dir.path().join("bck.jsonl");
        out.store.save_jsonl(&p).unwrap();
        assert_eq!(BckStore::load_jsonl(&p).unwrap(), out.store);
    }
}
