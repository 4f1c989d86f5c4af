//! Test support: naive reference implementations of the evaluation
//! metrics, random corpora for comparing against them, and synthetic
//! ESConv-format fixtures.
//!
//! The oracles deliberately share no code with the library and favour
//! the most direct reading of each definition over speed.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// All n-grams of `tokens`, listed with repeats.
fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count_of(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// Clipped matches and candidate total, by linear scans.
fn clipped(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cg = ngrams(cand, n);
    let rg = ngrams(reference, n);
    let mut distinct: Vec<Vec<String>> = Vec::new();
    for g in &cg {
        if !distinct.contains(g) {
            distinct.push(g.clone());
        }
    }
    let matched = distinct
        .iter()
        .map(|g| count_of(&cg, g).min(count_of(&rg, g)))
        .sum();
    (matched, cg.len())
}

/// Corpus BLEU as a product of precisions raised to 1/k over the k orders
/// that have candidate n-grams, times the brevity penalty.
pub fn bleu_corpus(generated: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> f64 {
    let c: usize = generated.iter().map(|g| g.len()).sum();
    let r: usize = references.iter().map(|g| g.len()).sum();
    let mut product = 1.0f64;
    let mut k = 0;
    for n in 1..=max_n {
        let mut m = 0;
        let mut t = 0;
        for (g, rf) in generated.iter().zip(references) {
            let (a, b) = clipped(g, rf, n);
            m += a;
            t += b;
        }
        if t > 0 {
            product *= m as f64 / t as f64;
            k += 1;
        }
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(1.0 / k as f64)
}

/// Average of per-pair BLEU with zero matches replaced by `eps`.
pub fn bleu_sentence(generated: &[Vec<String>], references: &[Vec<String>], max_n: usize, eps: f64) -> f64 {
    let mut sum = 0.0;
    for (g, rf) in generated.iter().zip(references) {
        if g.is_empty() {
            continue;
        }
        let mut product = 1.0f64;
        let mut k = 0;
        for n in 1..=max_n {
            let (m, t) = clipped(g, rf, n);
            if t > 0 {
                let m = if m == 0 { eps } else { m as f64 };
                product *= m / t as f64;
                k += 1;
            }
        }
        let bp = if g.len() > rf.len() {
            1.0
        } else {
            (1.0 - rf.len() as f64 / g.len() as f64).exp()
        };
        sum += bp * product.powf(1.0 / k as f64);
    }
    sum / generated.len() as f64
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// Longest common subsequence by enumerating every subsequence of the
/// shorter sequence. Exponential; keep inputs under ~16 tokens.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 20, "brute-force LCS input too long");
    let mut best = 0;
    for mask in 0u32..(1u32 << short.len()) {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        let pick: Vec<&String> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| &short[i]).collect();
        if is_subsequence(&pick, long) {
            best = size;
        }
    }
    best
}

pub fn rouge_l(generated: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    let mut sum = 0.0;
    for (g, r) in generated.iter().zip(references) {
        let l = lcs_brute(g, r) as f64;
        let p = if g.is_empty() { 0.0 } else { l / g.len() as f64 };
        let rc = if r.is_empty() { 0.0 } else { l / r.len() as f64 };
        sum += if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
    }
    sum / generated.len() as f64
}

pub fn distinct(generated: &[Vec<String>], n: usize) -> f64 {
    let all: Vec<Vec<String>> = generated.iter().flat_map(|g| ngrams(g, n)).collect();
    let mut uniq: Vec<&Vec<String>> = Vec::new();
    for g in &all {
        if !uniq.contains(&g) {
            uniq.push(g);
        }
    }
    uniq.len() as f64 / all.len() as f64
}

/// Macro-F1 over string labels via precision and recall. With `universe`
/// set, every label in it is averaged; otherwise labels seen in either
/// list are.
pub fn macro_f1(references: &[&str], predictions: &[&str], universe: Option<&[&str]>) -> f64 {
    let mut labels: Vec<&str> = match universe {
        Some(u) => u.to_vec(),
        None => references.iter().chain(predictions).copied().collect(),
    };
    labels.sort_unstable();
    labels.dedup();
    let mut sum = 0.0;
    for l in &labels {
        let predicted = predictions.iter().filter(|p| *p == l).count() as f64;
        let actual = references.iter().filter(|r| *r == l).count() as f64;
        let correct = references
            .iter()
            .zip(predictions)
            .filter(|(r, p)| *r == l && *p == l)
            .count() as f64;
        let precision = if predicted == 0.0 { 0.0 } else { correct / predicted };
        let recall = if actual == 0.0 { 0.0 } else { correct / actual };
        sum += if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    sum / labels.len() as f64
}

/// Perplexity as the inverse geometric mean of token probabilities.
pub fn perplexity(logprobs: &[f64]) -> f64 {
    let n = logprobs.len() as f64;
    logprobs.iter().map(|l| l.exp().powf(-1.0 / n)).product()
}

/// A random corpus of `1..=max_pairs` (generated, reference) pairs over a
/// small vocabulary, so n-gram overlaps are frequent.
pub fn random_corpus(rng: &mut impl Rng, max_pairs: usize, max_len: usize) -> Vec<(Vec<String>, Vec<String>)> {
    const VOCAB: [&str; 7] = ["i", "you", "feel", "sad", "that", "is", "hard"];
    let pairs = rng.random_range(1..=max_pairs);
    let sent = |rng: &mut dyn rand::RngCore| {
        let len = rng.random_range(1..=max_len);
        (0..len)
            .map(|_| VOCAB.choose(rng).expect("vocab non-empty").to_string())
            .collect::<Vec<_>>()
    };
    (0..pairs).map(|_| (sent(rng), sent(rng))).collect()
}

pub const STRATEGY_LABELS: [&str; 8] = [
    "Question",
    "Restatement or Paraphrasing",
    "Reflection of Feelings",
    "Self-disclosure",
    "Affirmation and Reassurance",
    "Providing Suggestions",
    "Information",
    "Others",
];

const PROBLEMS: [&str; 5] = [
    "job crisis",
    "ongoing depression",
    "breakup with partner",
    "problems with friends",
    "academic pressure",
];
const EMOTIONS: [&str; 5] = ["anxiety", "depression", "sadness", "anger", "fear"];

const SEEKER_LINES: [&str; 8] = [
    "I lost my job last week and I feel anxious about money",
    "My partner left and I cannot stop crying at night",
    "I keep failing my exams even though I study every day",
    "My friends stopped inviting me to anything lately",
    "I feel tired and hopeless most mornings",
    "Nobody at home understands how stressed I am",
    "I worry that I will never find another job",
    "Thank you, talking about it helps a little",
];
const SUPPORTER_LINES: [&str; 8] = [
    "How long have you been feeling this way?",
    "It sounds like you are carrying a lot of worry right now.",
    "That must be really painful for you.",
    "I went through something similar a few years ago.",
    "You are doing the right thing by reaching out.",
    "Maybe you could write down one small goal for tomorrow.",
    "Many people find that a regular sleep routine helps with stress.",
    "I am glad we could talk about this today.",
];

/// A JSON array of `n` ESConv-style records (seeker starts, turns
/// alternate, every supporter message annotated). Deterministic in `seed`.
pub fn esconv_records(n: usize, seed: u64) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<Value> = (0..n)
        .map(|i| {
            let turns = rng.random_range(4..=10usize);
            let dialog: Vec<Value> = (0..turns)
                .map(|t| {
                    if t % 2 == 0 {
                        json!({
                            "speaker": "seeker",
                            "content": SEEKER_LINES.choose(&mut rng).expect("non-empty"),
                            "annotation": {},
                        })
                    } else {
                        json!({
                            "speaker": "supporter",
                            "content": SUPPORTER_LINES.choose(&mut rng).expect("non-empty"),
                            "annotation": {"strategy": STRATEGY_LABELS.choose(&mut rng).expect("non-empty")},
                        })
                    }
                })
                .collect();
            json!({
                "id": format!("fx-{i:04}"),
                "situation": format!("{} situation {i}", PROBLEMS[i % PROBLEMS.len()]),
                "emotion_type": EMOTIONS[i % EMOTIONS.len()],
                "problem_type": PROBLEMS[i % PROBLEMS.len()],
                "dialog": dialog,
            })
        })
        .collect();
    Value::Array(records)
}

pub fn esconv_json(n: usize, seed: u64) -> String {
    serde_json::to_string_pretty(&esconv_records(n, seed)).expect("fixture serializes")
}
