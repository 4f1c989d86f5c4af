//! Automatic evaluation: strategy macro-F1, perplexity, BLEU-2/4,
//! Distinct-1/2, ROUGE-L and relative change between reports.
//!
//! All functions return raw values in [0, 1] (PPL ≥ 1); reports scale
//! everything except PPL by 100.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Strategy;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no evaluation pairs")]
    EmptyInput,
    #[error("generated corpus has no tokens")]
    EmptyCandidates,
    #[error("generated corpus has no {0}-grams")]
    NoNgrams(usize),
    #[error("{generated} generated items but {reference} references")]
    LengthMismatch { generated: usize, reference: usize },
    #[error("logprob {0} is not a finite value ≤ 0")]
    BadLogprob(String),
    #[error("BLEU order must be at least 1")]
    ZeroOrder,
}

const CLITICS: [&str; 7] = ["s", "m", "t", "re", "ve", "ll", "d"];

/// Lowercases, splits on whitespace, and splits punctuation into separate
/// tokens. The clitics 's 'm 't 're 've 'll 'd stay attached to their
/// apostrophe as one token, so "I'm OK." gives ["i", "'m", "ok", "."].
/// Typographic apostrophes are read as ASCII ones.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text
        .chars()
        .map(|c| if c == '\u{2019}' { '\'' } else { c })
        .flat_map(char::to_lowercase)
        .collect();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            word.push(c);
            i += 1;
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if c == '\'' {
            let clitic = CLITICS.iter().find(|cl| {
                let len = cl.chars().count();
                let end = i + 1 + len;
                end <= chars.len()
                    && chars[i + 1..end].iter().copied().eq(cl.chars())
                    && chars.get(end).is_none_or(|n| !n.is_alphanumeric())
            });
            if let Some(cl) = clitic {
                tokens.push(format!("'{cl}"));
                i += 1 + cl.chars().count();
                continue;
            }
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
        i += 1;
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// (clipped matches, candidate n-gram count) for one pair and order.
fn overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, cand.len().saturating_sub(n - 1))
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn check_pairs<T, U>(generated: &[T], references: &[U]) -> Result<(), MetricError> {
    if generated.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            generated: generated.len(),
            reference: references.len(),
        });
    }
    if generated.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(())
}

/// Corpus BLEU up to order `max_n`: clipped n-gram counts are summed over
/// the corpus before taking the geometric mean of precisions. Orders with
/// no candidate n-grams at all are left out of the mean.
pub fn corpus_bleu(generated: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<f64, MetricError> {
    check_pairs(generated, references)?;
    if max_n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let c: usize = generated.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return Err(MetricError::EmptyCandidates);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let (m, t) = generated
            .iter()
            .zip(references)
            .map(|(g, rf)| overlap(g, rf, n))
            .fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
        if t == 0 {
            continue;
        }
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
        orders += 1;
    }
    Ok(brevity_penalty(c, r) * (log_sum / orders as f64).exp())
}

pub const SENTENCE_BLEU_EPSILON: f64 = 1e-9;

/// Mean of per-pair BLEU with zero match counts replaced by 1e-9. Pairs
/// with an empty candidate score 0.
pub fn sentence_bleu(generated: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<f64, MetricError> {
    check_pairs(generated, references)?;
    if max_n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let mut total = 0.0;
    for (g, rf) in generated.iter().zip(references) {
        if g.is_empty() {
            continue;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 1..=max_n {
            let (m, t) = overlap(g, rf, n);
            if t == 0 {
                continue;
            }
            let m = if m == 0 { SENTENCE_BLEU_EPSILON } else { m as f64 };
            log_sum += (m / t as f64).ln();
            orders += 1;
        }
        total += brevity_penalty(g.len(), rf.len()) * (log_sum / orders as f64).exp();
    }
    Ok(total / generated.len() as f64)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over pairs of the LCS F1 (β = 1).
pub fn rouge_l(generated: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, MetricError> {
    check_pairs(generated, references)?;
    let sum: f64 = generated
        .iter()
        .zip(references)
        .map(|(g, r)| {
            let l = lcs_len(g, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / g.len() as f64;
            let rc = l / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .sum();
    Ok(sum / generated.len() as f64)
}

/// Distinct n-grams over total n-grams, pooled across the whole corpus.
pub fn distinct_n(generated: &[Vec<String>], n: usize) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let mut seen: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for g in generated {
        if g.len() >= n {
            for w in g.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(MetricError::NoNgrams(n));
    }
    Ok(seen.len() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Labels {
    /// Labels occurring in references or predictions.
    #[default]
    Present,
    /// All eight strategies; absent ones count as F1 = 0.
    All,
}

pub fn macro_f1(references: &[Strategy], predictions: &[Strategy], labels: F1Labels) -> Result<f64, MetricError> {
    check_pairs(predictions, references)?;
    let set: Vec<Strategy> = match labels {
        F1Labels::All => Strategy::ALL.to_vec(),
        F1Labels::Present => Strategy::ALL
            .into_iter()
            .filter(|s| references.contains(s) || predictions.contains(s))
            .collect(),
    };
    let sum: f64 = set
        .iter()
        .map(|&label| {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (r, p) in references.iter().zip(predictions) {
                match (*r == label, *p == label) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / set.len() as f64)
}

/// exp of the negative mean natural-log probability. `None` when there are
/// no logprobs to average.
pub fn perplexity(logprobs: &[f64]) -> Result<Option<f64>, MetricError> {
    if logprobs.is_empty() {
        return Ok(None);
    }
    if let Some(bad) = logprobs.iter().find(|l| !l.is_finite() || **l > 0.0) {
        return Err(MetricError::BadLogprob(bad.to_string()));
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok(Some((-mean).exp()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeled {
    pub strategy: Strategy,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub conversation_id: String,
    pub turn: usize,
    pub generated: Labeled,
    pub reference: Labeled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuLevel {
    #[default]
    Corpus,
    Sentence,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub bleu: BleuLevel,
    pub f1_labels: F1Labels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    F1,
    Ppl,
    B2,
    B4,
    D1,
    D2,
    Rl,
}

impl Metric {
    pub const ALL: [Metric; 7] = [Metric::F1, Metric::Ppl, Metric::B2, Metric::B4, Metric::D1, Metric::D2, Metric::Rl];

    pub fn header(self) -> &'static str {
        match self {
            Metric::F1 => "F1",
            Metric::Ppl => "PPL",
            Metric::B2 => "B-2",
            Metric::B4 => "B-4",
            Metric::D1 => "D-1",
            Metric::D2 => "D-2",
            Metric::Rl => "R-L",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Ppl
    }

    /// Factor applied in reports.
    pub fn scale(self) -> f64 {
        if self == Metric::Ppl {
            1.0
        } else {
            100.0
        }
    }
}

/// Raw metric values; `ppl` is `None` when the scoring backend gave no
/// logprobs, and D-n is `None` when the generations have no n-grams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub f1: f64,
    pub ppl: Option<f64>,
    pub b2: f64,
    pub b4: f64,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
    pub rl: f64,
}

impl MetricValues {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::F1 => Some(self.f1),
            Metric::Ppl => self.ppl,
            Metric::B2 => Some(self.b2),
            Metric::B4 => Some(self.b4),
            Metric::D1 => self.d1,
            Metric::D2 => self.d2,
            Metric::Rl => Some(self.rl),
        }
    }

    /// Values as shown in reports (×100 except PPL).
    pub fn scaled(&self) -> MetricValues {
        let s = |v: f64| v * 100.0;
        MetricValues {
            f1: s(self.f1),
            ppl: self.ppl,
            b2: s(self.b2),
            b4: s(self.b4),
            d1: self.d1.map(s),
            d2: self.d2.map(s),
            rl: s(self.rl),
        }
    }

    /// Reverses [`MetricValues::scaled`].
    pub fn from_scaled(scaled: &[(Metric, Option<f64>)]) -> Option<MetricValues> {
        let get = |m: Metric| scaled.iter().find(|(k, _)| *k == m).and_then(|(_, v)| *v).map(|v| v / m.scale());
        Some(MetricValues {
            f1: get(Metric::F1)?,
            ppl: get(Metric::Ppl),
            b2: get(Metric::B2)?,
            b4: get(Metric::B4)?,
            d1: get(Metric::D1),
            d2: get(Metric::D2),
            rl: get(Metric::Rl)?,
        })
    }
}

/// All metrics over `pairs`. `logprobs` are the scoring backend's
/// per-token logprobs over the reference targets, when available.
pub fn evaluate(pairs: &[EvalPair], logprobs: Option<&[f64]>, opts: &MetricOptions) -> Result<MetricValues, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let gen: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.generated.response)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.reference.response)).collect();
    let bleu = |n| match opts.bleu {
        BleuLevel::Corpus => corpus_bleu(&gen, &refs, n),
        BleuLevel::Sentence => sentence_bleu(&gen, &refs, n),
    };
    let (b2, b4) = match (bleu(2), bleu(4)) {
        (Err(MetricError::EmptyCandidates), _) => (0.0, 0.0),
        (a, b) => (a?, b?),
    };
    let distinct = |n| match distinct_n(&gen, n) {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::NoNgrams(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let ref_s: Vec<Strategy> = pairs.iter().map(|p| p.reference.strategy).collect();
    let gen_s: Vec<Strategy> = pairs.iter().map(|p| p.generated.strategy).collect();
    Ok(MetricValues {
        f1: macro_f1(&ref_s, &gen_s, opts.f1_labels)?,
        ppl: match logprobs {
            Some(l) => perplexity(l)?,
            None => None,
        },
        b2,
        b4,
        d1: distinct(1)?,
        d2: distinct(2)?,
        rl: rouge_l(&gen, &refs)?,
    })
}

/// Signed relative change of `other` against `base`, positive when
/// `other` is better: (o − b)/b, or (b − o)/b for PPL. `None` where either
/// value is missing or the baseline is zero.
pub fn relative_change(base: &MetricValues, other: &MetricValues) -> Vec<(Metric, Option<f64>)> {
    Metric::ALL
        .into_iter()
        .map(|m| {
            let rc = match (base.get(m), other.get(m)) {
                (Some(b), Some(o)) if b != 0.0 => Some(if m.higher_is_better() { (o - b) / b } else { (b - o) / b }),
                _ => None,
            };
            (m, rc)
        })
        .collect()
}

/// `↑31.0%` / `↓4.2%` with one decimal; `n/a` when undefined.
pub fn format_rc(rc: Option<f64>) -> String {
    match rc {
        None => "n/a".to_string(),
        Some(v) => {
            let pct = v * 100.0;
            let arrow = if pct < 0.0 { '↓' } else { '↑' };
            format!("{arrow}{:.1}%", pct.abs())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub label: String,
    pub pairs: usize,
    pub generation_backend: String,
    pub scoring_backend: Option<String>,
    pub options: MetricOptions,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// A metric row plus how it was produced. Serializes with values scaled
/// for reading (`scores`) and raw (`raw`).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub values: MetricValues,
    pub meta: ReportMeta,
}

#[derive(Serialize, Deserialize)]
struct ReportDoc {
    scores: std::collections::BTreeMap<String, Option<f64>>,
    raw: MetricValues,
    meta: ReportMeta,
}

impl Serialize for MetricReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let scaled = self.values.scaled();
        ReportDoc {
            scores: Metric::ALL.into_iter().map(|m| (m.header().to_string(), scaled.get(m))).collect(),
            raw: self.values,
            meta: self.meta.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetricReport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = ReportDoc::deserialize(d)?;
        Ok(MetricReport {
            values: doc.raw,
            meta: doc.meta,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".to_string())
}

/// Aligned text table: one row per report, label first, then the seven
/// metric columns; optional extra rows of preformatted cells.
pub fn render_table(rows: &[(String, Vec<String>)]) -> String {
    let mut header = vec!["Model".to_string()];
    header.extend(Metric::ALL.iter().map(|m| m.header().to_string()));
    let mut all = vec![header];
    for (label, cells) in rows {
        let mut r = vec![label.clone()];
        r.extend(cells.iter().cloned());
        all.push(r);
    }
    let cols = all.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| all.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in all.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = widths[c] - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
        }
    }
    out
}

pub fn report_cells(values: &MetricValues) -> Vec<String> {
    let s = values.scaled();
    Metric::ALL.iter().map(|m| cell(s.get(*m))).collect()
}

pub fn rc_cells(rc: &[(Metric, Option<f64>)]) -> Vec<String> {
    Metric::ALL
        .iter()
        .map(|m| format_rc(rc.iter().find(|(k, _)| k == m).and_then(|(_, v)| *v)))
        .collect()
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_table(&[(self.meta.label.clone(), report_cells(&self.values))]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as _;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("I'm OK."), vec!["i", "'m", "ok", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("You\u{2019}re right, it's fine!"), vec!["you", "'re", "right", ",", "it", "'s", "fine", "!"]);
        assert_eq!(tokenize("don't 'sup"), vec!["don", "'t", "'", "sup"]);
        assert_eq!(tokenize("students' 3.5"), vec!["students", "'", "3", ".", "5"]);
    }

    #[test]
    fn bleu_hand_example() {
        let b = corpus_bleu(&[toks("a b c")], &[toks("a b d")], 2).unwrap();
        assert!((b - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_and_errors() {
        let c = vec![toks("i hear you"), toks("that sounds hard to deal with")];
        assert_eq!(corpus_bleu(&c, &c, 4).unwrap(), 1.0);
        assert_eq!(sentence_bleu(&c, &c, 4).unwrap(), 1.0);
        assert_eq!(corpus_bleu(&[vec![]], &[toks("a")], 2), Err(MetricError::EmptyCandidates));
        assert_eq!(corpus_bleu(&[], &[], 2), Err(MetricError::EmptyInput));
    }

    #[test]
    fn rouge_hand_example() {
        let r = rouge_l(&[toks("a b c d")], &[toks("a c d")]).unwrap();
        assert!((r - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[toks("x y")], &[toks("x y")]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[toks("x y")], &[toks("z w")]).unwrap(), 0.0);
    }

    #[test]
    fn distinct_hand_examples() {
        assert!((distinct_n(&[toks("a a b")], 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[toks("a b"), toks("a b")], 2).unwrap(), 0.5);
        assert_eq!(distinct_n(&[toks("a b c"), toks("d e")], 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&[toks("a")], 2), Err(MetricError::NoNgrams(2)));
    }

    #[test]
    fn macro_f1_hand_examples() {
        use crate::corpus::Strategy::*;
        let r = [Question, Information, Others];
        assert_eq!(macro_f1(&r, &r, F1Labels::Present).unwrap(), 1.0);
        let f = macro_f1(&[Question, Information], &[Question, Question], F1Labels::Present).unwrap();
        // Question: tp 1 fp 1 fn 0 -> 2/3; Information: tp 0 fp 0 fn 1 -> 0.
        assert!((f - 1.0 / 3.0).abs() < 1e-12);
        let f = macro_f1(&[Question, Information, Question, Information], &[Question, Question, Information, Information], F1Labels::Present).unwrap();
        assert!((f - 0.5).abs() < 1e-12);
        let refs = [Question, Information, Others, SelfDisclosure];
        let preds = [Question; 4];
        let f = macro_f1(&refs, &preds, F1Labels::Present).unwrap();
        assert!((f - (2.0 / 5.0) / 4.0).abs() < 1e-12);
        assert!((macro_f1(&r, &r, F1Labels::All).unwrap() - 3.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn two_label_hand_confusion() {
        use crate::corpus::Strategy::*;
        // A = Question (tp 1, fp 1, fn 0), B = Information (tp 1, fp 0, fn 1).
        let refs = [Question, Information, Information];
        let preds = [Question, Information, Question];
        assert!((macro_f1(&refs, &preds, F1Labels::Present).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_closed_forms() {
        let q = (0.25f64).ln();
        assert!((perplexity(&[q; 7]).unwrap().unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), Some(1.0));
        assert_eq!(perplexity(&[]).unwrap(), None);
        assert!(perplexity(&[0.5]).is_err());
        assert!(perplexity(&[f64::NEG_INFINITY]).is_err());
    }

    fn row(f1: f64, ppl: f64, b2: f64, b4: f64, d1: f64, d2: f64, rl: f64) -> MetricValues {
        MetricValues {
            f1,
            ppl: Some(ppl),
            b2,
            b4,
            d1: Some(d1),
            d2: Some(d2),
            rl,
        }
    }

    #[test]
    fn relative_change_and_format() {
        let base = row(25.16, 11.66, 12.62, 4.87, 3.80, 21.01, 19.86);
        let full = row(32.96, 8.76, 19.01, 8.92, 4.68, 25.15, 26.37);
        let rc = relative_change(&base, &full);
        let cells = rc_cells(&rc);
        assert_eq!(cells, vec!["↑31.0%", "↑24.9%", "↑50.6%", "↑83.2%", "↑23.2%", "↑19.7%", "↑32.8%"]);
        let worse = relative_change(&full, &base);
        assert_eq!(format_rc(worse[1].1), "↓33.1%");
        let zero = relative_change(&row(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0), &full);
        assert_eq!(zero[0].1, None);
    }

    #[test]
    fn report_json_scales_all_but_ppl() {
        let rep = MetricReport {
            values: row(0.5, 7.0, 0.2, 0.1, 0.03, 0.2, 0.25),
            meta: ReportMeta {
                label: "x".into(),
                pairs: 2,
                generation_backend: "mock".into(),
                scoring_backend: None,
                options: MetricOptions::default(),
                notes: vec![],
            },
        };
        let v = serde_json::to_value(&rep).unwrap();
        assert_eq!(v["scores"]["F1"], 50.0);
        assert_eq!(v["scores"]["PPL"], 7.0);
        assert_eq!(v["raw"]["f1"], 0.5);
        let back: MetricReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, rep);
        let table = rep.to_string();
        assert!(table.lines().next().unwrap().starts_with("Model"));
        assert!(table.contains("50.00"));
    }

    fn corpus() -> impl proptest::strategy::Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
        let sent = proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..8)
            .prop_map(|v| v.into_iter().map(String::from).collect::<Vec<_>>());
        proptest::collection::vec((sent.clone(), sent), 1..12)
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(s in "[a-zA-Z' .,!?’-]{0,40}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }

        #[test]
        fn bounds_and_permutation_invariance(pairs in corpus(), rot in 0usize..12) {
            let (g, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let k = rot % g.len();
            let mut g2 = g.clone(); g2.rotate_left(k);
            let mut r2 = r.clone(); r2.rotate_left(k);
            for n in [2, 4] {
                let a = corpus_bleu(&g, &r, n).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!((a - corpus_bleu(&g2, &r2, n).unwrap()).abs() < 1e-12);
            }
            let rl = rouge_l(&g, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&rl));
            prop_assert!((rl - rouge_l(&g2, &r2).unwrap()).abs() < 1e-12);
            let d1 = distinct_n(&g, 1).unwrap();
            prop_assert!((0.0..=1.0).contains(&d1));
            prop_assert_eq!(d1, distinct_n(&g2, 1).unwrap());
        }

        #[test]
        fn b4_never_exceeds_b2(pairs in corpus()) {
            let (g, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            prop_assert!(corpus_bleu(&g, &r, 4).unwrap() <= corpus_bleu(&g, &r, 2).unwrap() + 1e-12);
        }

        #[test]
        fn ppl_at_least_one(lps in proptest::collection::vec(-10.0f64..=0.0, 1..50)) {
            prop_assert!(perplexity(&lps).unwrap().unwrap() >= 1.0 - 1e-12);
        }
    }
}
