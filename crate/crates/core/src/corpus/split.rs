//! Seeded 70/15/15 partitioning and nested fractional training samples.
//!
//! Sampling orders the candidates by a seeded permutation and takes a prefix,
//! so for a fixed seed the sample at fraction `f1` is contained in the sample
//! at any `f2 > f1`.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, CorpusError, Partition};

const PARTITION_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub fraction: f64,
    pub seed: u64,
    /// Interleave problem types so every prefix is close to proportional.
    #[serde(default)]
    pub stratify: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            fraction: 1.0,
            seed: 7,
            stratify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Conversation>,
    pub validation: Vec<Conversation>,
    pub test: Vec<Conversation>,
    pub fraction: f64,
    pub seed: u64,
    pub stratified: bool,
    /// Size of the full training partition before subsampling.
    pub full_train_size: usize,
}

impl CorpusSplit {
    pub fn ids(list: &[Conversation]) -> Vec<&str> {
        list.iter().map(|c| c.id.as_str()).collect()
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn by_id(list: &[Conversation]) -> Vec<&Conversation> {
    let mut sorted: Vec<&Conversation> = list.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted
}

/// Keeps `source` order, retaining members of `chosen`.
fn retain_in_order(source: &[Conversation], chosen: &HashSet<&str>) -> Vec<Conversation> {
    source
        .iter()
        .filter(|c| chosen.contains(c.id.as_str()))
        .cloned()
        .collect()
}

/// Train/validation/test partition. Conversations carrying a source
/// partition keep it; the rest are shuffled with `seed` and cut 70/15/15.
pub fn standard_partition(
    full: &[Conversation],
    seed: u64,
) -> (Vec<Conversation>, Vec<Conversation>, Vec<Conversation>) {
    let mut train = HashSet::new();
    let mut valid = HashSet::new();
    let mut test = HashSet::new();
    let mut unassigned = Vec::new();
    for c in by_id(full) {
        match c.partition {
            Some(Partition::Train) => {
                train.insert(c.id.as_str());
            }
            Some(Partition::Validation) => {
                valid.insert(c.id.as_str());
            }
            Some(Partition::Test) => {
                test.insert(c.id.as_str());
            }
            None => unassigned.push(c.id.as_str()),
        }
    }
    unassigned.shuffle(&mut rng(seed, PARTITION_STREAM));
    let n = unassigned.len();
    let n_train = (0.70 * n as f64).round() as usize;
    let n_valid = ((0.15 * n as f64).round() as usize).min(n - n_train);
    for (i, id) in unassigned.into_iter().enumerate() {
        if i < n_train {
            train.insert(id);
        } else if i < n_train + n_valid {
            valid.insert(id);
        } else {
            test.insert(id);
        }
    }
    (
        retain_in_order(full, &train),
        retain_in_order(full, &valid),
        retain_in_order(full, &test),
    )
}

/// Seeded permutation of `train`, independent of input order.
fn sample_order(train: &[Conversation], seed: u64, stratify: bool) -> Vec<&str> {
    let mut rng = rng(seed, SAMPLE_STREAM);
    let sorted = by_id(train);
    if !stratify {
        let mut ids: Vec<&str> = sorted.iter().map(|c| c.id.as_str()).collect();
        ids.shuffle(&mut rng);
        return ids;
    }
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for c in sorted {
        strata.entry(c.problem_type.as_str()).or_default().push(c.id.as_str());
    }
    // Each member gets its relative position inside its shuffled stratum;
    // sorting on that position interleaves strata proportionally.
    let mut keyed: Vec<(f64, u64, &str)> = Vec::new();
    for ids in strata.values_mut() {
        ids.shuffle(&mut rng);
        let len = ids.len() as f64;
        for (rank, id) in ids.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / len, rng.random::<u64>(), id));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(b.2)));
    keyed.into_iter().map(|(_, _, id)| id).collect()
}

fn check_fraction(fraction: f64) -> Result<(), CorpusError> {
    if fraction.is_finite() && fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(CorpusError::InvalidFraction(fraction))
    }
}

/// Takes `round(fraction * |train|)` conversations from `train`.
pub fn sample_fraction(
    train: &[Conversation],
    fraction: f64,
    seed: u64,
    stratify: bool,
) -> Result<Vec<Conversation>, CorpusError> {
    check_fraction(fraction)?;
    let take = (fraction * train.len() as f64).round() as usize;
    let chosen: HashSet<&str> = sample_order(train, seed, stratify).into_iter().take(take).collect();
    Ok(retain_in_order(train, &chosen))
}

/// Standard partition followed by an unstratified fractional train sample.
pub fn sample_split(full: &[Conversation], fraction: f64, seed: u64) -> Result<CorpusSplit, CorpusError> {
    sample_split_with(
        full,
        &SplitOptions {
            fraction,
            seed,
            stratify: false,
        },
    )
}

pub fn sample_split_with(full: &[Conversation], opts: &SplitOptions) -> Result<CorpusSplit, CorpusError> {
    check_fraction(opts.fraction)?;
    let (train, validation, test) = standard_partition(full, opts.seed);
    let full_train_size = train.len();
    let train = sample_fraction(&train, opts.fraction, opts.seed, opts.stratify)?;
    Ok(CorpusSplit {
        train,
        validation,
        test,
        fraction: opts.fraction,
        seed: opts.seed,
        stratified: opts.stratify,
        full_train_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Metadata, Speaker, Utterance};
    use proptest::prelude::*;

    fn conv(id: usize, problem: &str, partition: Option<Partition>) -> Conversation {
        Conversation {
            id: format!("c{id:04}"),
            situation: "s".into(),
            emotion_type: "e".into(),
            problem_type: problem.into(),
            partition,
            utterances: vec![
                Utterance::new(1, Speaker::User, "hi"),
                Utterance::new(2, Speaker::System, "hello"),
            ],
            metadata: Metadata::new(),
        }
    }

    fn corpus(n: usize, partition: Option<Partition>) -> Vec<Conversation> {
        let problems = ["job crisis", "breakup", "depression", "friends", "academic"];
        (0..n).map(|i| conv(i, problems[i % 5], partition)).collect()
    }

    fn id_set(list: &[Conversation]) -> HashSet<String> {
        list.iter().map(|c| c.id.clone()).collect()
    }

    #[test]
    fn ten_percent_of_1300_train_is_130() {
        let full = corpus(1300, Some(Partition::Train));
        let split = sample_split(&full, 0.10, 7).unwrap();
        assert_eq!(split.full_train_size, 1300);
        assert_eq!(split.train.len(), 130);
    }

    #[test]
    fn full_fraction_is_identity_membership() {
        let full = corpus(40, Some(Partition::Train));
        let split = sample_split(&full, 1.0, 99).unwrap();
        assert_eq!(id_set(&split.train), id_set(&full));
    }

    #[test]
    fn repeated_sampling_is_identical_and_nested() {
        let full = corpus(200, Some(Partition::Train));
        let a = sample_split(&full, 0.25, 7).unwrap();
        let b = sample_split(&full, 0.25, 7).unwrap();
        assert_eq!(id_set(&a.train), id_set(&b.train));
        let small = sample_split(&full, 0.10, 7).unwrap();
        assert!(id_set(&small.train).is_subset(&id_set(&a.train)));
    }

    #[test]
    fn fraction_out_of_range_is_rejected() {
        let full = corpus(10, None);
        for f in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(sample_split(&full, f, 1), Err(CorpusError::InvalidFraction(_))));
        }
    }

    #[test]
    fn standard_partition_is_70_15_15_and_disjoint() {
        let full = corpus(1300, None);
        let (train, valid, test) = standard_partition(&full, 3);
        assert_eq!((train.len(), valid.len(), test.len()), (910, 195, 195));
        let (t, v, s) = (id_set(&train), id_set(&valid), id_set(&test));
        assert!(t.is_disjoint(&v) && t.is_disjoint(&s) && v.is_disjoint(&s));
    }

    #[test]
    fn source_partition_wins_over_shuffle() {
        let mut full = corpus(20, None);
        full[0].partition = Some(Partition::Test);
        for seed in 0..10 {
            let (_, _, test) = standard_partition(&full, seed);
            assert!(test.iter().any(|c| c.id == full[0].id));
        }
    }

    #[test]
    fn membership_ignores_input_order() {
        let full = corpus(60, Some(Partition::Train));
        let mut reversed = full.clone();
        reversed.reverse();
        let a = sample_split(&full, 0.3, 11).unwrap();
        let b = sample_split(&reversed, 0.3, 11).unwrap();
        assert_eq!(id_set(&a.train), id_set(&b.train));
    }

    #[test]
    fn stratified_sample_balances_problem_types() {
        let full = corpus(500, Some(Partition::Train));
        let sample = sample_fraction(&full, 0.10, 7, true).unwrap();
        assert_eq!(sample.len(), 50);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &sample {
            *counts.entry(c.problem_type.as_str()).or_default() += 1;
        }
        assert!(counts.values().all(|&n| n == 10), "{counts:?}");
    }

    proptest! {
        #[test]
        fn prefix_property_holds(n in 1usize..120, seed in any::<u64>(), a in 1u32..=100, b in 1u32..=100, stratify in any::<bool>()) {
            let full = corpus(n, Some(Partition::Train));
            let (lo, hi) = (a.min(b) as f64 / 100.0, a.max(b) as f64 / 100.0);
            let small = sample_fraction(&full, lo, seed, stratify).unwrap();
            let large = sample_fraction(&full, hi, seed, stratify).unwrap();
            prop_assert!(id_set(&small).is_subset(&id_set(&large)));
            prop_assert_eq!(small.len(), (lo * n as f64).round() as usize);
        }
    }
}
