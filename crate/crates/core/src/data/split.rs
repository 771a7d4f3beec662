use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::LabelSet;
use crate::data::corpus::{Corpus, LabeledSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

/// Roughly a tenth of `n`, at least one.
fn tenth(n: usize) -> usize {
    n.div_ceil(10).max(1)
}

/// Subject-disjoint folds. Subjects are shuffled with `seed` and dealt
/// round-robin into `k` groups; fold `i` tests on group `i` and validates
/// on about a tenth of the remaining subjects. With `k = 1` a single fold
/// holds out about a tenth of the subjects for test and another tenth for
/// validation.
pub fn subject_independent_folds(corpus: &Corpus, k: usize, seed: u64) -> Result<SplitPlan> {
    let mut subjects: Vec<&str> = corpus.subjects();
    subjects.sort_unstable();
    let needed = if k == 1 { 2 } else { k };
    if k == 0 || subjects.len() < needed {
        return Err(Error::TooFewSubjects {
            subjects: subjects.len(),
            folds: k,
        });
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let collect = |subs: &[&str]| -> Vec<String> {
        let set: HashSet<&str> = subs.iter().copied().collect();
        corpus
            .sequences
            .iter()
            .filter(|s| set.contains(s.subject_id.as_str()))
            .map(|s| s.sequence_id.clone())
            .collect()
    };

    let groups: Vec<Vec<&str>> = if k == 1 {
        vec![subjects[..tenth(subjects.len()).min(subjects.len() - 1)].to_vec()]
    } else {
        (0..k)
            .map(|g| subjects.iter().skip(g).step_by(k).copied().collect())
            .collect()
    };

    let folds = groups
        .iter()
        .enumerate()
        .map(|(i, test)| {
            let test_set: HashSet<&str> = test.iter().copied().collect();
            let mut rest: Vec<&str> = subjects.iter().copied().filter(|s| !test_set.contains(s)).collect();
            // Rotate so each fold validates on different subjects.
            let rot = if rest.is_empty() {
                0
            } else {
                (i * tenth(rest.len())) % rest.len()
            };
            rest.rotate_left(rot);
            let n_val = if rest.len() > 1 {
                tenth(subjects.len()).min(rest.len() - 1)
            } else {
                0
            };
            let (val, train) = rest.split_at(n_val);
            Fold {
                train: collect(train),
                validation: collect(val),
                test: collect(test),
            }
        })
        .collect();
    Ok(SplitPlan { folds })
}

/// Checks that every fold is a disjoint cover of the corpus with no subject
/// shared between train and test or train and validation.
pub fn check_split(corpus: &Corpus, plan: &SplitPlan) -> Result<()> {
    let subject_of: BTreeMap<&str, &str> = corpus
        .sequences
        .iter()
        .map(|s| (s.sequence_id.as_str(), s.subject_id.as_str()))
        .collect();
    for (i, fold) in plan.folds.iter().enumerate() {
        let mut all: Vec<&str> = fold
            .train
            .iter()
            .chain(&fold.validation)
            .chain(&fold.test)
            .map(String::as_str)
            .collect();
        all.sort_unstable();
        let mut expected: Vec<&str> = subject_of.keys().copied().collect();
        expected.sort_unstable();
        if all != expected {
            return Err(Error::parse(
                "split plan",
                format!("fold {i} does not cover the corpus exactly once"),
            ));
        }
        let subjects = |ids: &[String]| -> HashSet<&str> { ids.iter().map(|id| subject_of[id.as_str()]).collect() };
        let train = subjects(&fold.train);
        if !train.is_disjoint(&subjects(&fold.test)) || !train.is_disjoint(&subjects(&fold.validation)) {
            return Err(Error::parse(
                "split plan",
                format!("fold {i} shares subjects across splits"),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorpusSplit {
    pub train: Corpus,
    pub test: Corpus,
    /// Labels present in every corpus, in the test corpus's order.
    pub shared: LabelSet,
    pub dropped_train_sequences: usize,
    pub dropped_test_sequences: usize,
}

fn restrict(seq: &LabeledSequence, from: &LabelSet, to: &LabelSet, prefix: Option<&str>) -> Option<LabeledSequence> {
    let mut out = seq.clone();
    for f in &mut out.frames {
        f.label = to.index_of(from.name(f.label)?)?;
    }
    if let Some(p) = prefix {
        out.sequence_id = format!("{p}/{}", seq.sequence_id);
        out.subject_id = format!("{p}/{}", seq.subject_id);
    }
    Some(out)
}

/// Leave-one-corpus-out split. Labels are matched by name; sequences with
/// any frame labeled outside the shared set are dropped. Training ids are
/// prefixed with their corpus name.
pub fn cross_corpus_split(corpora: &[Corpus], test_name: &str) -> Result<CrossCorpusSplit> {
    let test = corpora
        .iter()
        .find(|c| c.name == test_name)
        .ok_or_else(|| Error::UnknownCorpus(test_name.to_string()))?;
    let others: Vec<&Corpus> = corpora.iter().filter(|c| c.name != test_name).collect();
    if others.is_empty() {
        return Err(Error::InvalidConfig(
            "cross-corpus evaluation needs at least two corpora".into(),
        ));
    }
    let shared_names: Vec<String> = test
        .label_set
        .names()
        .iter()
        .filter(|n| others.iter().all(|c| c.label_set.index_of(n).is_some()))
        .cloned()
        .collect();
    if shared_names.len() < 2 {
        return Err(Error::NoSharedLabels);
    }
    let shared = LabelSet::new(shared_names)?;

    let mut dropped_train = 0;
    let mut train_seqs = Vec::new();
    for c in &others {
        for s in &c.sequences {
            match restrict(s, &c.label_set, &shared, Some(&c.name)) {
                Some(r) => train_seqs.push(r),
                None => dropped_train += 1,
            }
        }
    }
    let test_seqs: Vec<LabeledSequence> = test
        .sequences
        .iter()
        .filter_map(|s| restrict(s, &test.label_set, &shared, None))
        .collect();
    let dropped_test = test.sequences.len() - test_seqs.len();
    let train_name = others.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join("+");
    Ok(CrossCorpusSplit {
        train: Corpus::new(train_name, shared.clone(), train_seqs)?,
        test: Corpus::new(test.name.clone(), shared.clone(), test_seqs)?,
        shared,
        dropped_train_sequences: dropped_train,
        dropped_test_sequences: dropped_test,
    })
}
