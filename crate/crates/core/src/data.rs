//! Corpus ingestion: JSONL reading, label vocabulary, splits and batching.
//!
//! Each JSONL line is an object `{"text": "...", "labels": ["...", ...]}`.
//! Both vocabularies are built from the training split only; labels that
//! appear only in valid/test are dropped and counted.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenVocabulary, PAD};

/// One corpus line as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSample {
    pub text: String,
    pub labels: Vec<String>,
}

impl RawSample {
    /// Removes repeated labels, keeping the first occurrence.
    /// Returns how many were removed.
    pub fn dedup_labels(&mut self) -> usize {
        let before = self.labels.len();
        let mut seen = std::collections::HashSet::new();
        self.labels.retain(|l| seen.insert(l.clone()));
        before - self.labels.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JsonlFile {
    pub samples: Vec<RawSample>,
    /// Repeated labels removed while loading.
    pub duplicate_labels: usize,
}

/// Reads a JSONL corpus file. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<JsonlFile> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    parse_jsonl(BufReader::new(file), path)
}

pub fn parse_jsonl(reader: impl BufRead, path: &Path) -> Result<JsonlFile> {
    let mut out = JsonlFile::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut sample: RawSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.duplicate_labels += sample.dedup_labels();
        out.samples.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[RawSample]) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_jsonl_to(&mut w, samples)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_jsonl_to(w: &mut impl Write, samples: &[RawSample]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Bijection between `K` label names and `0..K`; index `K` is the empty label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    /// Assigns indices in order of first occurrence.
    pub fn build<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::default();
        for l in labels {
            if !v.index.contains_key(l) {
                v.index.insert(l.to_string(), v.names.len());
                v.names.push(l.to_string());
            }
        }
        v
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate label name {n:?}")));
            }
        }
        Ok(Self { names, index })
    }

    /// Number of real labels `K`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// The reserved empty-label index, equal to `K`.
    pub fn null_index(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub text: String,
    /// `[CLS] … [SEP]` token indices, not yet truncated.
    pub tokens: Vec<usize>,
    /// Distinct label indices in `0..K`.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Indexes raw samples against existing vocabularies. Labels the
    /// vocabulary does not know are dropped.
    pub fn index(raw: &[RawSample], tokens: &TokenVocabulary, labels: &LabelVocabulary) -> Self {
        Corpus::index_split(raw, tokens, labels, &mut CorpusStats::default())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn max_labels(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.labels.len())
            .max()
            .unwrap_or(0)
    }

    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub duplicate_labels: usize,
    /// Valid/test labels not present in the training split.
    pub dropped_unseen_labels: usize,
}

/// Train/valid/test splits with their shared vocabularies.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub tokens: TokenVocabulary,
    pub labels: LabelVocabulary,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub stats: CorpusStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, valid or test)"
            ))),
        }
    }
}

impl Corpus {
    pub fn from_raw(train: &[RawSample], valid: &[RawSample], test: &[RawSample]) -> Result<Self> {
        for (i, s) in train.iter().enumerate() {
            if s.labels.is_empty() {
                return Err(Error::Validation(format!(
                    "training sample {} has no labels",
                    i + 1
                )));
            }
        }
        let tokens = TokenVocabulary::build(train.iter().map(|s| s.text.as_str()));
        let labels = LabelVocabulary::build(
            train
                .iter()
                .flat_map(|s| s.labels.iter().map(String::as_str)),
        );
        let mut stats = CorpusStats::default();
        let train = Self::index_split(train, &tokens, &labels, &mut stats);
        let valid = Self::index_split(valid, &tokens, &labels, &mut stats);
        let test = Self::index_split(test, &tokens, &labels, &mut stats);
        Ok(Self {
            tokens,
            labels,
            train,
            valid,
            test,
            stats,
        })
    }

    pub fn load(train: &Path, valid: &Path, test: &Path) -> Result<Self> {
        let tr = load_jsonl(train)?;
        let va = load_jsonl(valid)?;
        let te = load_jsonl(test)?;
        let mut corpus = Self::from_raw(&tr.samples, &va.samples, &te.samples)?;
        corpus.stats.duplicate_labels +=
            tr.duplicate_labels + va.duplicate_labels + te.duplicate_labels;
        Ok(corpus)
    }

    fn index_split(
        raw: &[RawSample],
        tokens: &TokenVocabulary,
        labels: &LabelVocabulary,
        stats: &mut CorpusStats,
    ) -> Dataset {
        let samples = raw
            .iter()
            .map(|r| {
                let mut idx = Vec::with_capacity(r.labels.len());
                for name in &r.labels {
                    match labels.index_of(name) {
                        Some(i) if !idx.contains(&i) => idx.push(i),
                        Some(_) => stats.duplicate_labels += 1,
                        None => stats.dropped_unseen_labels += 1,
                    }
                }
                Sample {
                    text: r.text.clone(),
                    tokens: tokens.encode(&r.text),
                    labels: idx,
                }
            })
            .collect();
        Dataset { samples }
    }

    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// A right-padded batch. `mask[i][j]` is false exactly at padding positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Shuffled mini-batches for one epoch. The order depends only on
/// `(seed, epoch)`.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        Ok(Self {
            dataset,
            order,
            batch_size,
            cursor: 0,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let width = indices
            .iter()
            .map(|&i| self.dataset.samples[i].tokens.len())
            .max()
            .unwrap_or(0);
        let mut tokens = Vec::with_capacity(indices.len());
        let mut mask = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            let s = &self.dataset.samples[i];
            let mut row = s.tokens.clone();
            let mut m = vec![true; row.len()];
            row.resize(width, PAD);
            m.resize(width, false);
            tokens.push(row);
            mask.push(m);
            labels.push(s.labels.clone());
        }
        Some(Batch {
            indices,
            tokens,
            mask,
            labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(text: &str, labels: &[&str]) -> RawSample {
        RawSample {
            text: text.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn parses_two_label_line() {
        let line = r#"{"text":"add song to playlist and book a table","labels":["AddToPlaylist","BookRestaurant"]}"#;
        let f = parse_jsonl(line.as_bytes(), Path::new("x.jsonl")).unwrap();
        assert_eq!(f.samples.len(), 1);
        assert_eq!(f.samples[0].labels.len(), 2);
    }

    #[test]
    fn duplicate_labels_are_removed_and_counted() {
        let line = r#"{"text":"a","labels":["x","y","x"]}"#;
        let f = parse_jsonl(line.as_bytes(), Path::new("x.jsonl")).unwrap();
        assert_eq!(f.samples[0].labels, vec!["x", "y"]);
        assert_eq!(f.duplicate_labels, 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let body = "{\"text\":\"a\",\"labels\":[\"x\"]}\n\n{\"text\": 3}\n";
        match parse_jsonl(body.as_bytes(), Path::new("c.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_training_labels_rejected() {
        let err = Corpus::from_raw(&[raw("a", &[])], &[], &[]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn unseen_labels_dropped_with_count() {
        let c = Corpus::from_raw(
            &[raw("a b", &["x"]), raw("c", &["y", "x"])],
            &[raw("a", &["z", "y"])],
            &[raw("q", &["w"])],
        )
        .unwrap();
        assert_eq!(c.labels.names(), &["x", "y"]);
        assert_eq!(c.labels.null_index(), 2);
        assert_eq!(c.valid.samples[0].labels, vec![1]);
        assert!(c.test.samples[0].labels.is_empty());
        assert_eq!(c.stats.dropped_unseen_labels, 2);
    }

    #[test]
    fn fifty_four_distinct_training_labels_give_k_54() {
        let train: Vec<RawSample> = (0..54)
            .map(|i| {
                let a = format!("cs.L{i}");
                let b = format!("cs.L{}", (i + 1) % 54);
                RawSample {
                    text: format!("abstract {i}"),
                    labels: vec![a, b],
                }
            })
            .collect();
        let c = Corpus::from_raw(&train, &[], &[]).unwrap();
        assert_eq!(c.labels.len(), 54);
    }

    #[test]
    fn vocabulary_rebuild_is_stable() {
        let train = vec![raw("b a", &["q", "p"]), raw("c a", &["p", "r"])];
        let c1 = Corpus::from_raw(&train, &[], &[]).unwrap();
        let c2 = Corpus::from_raw(&train, &[], &[]).unwrap();
        assert_eq!(c1.labels, c2.labels);
        assert_eq!(c1.tokens, c2.tokens);
        assert_eq!(c1.labels.names(), &["q", "p", "r"]);
    }

    fn toy_dataset(n: usize) -> Dataset {
        Dataset {
            samples: (0..n)
                .map(|i| Sample {
                    text: String::new(),
                    tokens: vec![1; 2 + i % 3],
                    labels: vec![i % 2],
                })
                .collect(),
        }
    }

    #[test]
    fn batches_of_4_4_2() {
        let ds = toy_dataset(10);
        let sizes: Vec<usize> = BatchIter::new(&ds, 4, 7, 0)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_order_and_epochs_differ() {
        let ds = toy_dataset(10);
        let a: Vec<_> = BatchIter::new(&ds, 3, 7, 0)
            .unwrap()
            .map(|b| b.indices)
            .collect();
        let b: Vec<_> = BatchIter::new(&ds, 3, 7, 0)
            .unwrap()
            .map(|b| b.indices)
            .collect();
        let c: Vec<_> = BatchIter::new(&ds, 3, 7, 1)
            .unwrap()
            .map(|b| b.indices)
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn masks_are_false_exactly_at_padding() {
        let ds = toy_dataset(10);
        for batch in BatchIter::new(&ds, 4, 1, 0).unwrap() {
            for (k, &i) in batch.indices.iter().enumerate() {
                let real = ds.samples[i].tokens.len();
                for (j, &m) in batch.mask[k].iter().enumerate() {
                    assert_eq!(m, j < real);
                    if !m {
                        assert_eq!(batch.tokens[k][j], PAD);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(BatchIter::new(&toy_dataset(1), 0, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_normalizes(
            rows in proptest::collection::vec(
                ("[a-z \\\"\\\\é]{0,20}", proptest::collection::vec("[A-Za-z.]{1,6}", 0..5)),
                0..8,
            )
        ) {
            let samples: Vec<RawSample> = rows
                .into_iter()
                .map(|(text, labels)| RawSample { text, labels })
                .collect();
            let mut buf = Vec::new();
            write_jsonl_to(&mut buf, &samples).unwrap();
            let loaded = parse_jsonl(buf.as_slice(), Path::new("p")).unwrap();

            let mut normalized = samples.clone();
            normalized.iter_mut().for_each(|s| { s.dedup_labels(); });
            prop_assert_eq!(&loaded.samples, &normalized);

            let mut again = Vec::new();
            write_jsonl_to(&mut again, &loaded.samples).unwrap();
            let mut expect = Vec::new();
            write_jsonl_to(&mut expect, &normalized).unwrap();
            prop_assert_eq!(again, expect);
        }
    }
}
