//! Video–sentence records, description preprocessing and bag-of-words
//! featurization.

mod generator;
mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::dot;

pub use generator::{generate_synthetic_corpus, GeneratorConfig};
pub use io::{load_corpus, read_corpus, save_corpus, write_corpus};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// The three per-video modality vectors (image-like, motion-like, aural-like).
/// A missing modality is stored as zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub m3: Vec<f64>,
}

impl Features {
    pub fn dims(&self) -> [usize; 3] {
        [self.m1.len(), self.m2.len(), self.m3.len()]
    }

    /// `[m1; m2; m3]`
    pub fn concat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.m1.len() + self.m2.len() + self.m3.len());
        x.extend_from_slice(&self.m1);
        x.extend_from_slice(&self.m2);
        x.extend_from_slice(&self.m3);
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub features: Features,
    /// Tokenized captions, stored without BOS/EOS.
    pub captions: Vec<Vec<String>>,
    pub expert_topic: Option<usize>,
    pub split: Split,
    pub true_topic_mix: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub feature_dims: [usize; 3],
    #[serde(default)]
    pub k_true: Option<usize>,
    #[serde(default)]
    pub min_count: usize,
    /// Words excluded from bag-of-words features.
    #[serde(default)]
    pub stopwords: Vec<String>,
}

impl CorpusHeader {
    pub fn input_dim(&self) -> usize {
        self.feature_dims.iter().sum()
    }
}

/// Token ↔ id mapping. Ids 0, 1, 2 are BOS, EOS and UNK; remaining tokens
/// follow in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    pub const BOS_ID: usize = 0;
    pub const EOS_ID: usize = 1;
    pub const UNK_ID: usize = 2;

    /// Retains tokens appearing more than `min_count` times.
    pub fn build<'a, I>(captions: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a Vec<String>>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for caption in captions {
            for tok in caption {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let words = counts
            .into_iter()
            .filter(|&(t, c)| c > min_count && !is_special(t))
            .map(|(t, _)| t.to_string());
        Self::from_tokens(words, min_count)
    }

    /// Builds a vocabulary from an explicit word list (specials are added).
    pub fn from_tokens<I: IntoIterator<Item = String>>(words: I, min_count: usize) -> Self {
        let mut tokens = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, caption: &[String]) -> Vec<usize> {
        caption.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }
}

fn is_special(t: &str) -> bool {
    t == BOS || t == EOS || t == UNK
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let cleaned: String = sentence
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Tokenizes raw sentences and builds the vocabulary over them.
///
/// Sentences that are empty after cleaning are dropped from the output;
/// if every sentence is empty the call fails.
pub fn preprocess(
    raw: &[impl AsRef<str>],
    min_count: usize,
) -> Result<(Vocabulary, Vec<Vec<String>>)> {
    if raw.is_empty() {
        return Err(Error::Empty("raw sentences"));
    }
    let captions: Vec<Vec<String>> = raw
        .iter()
        .map(|s| tokenize(s.as_ref()))
        .filter(|t| !t.is_empty())
        .collect();
    if captions.is_empty() {
        return Err(Error::Empty("all sentences are empty after cleaning"));
    }
    let vocab = Vocabulary::build(&captions, min_count);
    Ok((vocab, captions))
}

/// Sparse, l2-normalized bag-of-words vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BagOfWords {
    pub weights: BTreeMap<String, f64>,
    /// Set when every token was a stopword and the vector is zero.
    pub all_stopwords: bool,
}

impl BagOfWords {
    pub fn is_zero(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dot(&self, other: &BagOfWords) -> f64 {
        let (small, large) = if self.weights.len() <= other.weights.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .weights
            .iter()
            .filter_map(|(k, v)| large.weights.get(k).map(|w| v * w))
            .sum()
    }

    /// Cosine similarity (the vectors are unit-norm unless zero).
    pub fn cosine(&self, other: &BagOfWords) -> f64 {
        if self.is_zero() || other.is_zero() {
            0.0
        } else {
            self.dot(other)
        }
    }
}

/// Pools all captions of a record into one normalized word-count vector.
pub fn bag_of_words(record: &VideoRecord, stopwords: &BTreeSet<String>) -> BagOfWords {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for tok in record.captions.iter().flatten() {
        if stopwords.contains(tok) || is_special(tok) {
            continue;
        }
        *counts.entry(tok.clone()).or_default() += 1.0;
    }
    if counts.is_empty() {
        return BagOfWords {
            weights: counts,
            all_stopwords: true,
        };
    }
    let values: Vec<f64> = counts.values().copied().collect();
    let norm = dot(&values, &values).sqrt();
    counts.values_mut().for_each(|v| *v /= norm);
    BagOfWords {
        weights: counts,
        all_stopwords: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub records: Vec<VideoRecord>,
    pub vocabulary: Vocabulary,
}

impl Corpus {
    /// Validates records against the header and builds the vocabulary from
    /// training captions (all captions if there is no training split).
    pub fn new(header: CorpusHeader, records: Vec<VideoRecord>) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &records {
            validate_record(&header, r)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate record id '{}'", r.id)));
            }
        }
        let has_train = records.iter().any(|r| r.split == Split::Train);
        let vocabulary = Vocabulary::build(
            records
                .iter()
                .filter(|r| !has_train || r.split == Split::Train)
                .flat_map(|r| r.captions.iter()),
            header.min_count,
        );
        Ok(Self {
            header,
            records,
            vocabulary,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn stopwords(&self) -> BTreeSet<String> {
        self.header.stopwords.iter().cloned().collect()
    }

    pub fn input_dim(&self) -> usize {
        self.header.input_dim()
    }
}

pub(crate) fn validate_record(header: &CorpusHeader, r: &VideoRecord) -> Result<()> {
    if r.captions.is_empty() {
        return Err(Error::invalid(format!("record '{}' has no captions", r.id)));
    }
    if r.captions.iter().any(Vec::is_empty) {
        return Err(Error::invalid(format!(
            "record '{}' has an empty caption",
            r.id
        )));
    }
    if r.features.dims() != header.feature_dims {
        return Err(Error::invalid(format!(
            "record '{}' feature dims {:?} do not match header {:?}",
            r.id,
            r.features.dims(),
            header.feature_dims
        )));
    }
    if let Some(mix) = &r.true_topic_mix {
        if let Some(k) = header.k_true {
            if mix.len() != k {
                return Err(Error::invalid(format!(
                    "record '{}' topic mix has {} entries, header says {k}",
                    r.id,
                    mix.len()
                )));
            }
        }
    }
    Ok(())
}
