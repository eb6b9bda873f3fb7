//! Tag preprocessing, vocabulary construction, CBOW word vectors and the
//! padded tag matrix fed to the attention encoder.

mod cbow;
mod singular;

pub use cbow::{cbow_loss_and_grad, train_cbow, CbowConfig, CbowGrad, WordTable};
pub use singular::singularize;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum number of tags kept per example.
pub const MAX_TAGS: usize = 10;
pub const DEFAULT_VOCAB_SIZE: usize = 1000;

const STOPWORDS_FILE: &str = include_str!("../../assets/stopwords.txt");

pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_FILE.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect()
    })
}

fn is_stopword(token: &str) -> bool {
    stopwords().contains(token)
}

/// Lowercase, drop stop-words, singularize and deduplicate, keeping first
/// occurrence order. No vocabulary filter and no truncation.
pub fn normalize_tags<S: AsRef<str>>(raw: &[S]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for tag in raw {
        let lower = tag.as_ref().trim().to_lowercase();
        if lower.is_empty() || is_stopword(&lower) {
            continue;
        }
        let single = singularize(&lower);
        if is_stopword(&single) {
            continue;
        }
        if seen.insert(single.clone()) {
            out.push(single);
        }
    }
    out
}

/// An example's tags after preprocessing: 1 to 10 distinct tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    tags: Vec<String>,
}

impl TagSet {
    pub fn new(tags: Vec<String>) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::EmptyTagSet);
        }
        if tags.len() > MAX_TAGS {
            return Err(Error::invalid(format!("{} tags exceed the limit of {MAX_TAGS}", tags.len())));
        }
        let distinct: HashSet<&String> = tags.iter().collect();
        if distinct.len() != tags.len() {
            return Err(Error::invalid("tag set contains duplicates"));
        }
        Ok(Self { tags })
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Validity of each of the [`MAX_TAGS`] slots.
    pub fn mask(&self) -> [bool; MAX_TAGS] {
        std::array::from_fn(|i| i < self.tags.len())
    }
}

/// Full preprocessing. With a vocabulary, out-of-vocabulary tags are dropped
/// and the 10 most document-frequent survivors kept; without one, surplus
/// tags are cut lexicographically.
pub fn preprocess_tags<S: AsRef<str>>(raw: &[S], vocab: Option<&Vocabulary>) -> Result<TagSet> {
    if raw.is_empty() {
        return Err(Error::invalid("raw tag list is empty"));
    }
    let mut tags = normalize_tags(raw);
    if let Some(v) = vocab {
        tags.retain(|t| v.contains(t));
    }
    if tags.len() > MAX_TAGS {
        let df = |t: &String| vocab.and_then(|v| v.document_frequency(t)).unwrap_or(0);
        let mut ranked: Vec<&String> = tags.iter().collect();
        ranked.sort_by(|a, b| df(b).cmp(&df(a)).then_with(|| a.cmp(b)));
        let keep: HashSet<String> = ranked[..MAX_TAGS].iter().map(|s| (*s).clone()).collect();
        tags.retain(|t| keep.contains(t));
    }
    TagSet::new(tags)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: String,
    pub df: usize,
}

/// Token ↔ index map ordered by descending document frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    corpus_size: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    corpus_size: usize,
    entries: Vec<VocabEntry>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocabulary::from_entries(f.entries, f.corpus_size)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { corpus_size: v.corpus_size, entries: v.entries }
    }
}

/// Largest document-frequency ratio a token may have and stay in the vocabulary.
pub const MAX_DF_NUM: usize = 7;
pub const MAX_DF_DEN: usize = 10;

impl Vocabulary {
    pub fn from_entries(entries: Vec<VocabEntry>, corpus_size: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.token.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {}", e.token)));
            }
        }
        Ok(Self { entries, corpus_size, index })
    }

    /// Counts document frequencies over normalized documents, removes tokens
    /// present in more than 70% of them and keeps the `capacity` most frequent.
    pub fn build<S: AsRef<str>>(documents: &[Vec<S>], capacity: usize) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let n = documents.len();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in documents {
            let distinct: HashSet<&str> = doc.iter().map(|t| t.as_ref()).collect();
            for t in distinct {
                *df.entry(t).or_default() += 1;
            }
        }
        let mut survivors: Vec<VocabEntry> = df
            .into_iter()
            .filter(|&(_, d)| d * MAX_DF_DEN <= MAX_DF_NUM * n)
            .map(|(t, d)| VocabEntry { token: t.to_owned(), df: d })
            .collect();
        survivors.sort_by(|a, b| b.df.cmp(&a.df).then_with(|| a.token.cmp(&b.token)));
        if survivors.len() < capacity {
            log::warn!("vocabulary has {} tokens, fewer than the requested {capacity}", survivors.len());
        }
        survivors.truncate(capacity);
        Self::from_entries(survivors, n)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.entries[index].token
    }

    pub fn document_frequency(&self, token: &str) -> Option<usize> {
        self.index_of(token).map(|i| self.entries[i].df)
    }

    pub fn indices(&self, tags: &TagSet) -> Result<Vec<usize>> {
        tags.tags()
            .iter()
            .map(|t| self.index_of(t).ok_or_else(|| Error::OutOfVocabulary(t.clone())))
            .collect()
    }
}

/// The `[MAX_TAGS, dim]` tag matrix: valid rows first, zero rows after.
#[derive(Clone, Debug, PartialEq)]
pub struct TagMatrix {
    pub rows: Tensor<f32>,
    pub mask: [bool; MAX_TAGS],
}

pub fn embed_tags(tags: &TagSet, table: &WordTable, vocab: &Vocabulary) -> Result<TagMatrix> {
    if tags.is_empty() {
        return Err(Error::EmptyTagSet);
    }
    if table.rows() != vocab.len() {
        return Err(Error::ConfigMismatch(format!(
            "word table has {} rows but the vocabulary has {} tokens",
            table.rows(),
            vocab.len()
        )));
    }
    let dim = table.dim();
    let mut data = vec![0.0f32; MAX_TAGS * dim];
    for (slot, idx) in vocab.indices(tags)?.into_iter().enumerate() {
        data[slot * dim..(slot + 1) * dim].copy_from_slice(table.row(idx));
    }
    Ok(TagMatrix { rows: Tensor::new(vec![MAX_TAGS, dim], data)?, mask: tags.mask() })
}

#[cfg(test)]
mod tests;
