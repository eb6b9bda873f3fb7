//! Nearest-neighbour search between φ_a and φ_w in the shared space.

use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramPatch;
use crate::corpus::PreparedCorpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tags::{embed_tags, normalize_tags, TagSet, Vocabulary, WordTable, MAX_TAGS};
use crate::tensor::Tensor;

const INDEX_BATCH: usize = 32;

fn unit(v: &[f32]) -> Vec<f64> {
    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() + 1e-12;
    v.iter().map(|&x| x as f64 / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub rank: usize,
    pub id: String,
    pub score: f64,
    pub label: Option<usize>,
}

/// Unit-norm φ_a of every prepared clip and φ_w of its tags, when it has any
/// in-vocabulary tag.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    pub ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    audio: Vec<Vec<f64>>,
    tags: Vec<Option<Vec<f64>>>,
}

impl RetrievalIndex {
    pub fn build(model: &mut Model<f32>, corpus: &PreparedCorpus, vocab: &Vocabulary, table: &WordTable) -> Result<Self> {
        let mut audio = Vec::with_capacity(corpus.len());
        for chunk in corpus.patches.chunks(INDEX_BATCH) {
            let data: Vec<f32> = chunk.iter().flat_map(|p| p.values().iter().copied()).collect();
            let x = Tensor::new(vec![chunk.len(), 1, crate::audio::PATCH_FRAMES, crate::audio::MEL_BANDS], data)?;
            let phi = model.embed_audio_projected(&x)?;
            audio.extend(phi.data().chunks(phi.shape()[1]).map(unit));
        }
        let tags = corpus
            .clips
            .iter()
            .map(|c| {
                if c.tags.is_empty() {
                    return Ok(None);
                }
                match crate::tags::preprocess_tags(&c.tags, Some(vocab)) {
                    Ok(set) => phi_w(model, &set, vocab, table).map(Some),
                    Err(Error::EmptyTagSet) => Ok(None),
                    Err(e) => Err(Error::clip(&c.id, e)),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            ids: corpus.clips.iter().map(|c| c.id.clone()).collect(),
            labels: corpus.clips.iter().map(|c| c.label).collect(),
            audio,
            tags,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Clips ranked by how well their audio matches the tags. Every
    /// normalized token must be in the vocabulary.
    pub fn query_tags<S: AsRef<str>>(
        &self,
        model: &Model<f32>,
        raw: &[S],
        vocab: &Vocabulary,
        table: &WordTable,
        k: usize,
    ) -> Result<Vec<Hit>> {
        let q = phi_w(model, &strict_tag_set(raw, vocab)?, vocab, table)?;
        Ok(self.rank(self.audio.iter().map(|a| Some(dot(a, &q))), k))
    }

    /// Clips ranked by how well their tags match the audio patch.
    pub fn query_audio(&self, model: &mut Model<f32>, patch: &SpectrogramPatch, k: usize) -> Result<Vec<Hit>> {
        let phi = model.embed_audio_projected(&patch.to_tensor().reshape(vec![1, 1, crate::audio::PATCH_FRAMES, crate::audio::MEL_BANDS])?)?;
        let q = unit(phi.data());
        Ok(self.rank(self.tags.iter().map(|t| t.as_ref().map(|t| dot(t, &q))), k))
    }

    /// Top `k` by score, ties broken by index order; `k` beyond the corpus
    /// returns the full ranking.
    fn rank(&self, scores: impl Iterator<Item = Option<f64>>, k: usize) -> Vec<Hit> {
        let mut scored: Vec<(usize, f64)> = scores.enumerate().filter_map(|(i, s)| s.map(|s| (i, s))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, (i, score))| Hit { rank: rank + 1, id: self.ids[i].clone(), score, label: self.labels[i] })
            .collect()
    }
}

/// Normalizes a query and rejects any token outside the vocabulary.
fn strict_tag_set<S: AsRef<str>>(raw: &[S], vocab: &Vocabulary) -> Result<TagSet> {
    let tags = normalize_tags(raw);
    if let Some(oov) = tags.iter().find(|t| !vocab.contains(t)) {
        return Err(Error::OutOfVocabulary(oov.clone()));
    }
    if tags.len() > MAX_TAGS {
        return Err(Error::invalid(format!("query has {} tags, at most {MAX_TAGS} allowed", tags.len())));
    }
    TagSet::new(tags)
}

fn phi_w(model: &Model<f32>, tags: &TagSet, vocab: &Vocabulary, table: &WordTable) -> Result<Vec<f64>> {
    let m = embed_tags(tags, table, vocab)?;
    let x = Tensor::new(vec![1, MAX_TAGS, table.dim()], m.rows.data().to_vec())?;
    Ok(unit(model.embed_tags(&x, &m.mask)?.data()))
}
