//! From a manifest to training data: max-energy log-mel patches with their
//! scaling statistics, tag documents, and the word model built on them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audio::{load_audio, scale_patch, select_max_energy_patch, stft_logmel, LogMel, ScalingStats, SpectrogramPatch, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::format::TensorFile;
use crate::manifest::{Manifest, ManifestRecord};
use crate::par;
use crate::tags::{embed_tags, normalize_tags, preprocess_tags, train_cbow, CbowConfig, TagSet, Vocabulary, WordTable, DEFAULT_VOCAB_SIZE};
use crate::train::AlignmentSet;

pub const PATCH_KIND: &str = "patch";
pub const INDEX_KIND: &str = "patch-index";
pub const PATCH_DIR: &str = "patches";
pub const INDEX_FILE: &str = "stats.xt";

/// Per-clip metadata carried next to its patch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipInfo {
    pub id: String,
    pub tags: Vec<String>,
    pub label: Option<usize>,
    pub split: Option<String>,
    pub fold: Option<usize>,
}

impl From<&ManifestRecord> for ClipInfo {
    fn from(r: &ManifestRecord) -> Self {
        Self { id: r.id.clone(), tags: r.tags.clone(), label: r.label, split: r.split.clone(), fold: r.fold }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCorpus {
    pub clips: Vec<ClipInfo>,
    pub patches: Vec<SpectrogramPatch>,
    pub scaling: ScalingStats,
}

/// Log-mel spectrogram of one manifest entry; failures name the clip.
pub fn clip_logmel(manifest: &Manifest, record: &ManifestRecord) -> Result<LogMel> {
    load_audio(&manifest.audio_path(record), SAMPLE_RATE)
        .and_then(|clip| stft_logmel(&clip))
        .map_err(|e| Error::clip(&record.id, e))
}

/// Selects each clip's max-energy patch and min-max scales all of them with
/// statistics fitted on this corpus.
pub fn prepare(manifest: &Manifest) -> Result<PreparedCorpus> {
    if manifest.is_empty() {
        return Err(Error::invalid("manifest has no records"));
    }
    let raw: Vec<LogMel> = par::map_indexed(manifest.len(), |i| {
        let r = &manifest.records[i];
        clip_logmel(manifest, r).map(|m| select_max_energy_patch(&m))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let scaling = ScalingStats::fit(&raw)?;
    let patches = raw.iter().map(|p| scale_patch(p, &scaling)).collect::<Result<_>>()?;
    Ok(PreparedCorpus { clips: manifest.records.iter().map(ClipInfo::from).collect(), patches, scaling })
}

fn patch_file(index: usize) -> String {
    format!("{PATCH_DIR}/{index:06}.xt")
}

impl PreparedCorpus {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// One tensor file per patch under `patches/` plus an index holding the
    /// scaling statistics and the clip order.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(PATCH_DIR))?;
        let mut files = Vec::with_capacity(self.len());
        for (i, (info, patch)) in self.clips.iter().zip(&self.patches).enumerate() {
            let name = patch_file(i);
            let mut f = TensorFile::new(PATCH_KIND, serde_json::to_value(info)?);
            f.push_f32("patch", patch.to_tensor())?;
            f.write(&dir.join(&name))?;
            files.push(json!({ "id": info.id, "file": name }));
        }
        let meta = json!({ "scaling": self.scaling, "clips": files });
        TensorFile::new(INDEX_KIND, meta).write(&dir.join(INDEX_FILE))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let index = TensorFile::read(&index_path)?;
        let corrupt = |reason: String| Error::Corrupt { path: index_path.clone(), reason };
        if index.kind != INDEX_KIND {
            return Err(corrupt(format!("expected a patch index, found a `{}` file", index.kind)));
        }
        #[derive(Deserialize)]
        struct Entry {
            id: String,
            file: PathBuf,
        }
        let scaling: ScalingStats = serde_json::from_value(index.meta["scaling"].clone())?;
        let entries: Vec<Entry> = serde_json::from_value(index.meta["clips"].clone())?;
        let mut clips = Vec::with_capacity(entries.len());
        let mut patches = Vec::with_capacity(entries.len());
        for e in entries {
            let path = dir.join(&e.file);
            let f = TensorFile::read(&path)?;
            let info: ClipInfo = serde_json::from_value(f.meta.clone())
                .map_err(|err| Error::Corrupt { path: path.clone(), reason: err.to_string() })?;
            if f.kind != PATCH_KIND || info.id != e.id {
                return Err(Error::Corrupt { path, reason: format!("does not hold the patch of `{}`", e.id) });
            }
            patches.push(SpectrogramPatch::new(f.get_f32("patch")?.data().to_vec())?);
            clips.push(info);
        }
        Ok(Self { clips, patches, scaling })
    }
}

/// Normalized tag documents, one per record.
pub fn tag_documents(records: &[ManifestRecord]) -> Vec<Vec<String>> {
    records.iter().map(|r| normalize_tags(&r.tags)).collect()
}

/// Builds the vocabulary over the manifest's tags, trains the CBOW table and
/// rescales its rows to unit mean square.
pub fn build_word_model(manifest: &Manifest, config: &CbowConfig) -> Result<(Vocabulary, WordTable)> {
    let docs: Vec<Vec<String>> = tag_documents(&manifest.records).into_iter().filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::invalid("manifest carries no tags"));
    }
    let vocab = Vocabulary::build(&docs, DEFAULT_VOCAB_SIZE)?;
    if vocab.is_empty() {
        return Err(Error::invalid("no tag survives the vocabulary filters"));
    }
    let sets: Vec<TagSet> = manifest
        .records
        .iter()
        .filter(|r| !r.tags.is_empty())
        .filter_map(|r| preprocess_tags(&r.tags, Some(&vocab)).ok())
        .collect();
    // CBOW vectors trained on a small corpus stay near their tiny
    // initialization; at that scale the attention biases swamp them.
    let table = train_cbow(&sets, &vocab, config)?.with_unit_rms_rows();
    Ok((vocab, table))
}

/// Pairs every clip with its embedded tag matrix. Clips whose tags all fall
/// outside the vocabulary are skipped; the indices of the kept clips are returned.
pub fn alignment_set(corpus: &PreparedCorpus, vocab: &Vocabulary, table: &WordTable) -> Result<(AlignmentSet, Vec<usize>)> {
    let mut set = AlignmentSet::new(table.dim());
    let mut kept = Vec::with_capacity(corpus.len());
    for (i, (info, patch)) in corpus.clips.iter().zip(&corpus.patches).enumerate() {
        if info.tags.is_empty() {
            continue;
        }
        match preprocess_tags(&info.tags, Some(vocab)) {
            Ok(tags) => {
                set.push(patch, &embed_tags(&tags, table, vocab)?)?;
                kept.push(i);
            }
            Err(Error::EmptyTagSet) => log::warn!("clip `{}` has no in-vocabulary tags; skipped", info.id),
            Err(e) => return Err(Error::clip(&info.id, e)),
        }
    }
    Ok((set, kept))
}
