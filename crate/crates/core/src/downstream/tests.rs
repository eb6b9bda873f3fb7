use rand::Rng as _;

use super::*;
use crate::audio::LogMel;
use crate::corpus::PreparedCorpus;
use crate::manifest::ManifestRecord;
use crate::model::Variant;
use crate::rng::{self, Purpose};
use crate::tags::{VocabEntry, Vocabulary, WordTable};

/// Box-Muller standard normal.
fn normal(rng: &mut crate::rng::Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn logmel(frames: usize, f: impl Fn(usize, usize) -> f64) -> LogMel {
    let data = (0..frames).flat_map(|t| (0..MEL_BANDS).map(move |b| (t, b))).map(|(t, b)| f(t, b)).collect();
    LogMel::new(frames, MEL_BANDS, data).unwrap()
}

#[test]
fn patches_follow_the_remainder_rule() {
    let counts: Vec<usize> = [96, 192, 200, 150, 140, 50].iter().map(|&t| split_patches(&logmel(t, |_, _| 0.0)).len()).collect();
    assert_eq!(counts, vec![1, 2, 2, 2, 1, 1]);
    let m = logmel(150, |t, b| (t * 100 + b) as f64);
    let last = &split_patches(&m)[1];
    assert_eq!(last.frame(0), m.frame(96));
    assert_eq!(last.frame(95), m.frame(149));
}

#[test]
fn clip_embedding_is_the_mean_over_patches() {
    let mut model = Model::<f32>::new(Variant::attention(8, 1), 3).unwrap();
    let scaling = ScalingStats { min: -5.0, max: 5.0 };
    let pattern = |t: usize, b: usize| ((t % 96) as f64 * 0.37 + b as f64 * 0.11).sin() * 4.0;
    let single = logmel(96, pattern);
    let double = logmel(192, pattern);
    let e = clip_embeddings(&mut model, &scaling, &[single.clone(), double]).unwrap();
    assert_eq!(e[0].len(), crate::model::EMBED_DIM);
    assert!(e[0].iter().zip(&e[1]).all(|(a, b)| (a - b).abs() < 1e-6));
    let alone = clip_embeddings(&mut model, &scaling, &[single]).unwrap();
    assert_eq!(alone[0], e[0]);
}

#[test]
fn standardization_uses_training_statistics() {
    let mut r = rng::stream(1, Purpose::Sampling, 0);
    let train: Vec<Vec<f64>> = (0..50).map(|_| vec![r.gen_range(-3.0..5.0), 7.0, normal(&mut r) * 10.0]).collect();
    let test: Vec<Vec<f64>> = (0..20).map(|_| vec![r.gen_range(10.0..11.0), 7.0, 1.0]).collect();
    let (a, b, s) = standardize(&train, &test).unwrap();
    for d in [0, 2] {
        let mean = a.iter().map(|v| v[d]).sum::<f64>() / a.len() as f64;
        let std = (a.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-3, "dim {d}: {mean} {std}");
    }
    assert!(a.iter().chain(&b).all(|v| v[1] == 0.0));
    let test_mean = b.iter().map(|v| v[0]).sum::<f64>() / b.len() as f64;
    assert!(test_mean > 2.0, "test vectors were standardized with their own mean");
    assert_eq!(s.apply(&train[0]), a[0]);
    assert!(Standardizer::fit(&train[..1]).is_err());
}

/// Gaussian blobs around per-class centres; `spread` scales the noise.
fn blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::stream(seed, Purpose::Sampling, 1);
    let centres: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| normal(&mut r) * 2.0).collect()).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        x.push(centres[c].iter().map(|m| m + spread * normal(&mut r)).collect());
        y.push(c);
    }
    (x, y)
}

fn split_task(x: Vec<Vec<f64>>, y: Vec<usize>, train: usize) -> TaskData {
    let n = y.len();
    TaskData::new(x, y, Protocol::Split { train: (0..train).collect(), test: (train..n).collect() }).unwrap()
}

fn quick() -> ProbeConfig {
    ProbeConfig { epochs: 30, hidden: 32, ..ProbeConfig::default() }
}

#[test]
fn separable_classes_are_probed_perfectly() {
    let (x, y) = blobs(2, 60, 12, 0.1, 2);
    let task = split_task(x, y, 80);
    assert_eq!(run_probe(&task, &quick(), 0).unwrap(), 1.0);
}

#[test]
fn shuffled_labels_stay_near_chance() {
    let (x, mut y) = blobs(4, 150, 12, 0.2, 3);
    use rand::seq::SliceRandom;
    y.shuffle(&mut rng::stream(9, Purpose::Sampling, 0));
    let task = split_task(x, y, 200);
    let acc = run_probe(&task, &quick(), 0).unwrap();
    assert!((acc - 0.25).abs() <= 0.10, "{acc}");
}

#[test]
fn repeated_runs_differ_but_their_mean_is_stable() {
    let (x, y) = blobs(3, 100, 6, 2.0, 4);
    let task = split_task(x, y, 150);
    let cfg = quick();
    let runs: Vec<f64> = (0..20).map(|s| run_probe(&task, &cfg, s).unwrap()).collect();
    assert!(runs.iter().any(|&a| a != runs[0]), "all runs identical: {runs:?}");
    let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    assert!((mean(&runs[..10]) - mean(&runs[10..])).abs() < 0.02, "{runs:?}");
    assert_eq!(run_probe(&task, &cfg, 7).unwrap(), runs[7]);
}

#[test]
fn report_covers_exactly_the_configured_repeats() {
    let (x, y) = blobs(2, 30, 8, 0.1, 5);
    let task = split_task(x, y, 40);
    let report = evaluate_task(&task, &quick()).unwrap();
    assert_eq!(report.per_run_accuracies.len(), 10);
    assert_eq!(report.seeds, (0..10).collect::<Vec<u64>>());
    assert_eq!(report.mean, report.per_run_accuracies[0]);
    assert_eq!(report.std, 0.0);
    assert!(evaluate_task(&task, &ProbeConfig { repeats: 0, ..quick() }).is_err());
}

fn record(id: &str, tags: &[&str], label: usize, split: Option<&str>, fold: Option<usize>) -> ManifestRecord {
    ManifestRecord {
        id: id.into(),
        audio_path: format!("{id}.wav"),
        tags: tags.iter().map(|s| s.to_string()).collect(),
        label: Some(label),
        split: split.map(Into::into),
        fold,
    }
}

#[test]
fn fold_protocol_holds_out_each_fold_once() {
    let records: Vec<_> = (0..9).map(|i| record(&format!("r{i}"), &["x"], i % 3, None, Some(i % 3))).collect();
    let p = Protocol::from_records(&records).unwrap();
    let parts = p.partitions();
    assert_eq!(parts.len(), 3);
    let mut held: Vec<usize> = parts.iter().flat_map(|(_, t)| t.clone()).collect();
    held.sort_unstable();
    assert_eq!(held, (0..9).collect::<Vec<_>>());
    for (train, test) in &parts {
        assert!(train.iter().all(|i| !test.contains(i)));
    }
    let mut partial = records.clone();
    partial[4].fold = None;
    assert!(Protocol::from_records(&partial).is_err());
    let split: Vec<_> = (0..6).map(|i| record(&format!("s{i}"), &["x"], i % 2, Some(if i < 4 { "train" } else { "test" }), None)).collect();
    assert_eq!(Protocol::from_records(&split).unwrap(), Protocol::Split { train: vec![0, 1, 2, 3], test: vec![4, 5] });
}

fn tag_fixture(word_dim: usize) -> (Vocabulary, WordTable) {
    let tokens = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "shared"];
    let vocab = Vocabulary::from_entries(tokens.iter().map(|t| VocabEntry { token: t.to_string(), df: 1 }).collect(), 100).unwrap();
    let mut r = rng::stream(0, Purpose::Sampling, 5);
    let table = WordTable::new(tokens.len(), word_dim, (0..tokens.len() * word_dim).map(|_| normal(&mut r) as f32).collect()).unwrap();
    (vocab, table)
}

/// Every class cycles through the subsets of its two-tag pool, so each test
/// tag set also occurs in training.
fn tag_manifest(pools: &[[&str; 2]], shared_only: bool) -> Manifest {
    let mut records = Vec::new();
    for i in 0..48 {
        let class = i % pools.len();
        let [a, b] = pools[class];
        let tags = match (shared_only, (i / pools.len()) % 3) {
            (true, _) => vec!["shared"],
            (false, 0) => vec![a],
            (false, 1) => vec![b],
            _ => vec![a, b],
        };
        let split = if i < 36 { "train" } else { "test" };
        records.push(record(&format!("t{i}"), &tags, class, Some(split), None));
    }
    Manifest::new(".", records).unwrap()
}

#[test]
fn tag_probe_separates_disjoint_vocabularies_and_not_a_shared_tag() {
    let pools = [["alpha", "bravo"], ["charlie", "delta"], ["echo", "foxtrot"], ["golf", "hotel"]];
    let cfg = ProbeConfig { repeats: 2, ..ProbeConfig::default() };
    for variant in [Variant::attention(8, 1), Variant::attention(8, 4), Variant::mean(8)] {
        let (vocab, table) = tag_fixture(8);
        let model = Model::<f32>::new(variant, 1).unwrap();
        let disjoint = evaluate_tags(&tag_manifest(&pools, false), &model, &vocab, &table, &cfg).unwrap();
        assert_eq!(disjoint.mean, 1.0, "{variant}");
        let shared = evaluate_tags(&tag_manifest(&pools, true), &model, &vocab, &table, &cfg).unwrap();
        assert!((shared.mean - 0.25).abs() <= 0.10, "{variant}: {}", shared.mean);
    }
}

#[test]
fn probing_leaves_the_encoder_untouched() {
    let mut model = Model::<f32>::new(Variant::attention(8, 1), 2).unwrap();
    let scaling = ScalingStats { min: -5.0, max: 5.0 };
    let clips: Vec<LogMel> = (0..12).map(|i| logmel(100, move |t, b| ((t * (i + 1) + b) as f64 * 0.05).sin() * 3.0)).collect();
    let before = model.params.clone();
    let e1 = clip_embeddings(&mut model, &scaling, &clips).unwrap();
    let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
    let task = split_task(e1.clone(), labels, 8);
    evaluate_task(&task, &ProbeConfig { repeats: 2, ..quick() }).unwrap();
    assert_eq!(model.params, before);
    assert_eq!(clip_embeddings(&mut model, &scaling, &clips).unwrap(), e1);
}

#[test]
fn results_record_their_configuration() {
    let report = ProbeReport { seeds: vec![0, 1], per_run_accuracies: vec![0.5, 0.7], mean: 0.6, std: 0.1 };
    let a = ProbeResults::new("task", "mfcc", "mfcc", report.clone(), &ProbeConfig::default(), None).unwrap();
    let b = ProbeResults::new("task", "mfcc", "mfcc", report, &ProbeConfig { epochs: 5, ..ProbeConfig::default() }, None).unwrap();
    assert_ne!(a.config_digest, b.config_digest);
    let json = serde_json::to_value(&a).unwrap();
    for key in ["task", "variant", "per_run_accuracies", "mean", "std", "config_digest"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

fn retrieval_fixture() -> (Model<f32>, PreparedCorpus, Vocabulary, WordTable) {
    let (vocab, table) = tag_fixture(8);
    let model = Model::<f32>::new(Variant::attention(8, 1), 4).unwrap();
    let sets: [&[&str]; 5] = [&["alpha"], &["bravo", "charlie"], &[], &["delta", "echo", "golf"], &["hotel"]];
    let clips = sets
        .iter()
        .enumerate()
        .map(|(i, tags)| crate::corpus::ClipInfo {
            id: format!("r{i}"),
            tags: tags.iter().map(|t| t.to_string()).collect(),
            label: Some(i % 2),
            split: None,
            fold: None,
        })
        .collect();
    let mut r = rng::stream(2, Purpose::Sampling, 9);
    let patches = (0..5)
        .map(|_| crate::audio::SpectrogramPatch::new((0..crate::audio::SpectrogramPatch::LEN).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    (model, PreparedCorpus { clips, patches, scaling: ScalingStats { min: -5.0, max: 5.0 } }, vocab, table)
}

#[test]
fn tag_queries_rank_every_clip_by_cosine_similarity() {
    let (mut model, corpus, vocab, table) = retrieval_fixture();
    let index = RetrievalIndex::build(&mut model, &corpus, &vocab, &table).unwrap();
    let hits = index.query_tags(&model, &["Bravo", "delta"], &vocab, &table, 100).unwrap();
    assert_eq!(hits.len(), 5);
    assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));

    // Independent cosine between φ_a of each clip and φ_w of the query.
    let set = crate::tags::preprocess_tags(&["bravo", "delta"], Some(&vocab)).unwrap();
    let m = crate::tags::embed_tags(&set, &table, &vocab).unwrap();
    let q = model.embed_tags(&Tensor::new(vec![1, MAX_TAGS, 8], m.rows.data().to_vec()).unwrap(), &m.mask).unwrap();
    let cos = |a: &[f32], b: &[f32]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let n = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        d / (n(a) * n(b))
    };
    for h in &hits {
        let i: usize = h.id[1..].parse().unwrap();
        let a = model.embed_audio_projected(&corpus.patches[i].to_tensor().reshape(vec![1, 1, 96, 96]).unwrap()).unwrap();
        assert!((h.score - cos(a.data(), q.data())).abs() < 1e-6);
    }
    assert_eq!(index.query_tags(&model, &["alpha"], &vocab, &table, 2).unwrap().len(), 2);
}

#[test]
fn unknown_query_tags_are_named() {
    let (mut model, corpus, vocab, table) = retrieval_fixture();
    let index = RetrievalIndex::build(&mut model, &corpus, &vocab, &table).unwrap();
    match index.query_tags(&model, &["alpha", "Zulu"], &vocab, &table, 3) {
        Err(Error::OutOfVocabulary(t)) => assert_eq!(t, "zulu"),
        other => panic!("expected an out-of-vocabulary error, got {other:?}"),
    }
}

#[test]
fn audio_queries_skip_clips_without_tags() {
    let (mut model, corpus, vocab, table) = retrieval_fixture();
    let index = RetrievalIndex::build(&mut model, &corpus, &vocab, &table).unwrap();
    let hits = index.query_audio(&mut model, &corpus.patches[1], 10).unwrap();
    assert_eq!(hits.len(), 4);
    assert!(hits.iter().all(|h| h.id != "r2"));
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
}
