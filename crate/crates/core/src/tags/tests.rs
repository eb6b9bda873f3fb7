use super::*;
use proptest::prelude::*;

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn vocab_of(docs: &[&[&str]]) -> Vocabulary {
    let docs: Vec<Vec<String>> = docs.iter().map(|d| normalize_tags(d)).collect();
    Vocabulary::build(&docs, DEFAULT_VOCAB_SIZE).unwrap()
}

#[test]
fn preprocess_examples() {
    assert_eq!(preprocess_tags(&["dogs", "the", "barking"], None).unwrap().tags(), strings(&["dog", "barking"]));
    assert_eq!(preprocess_tags(&["synth", "synth"], None).unwrap().tags(), strings(&["synth"]));
    assert_eq!(preprocess_tags(&["Dogs", "DOG"], None).unwrap().tags(), strings(&["dog"]));
    assert!(matches!(preprocess_tags(&["the", "a"], None), Err(Error::EmptyTagSet)));
    assert!(preprocess_tags::<&str>(&[], None).is_err());
}

#[test]
fn singular_rules() {
    for (p, s) in [
        ("babies", "baby"),
        ("boxes", "box"),
        ("churches", "church"),
        ("brushes", "brush"),
        ("glasses", "glass"),
        ("buses", "bus"),
        ("houses", "house"),
        ("dogs", "dog"),
        ("bass", "bass"),
        ("chorus", "chorus"),
        ("analysis", "analysis"),
        ("gas", "gas"),
        ("bus", "bus"),
        ("children", "child"),
        ("mens", "man"),
        ("series", "series"),
        ("drums", "drum"),
        ("vocals", "vocal"),
    ] {
        assert_eq!(singularize(p), s, "{p}");
        assert_eq!(singularize(s), s, "{s} is not a fixed point");
    }
}

#[test]
fn truncation_prefers_frequent_then_lexicographic() {
    // Token t_i appears in i documents of a large corpus.
    let names: Vec<String> = (0..12).map(|i| format!("tok{i:02}")).collect();
    let mut docs: Vec<Vec<String>> = Vec::new();
    for (i, n) in names.iter().enumerate() {
        for _ in 0..=i.min(9) {
            docs.push(vec![n.clone(), "filler".into()]);
        }
    }
    for _ in 0..200 {
        docs.push(vec!["other".into()]);
    }
    let vocab = Vocabulary::build(&docs, 1000).unwrap();
    let ts = preprocess_tags(&names, Some(&vocab)).unwrap();
    assert_eq!(ts.len(), 10);
    // tok09..tok11 share the top df; tok00 and tok01 have the lowest and are cut.
    assert!(!ts.tags().contains(&"tok00".to_string()) && !ts.tags().contains(&"tok01".to_string()));

    let tied: Vec<String> = "mmm nnn ooo ppp qqq rrr sss ttt uuu vvv www xxx".split(' ').map(String::from).collect();
    let mut tdocs = vec![tied.clone(); 3];
    tdocs.extend(std::iter::repeat(vec!["zzz".to_string()]).take(10));
    let v2 = Vocabulary::build(&tdocs, 1000).unwrap();
    let ts = preprocess_tags(&tied, Some(&v2)).unwrap();
    assert_eq!(ts.tags(), &tied[..10]);
}

#[test]
fn oov_tags_are_dropped_with_vocab() {
    let vocab = vocab_of(&[&["dog", "cat"], &["dog"], &["bird"], &["x"]]);
    let ts = preprocess_tags(&["dogs", "unicorns"], Some(&vocab)).unwrap();
    assert_eq!(ts.tags(), strings(&["dog"]));
    assert!(matches!(preprocess_tags(&["unicorn"], Some(&vocab)), Err(Error::EmptyTagSet)));
}

#[test]
fn document_frequency_filter() {
    let mut docs: Vec<Vec<String>> = Vec::new();
    for i in 0..100 {
        let mut d = vec![format!("u{i}")];
        if i < 71 {
            d.push("common".into());
        }
        if i < 70 {
            d.push("borderline".into());
        }
        docs.push(d);
    }
    let v = Vocabulary::build(&docs, 1000).unwrap();
    assert!(!v.contains("common"));
    assert!(v.contains("borderline"));
    assert_eq!(v.token(0), "borderline");
    assert_eq!(v.len(), 101);
    assert_eq!(v.corpus_size(), 100);

    let small = vocab_of(&[&["a1", "b1"], &["c1", "d1"], &["e1"]]);
    assert_eq!(small.len(), 5);
    let capped = Vocabulary::build(&docs, 3).unwrap();
    assert_eq!(capped.len(), 3);
    assert!(Vocabulary::build::<String>(&[], 10).is_err());
}

#[test]
fn vocabulary_serde_round_trip() {
    let v = vocab_of(&[&["dog", "cat"], &["dog"], &["bird"], &["x"]]);
    let json = serde_json::to_string(&v).unwrap();
    let back: Vocabulary = serde_json::from_str(&json).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.index_of("dog"), Some(0));
}

#[test]
fn cbow_gradient_matches_finite_differences() {
    let dim = 4;
    let mut r = crate::rng::stream(3, crate::rng::Purpose::GradCheck, 0);
    use rand::Rng as _;
    let input: Vec<f64> = (0..3 * dim).map(|_| r.gen_range(-0.5..0.5)).collect();
    let output: Vec<f64> = (0..3 * dim).map(|_| r.gen_range(-0.5..0.5)).collect();
    let (ctx, target, negs) = (vec![1, 2], 0, vec![1, 2, 2]);
    let g = cbow_loss_and_grad(&input, &output, dim, &ctx, target, &negs);
    let loss = |i: &[f64], o: &[f64]| cbow_loss_and_grad(i, o, dim, &ctx, target, &negs).loss;
    let h = 1e-5;
    let mut analytic_out = vec![0.0; 3 * dim];
    for (w, gv) in &g.outputs {
        for k in 0..dim {
            analytic_out[w * dim + k] += gv[k];
        }
    }
    for idx in 0..3 * dim {
        let mut p = output.clone();
        p[idx] += h;
        let mut m = output.clone();
        m[idx] -= h;
        let num = (loss(&input, &p) - loss(&input, &m)) / (2.0 * h);
        assert!(crate::tensor::gradcheck::relative_error(analytic_out[idx], num) < 1e-4);

        let mut p = input.clone();
        p[idx] += h;
        let mut m = input.clone();
        m[idx] -= h;
        let num = (loss(&p, &output) - loss(&m, &output)) / (2.0 * h);
        let w = idx / dim;
        let analytic = if ctx.contains(&w) { g.hidden[idx % dim] / ctx.len() as f64 } else { 0.0 };
        assert!(crate::tensor::gradcheck::relative_error(analytic, num) < 1e-4, "input {idx}: {analytic} vs {num}");
    }
}

#[test]
fn cbow_loss_decreases_on_fixed_pair() {
    let dim = 8;
    let mut r = crate::rng::stream(4, crate::rng::Purpose::GradCheck, 0);
    use rand::Rng as _;
    let mut input: Vec<f64> = (0..3 * dim).map(|_| r.gen_range(-0.5..0.5)).collect();
    let mut output: Vec<f64> = (0..3 * dim).map(|_| r.gen_range(-0.5..0.5)).collect();
    let (ctx, target, negs) = (vec![1], 0, vec![2]);
    let mut prev = f64::INFINITY;
    for _ in 0..10 {
        let g = cbow_loss_and_grad(&input, &output, dim, &ctx, target, &negs);
        assert!(g.loss < prev);
        prev = g.loss;
        for (w, gv) in &g.outputs {
            for k in 0..dim {
                output[w * dim + k] -= 0.01 * gv[k];
            }
        }
        for k in 0..dim {
            input[dim + k] -= 0.01 * g.hidden[k];
        }
    }
}

fn toy_corpus() -> (Vec<TagSet>, Vocabulary) {
    let mut raw: Vec<Vec<String>> = Vec::new();
    for _ in 0..50 {
        raw.push(strings(&["alpha", "beta"]));
        raw.push(strings(&["gamma", "delta"]));
    }
    let vocab = Vocabulary::build(&raw, 1000).unwrap();
    let sets = raw.iter().map(|d| preprocess_tags(d, Some(&vocab)).unwrap()).collect();
    (sets, vocab)
}

#[test]
fn cbow_learns_co_occurrence() {
    let (sets, vocab) = toy_corpus();
    let table = train_cbow(&sets, &vocab, &CbowConfig::new(16, 7)).unwrap();
    let (a, b, c) = (vocab.index_of("alpha").unwrap(), vocab.index_of("beta").unwrap(), vocab.index_of("gamma").unwrap());
    assert!(table.cosine(a, b) > table.cosine(a, c), "{} vs {}", table.cosine(a, b), table.cosine(a, c));
    assert_eq!(train_cbow(&sets, &vocab, &CbowConfig::new(16, 7)).unwrap(), table);
}

#[test]
fn single_tag_documents_leave_table_at_init() {
    let raw: Vec<Vec<String>> = vec![strings(&["one"]), strings(&["two"]), strings(&["three"]), strings(&["four"])];
    let vocab = Vocabulary::build(&raw, 1000).unwrap();
    let sets: Vec<TagSet> = raw.iter().map(|d| preprocess_tags(d, Some(&vocab)).unwrap()).collect();
    let mut cfg = CbowConfig::new(8, 1);
    let a = train_cbow(&sets, &vocab, &cfg).unwrap();
    cfg.epochs = 1;
    let b = train_cbow(&sets, &vocab, &cfg).unwrap();
    assert_eq!(a, b);
    let bound = 0.5 / 8.0;
    assert!(a.to_tensor().data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn embed_pads_and_masks() {
    let (sets, vocab) = toy_corpus();
    let table = train_cbow(&sets, &vocab, &CbowConfig { epochs: 1, ..CbowConfig::new(4, 0) }).unwrap();
    let ts = TagSet::new(strings(&["alpha", "gamma", "delta"])).unwrap();
    let m = embed_tags(&ts, &table, &vocab).unwrap();
    assert_eq!(m.rows.shape(), &[10, 4]);
    assert_eq!(m.mask, [true, true, true, false, false, false, false, false, false, false]);
    assert_eq!(&m.rows.data()[..4], table.row(vocab.index_of("alpha").unwrap()));
    assert!(m.rows.data()[12..].iter().all(|&v| v == 0.0));

    let perm = TagSet::new(strings(&["delta", "alpha", "gamma"])).unwrap();
    let mp = embed_tags(&perm, &table, &vocab).unwrap();
    assert_eq!(&mp.rows.data()[4..8], &m.rows.data()[..4]);
    assert_eq!(mp.mask, m.mask);

    let oov = TagSet::new(strings(&["alpha", "zebra"])).unwrap();
    assert!(matches!(embed_tags(&oov, &table, &vocab), Err(Error::OutOfVocabulary(t)) if t == "zebra"));
    assert!(matches!(TagSet::new(vec![]), Err(Error::EmptyTagSet)));
}

#[test]
fn word_table_file_round_trip() {
    let (sets, vocab) = toy_corpus();
    let cfg = CbowConfig { epochs: 1, ..CbowConfig::new(4, 0) };
    let table = train_cbow(&sets, &vocab, &cfg).unwrap();
    let f = table.to_file(&vocab, &cfg).unwrap();
    let bytes = f.to_bytes().unwrap();
    let back = crate::format::TensorFile::from_bytes(&bytes, std::path::Path::new("t")).unwrap();
    assert_eq!(WordTable::from_file(&back).unwrap(), (table, vocab, cfg));
}

proptest! {
    #[test]
    fn preprocessing_is_idempotent(raw in proptest::collection::vec("[a-zA-Z]{1,9}", 1..16)) {
        if let Ok(once) = preprocess_tags(&raw, None) {
            let twice = preprocess_tags(once.tags(), None).unwrap();
            prop_assert_eq!(twice, once);
        }
    }

    #[test]
    fn singularize_reaches_fixed_point(word in "[a-z]{1,12}") {
        let s = singularize(&word);
        prop_assert_eq!(singularize(&s), s);
    }
}


#[test]
fn unit_rms_rescaling_keeps_directions() {
    let table = WordTable::new(3, 4, vec![0.01, -0.02, 0.0, 0.03, 0.0, 0.0, 0.0, 0.0, 2.0, 1.0, -1.0, 0.5]).unwrap();
    let scaled = table.clone().with_unit_rms_rows();
    let norm = |r: &[f32]| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    assert!((norm(scaled.row(0)) - 2.0).abs() < 1e-6);
    assert!((norm(scaled.row(2)) - 2.0).abs() < 1e-6);
    assert_eq!(scaled.row(1), &[0.0; 4]);
    assert!((scaled.cosine(0, 2) - table.cosine(0, 2)).abs() < 1e-6);
}
