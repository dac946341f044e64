mod common;

use u2kws::corpus::{
    load_split, parse_manifest, read_manifest, write_manifest, Corpus, ManifestRecord,
};
use u2kws::keywords::find_subsequence;
use u2kws::KwsError;

#[test]
fn generation_is_reproducible() {
    let a = common::small_corpus(30, 5);
    let b = common::small_corpus(30, 5);
    assert_eq!(a, b);
    assert_ne!(a.train[0].feats, common::small_corpus(30, 6).train[0].feats);
}

#[test]
fn splits_have_the_configured_shape() {
    let c = common::small_corpus(30, 5);
    let n = c.keywords.len();
    assert_eq!(c.train.len(), 30);
    assert_eq!(c.test.positives.len(), n * c.config.test_positives);
    assert_eq!(c.dev.positives.len(), n * c.config.dev_positives);
    assert_eq!(c.test.negatives.len(), c.config.test_negatives);
    assert!(c.test.negative_hours() > 0.0);
    let total: usize = c.test.negatives.iter().map(|u| u.frames()).sum();
    assert!((c.test.negative_hours() - total as f64 / 360_000.0).abs() < 1e-12);
}

#[test]
fn positives_contain_their_keyword_and_negatives_none() {
    let c = common::small_corpus(10, 8);
    for u in c.test.positives.iter().chain(&c.dev.positives) {
        let k = &c.keywords[u.keyword.unwrap()];
        let phones = c.lexicon.phonemize_words(&u.words).unwrap();
        assert!(find_subsequence(&phones, &k.phones).is_some());
        let (s, e) = u.keyword_frames.unwrap();
        assert!(s < e && e <= u.frames());
    }
    for u in c.test.negatives.iter().chain(&c.dev.negatives) {
        assert!(u.keyword.is_none() && u.keyword_frames.is_none());
        let phones = c.lexicon.phonemize_words(&u.words).unwrap();
        for k in &c.keywords {
            assert!(find_subsequence(&phones, &k.phones).is_none(), "{}", u.id);
        }
    }
}

#[test]
fn written_corpus_loads_back() {
    let c = common::small_corpus(12, 3);
    let dir = tempfile::tempdir().unwrap();
    let paths = c.write(dir.path()).unwrap();
    assert_eq!(paths.len(), 5);
    let train = load_split(&dir.path().join("train.jsonl"), &c.keywords).unwrap();
    assert_eq!(train, c.train);
    let pos = load_split(&dir.path().join("test_pos.jsonl"), &c.keywords).unwrap();
    assert_eq!(pos, c.test.positives);
    let neg = load_split(&dir.path().join("test_neg.jsonl"), &c.keywords).unwrap();
    assert_eq!(neg, c.test.negatives);
    assert!(dir.path().join("lexicon.tsv").exists());
}

#[test]
fn manifest_round_trip_and_validation() {
    let records = vec![
        ManifestRecord {
            id: "a".into(),
            audio: Some("a.wav".into()),
            features: None,
            transcript: "call you jarvis".into(),
            keyword: Some("jarvis".into()),
            keyword_frames: Some((10, 40)),
        },
        ManifestRecord {
            id: "b".into(),
            audio: None,
            features: Some("b".into()),
            transcript: "hello".into(),
            keyword: None,
            keyword_frames: None,
        },
    ];
    let mut buf = Vec::new();
    write_manifest(&records, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(parse_manifest(&text).unwrap(), records);
    assert_eq!(records[0].words(), vec!["call", "you", "jarvis"]);

    let dup = format!("{text}{}", text.lines().next().unwrap());
    assert!(matches!(parse_manifest(&dup), Err(KwsError::Manifest(m)) if m.contains("duplicate")));
    let sourceless = r#"{"id":"c","transcript":"x"}"#;
    assert!(matches!(
        parse_manifest(sourceless),
        Err(KwsError::Manifest(_))
    ));
    assert!(
        matches!(parse_manifest("{not json"), Err(KwsError::Manifest(m)) if m.contains("line 1"))
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, &text).unwrap();
    assert!(matches!(read_manifest(&path), Err(KwsError::Manifest(m)) if m.contains("a.wav")));
    std::fs::write(dir.path().join("a.wav"), b"").unwrap();
    assert_eq!(read_manifest(&path).unwrap().len(), 2);
}

#[test]
fn unknown_keyword_label_is_reported() {
    let c = common::small_corpus(4, 3);
    let dir = tempfile::tempdir().unwrap();
    c.write(dir.path()).unwrap();
    let err = load_split(&dir.path().join("test_pos.jsonl"), &c.keywords[1..]).unwrap_err();
    assert!(matches!(err, KwsError::Manifest(m) if m.contains("unknown keyword")));
}

#[test]
fn impossible_configs_are_rejected() {
    let mut cfg = common::small_corpus(4, 3).config;
    cfg.words = 1000;
    assert!(matches!(Corpus::generate(&cfg), Err(KwsError::Config(_))));
    let mut cfg = common::small_corpus(4, 3).config;
    cfg.keyword_words = (3, 2);
    assert!(matches!(Corpus::generate(&cfg), Err(KwsError::Config(_))));
}
