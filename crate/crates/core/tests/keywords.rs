use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u2kws::keywords::{
    find_subsequence, negative_from_words, parse_keyword_list, positive_from_span, sample_keyword,
    sample_rng, Keyword, KeywordSample, Lexicon, Polarity, SamplerConfig, Vocab,
};
use u2kws::KwsError;

/// One phone per word, named like the word, so token sequences read as text.
fn jarvis_lexicon() -> Lexicon {
    Lexicon::from_tsv("Call\tCall\nyou\tyou\nJarvis\tJarvis\nAlex\tAlex\n", None).unwrap()
}

/// Renders ids with the shared start/end symbol spelled by its role.
fn render(lex: &Lexicon, ids: &[usize], sos_eos: &str) -> String {
    ids.iter()
        .map(|&i| {
            if i == lex.vocab().sos_eos() {
                sos_eos.to_string()
            } else {
                lex.token_name(i)
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn worked_example_positive() {
    let lex = jarvis_lexicon();
    let s = positive_from_span(&["Call", "you", "Jarvis"], 2, 1, &lex).unwrap();
    assert_eq!(s.polarity, Polarity::Positive);
    assert_eq!(
        render(&lex, &s.keyword.encoder_input, "<eos>"),
        "Jarvis <eok>"
    );
    assert_eq!(
        render(&lex, &s.ctc_target, "<eos>"),
        "Call you Jarvis <eok>"
    );
    assert_eq!(render(&lex, &s.decoder_input, "<sos>"), "<sos> Jarvis");
    assert_eq!(render(&lex, &s.decoder_target, "<eos>"), "Jarvis <eok>");
}

#[test]
fn worked_example_negative() {
    let lex = jarvis_lexicon();
    let s = negative_from_words(&["Call", "you", "Jarvis"], &["Alex"], &lex).unwrap();
    assert_eq!(s.polarity, Polarity::Negative);
    assert_eq!(render(&lex, &s.ctc_target, "<eos>"), "Call you Jarvis");
    assert_eq!(render(&lex, &s.decoder_input, "<sos>"), "<sos> Alex");
    assert_eq!(render(&lex, &s.decoder_target, "<eos>"), "<eos> <eos>");
    assert_eq!(s.decoder_target, vec![lex.vocab().sos_eos(); 2]);
}

#[test]
fn phonemize_concatenates_lookups() {
    let lex = Lexicon::from_tsv("hey\th ey\nthere\tdh eh r\n", None).unwrap();
    let hey = lex.lookup("hey").unwrap().to_vec();
    let there = lex.lookup("there").unwrap().to_vec();
    assert_eq!(lex.phonemize("hey").unwrap(), hey);
    assert_eq!(lex.phonemize("hey there").unwrap(), [hey, there].concat());
    assert!(matches!(lex.phonemize(""), Err(KwsError::EmptyKeyword)));
    assert!(matches!(lex.phonemize("hey you"), Err(KwsError::Oov(w)) if w == "you"));
}

#[test]
fn phonemize_round_trips_through_inverted_map() {
    let lex = Lexicon::from_tsv("hey\th ey\nthere\tdh eh r\nhere\th ih r\n", None).unwrap();
    let inverted: HashMap<Vec<usize>, &str> = lex
        .words()
        .map(|w| (lex.lookup(w).unwrap().to_vec(), w))
        .collect();
    let text = ["here", "hey", "there", "hey"];
    let phones = lex.phonemize(&text.join(" ")).unwrap();
    let mut decoded = Vec::new();
    let mut at = 0;
    for w in text {
        let n = lex.lookup(w).unwrap().len();
        decoded.push(inverted[&phones[at..at + n]]);
        at += n;
    }
    assert_eq!(decoded, text);
    for &p in &phones {
        assert!(lex.vocab().is_phone(p));
        assert!(p < lex.vocab().size());
    }
}

#[test]
fn keyword_input_ends_with_eok() {
    let lex = jarvis_lexicon();
    let kws = parse_keyword_list("# wake words\nCall you\n\n  Jarvis \n", &lex).unwrap();
    assert_eq!(kws.len(), 2);
    assert_eq!(kws[1].text, "Jarvis");
    for k in &kws {
        assert_eq!(*k.encoder_input.last().unwrap(), lex.vocab().eok());
        assert!(!k.encoder_input.contains(&Vocab::BLANK));
        assert_eq!(&k.encoder_input[..k.phones.len()], k.phones.as_slice());
    }
    assert!(matches!(
        parse_keyword_list("\n# none\n", &lex),
        Err(KwsError::NoKeywords)
    ));
    assert!(matches!(
        Keyword::new(0, "Bob", &lex),
        Err(KwsError::Oov(_))
    ));
}

#[test]
fn eok_follows_first_occurrence() {
    let lex = jarvis_lexicon();
    let s = positive_from_span(&["Jarvis", "you", "Jarvis"], 2, 1, &lex).unwrap();
    assert_eq!(
        render(&lex, &s.ctc_target, "<eos>"),
        "Jarvis <eok> you Jarvis"
    );
}

#[test]
fn sampler_reports_bad_inputs() {
    let lex = jarvis_lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = SamplerConfig::default();
    let empty: [&str; 0] = [];
    assert!(sample_keyword(&empty, Polarity::Positive, &lex, &cfg, &mut rng).is_err());
    assert!(matches!(
        sample_keyword(&["Call"], Polarity::Positive, &lex, &cfg, &mut rng),
        Err(KwsError::TranscriptTooShort { .. })
    ));
    // every lexicon word is in the transcript
    assert!(matches!(
        sample_keyword(
            &["Call", "you", "Jarvis", "Alex"],
            Polarity::Negative,
            &lex,
            &cfg,
            &mut rng
        ),
        Err(KwsError::NegativeSampling(_))
    ));
}

fn random_lexicon(rng: &mut impl Rng, n_phones: usize, n_words: usize) -> Lexicon {
    let phones: Vec<String> = (0..n_phones).map(|i| format!("p{i}")).collect();
    let mut lex = Lexicon::new(phones).unwrap();
    for w in 0..n_words {
        let len = rng.random_range(1..=3);
        let ids = (0..len).map(|_| rng.random_range(1..=n_phones)).collect();
        lex.insert(&format!("w{w}"), ids).unwrap();
    }
    lex
}

fn check_invariants(s: &KeywordSample, transcript_len: usize, cfg: &SamplerConfig, v: Vocab) {
    let k = &s.keyword.phones;
    assert!(!k.is_empty());
    assert_eq!(s.keyword.encoder_input, [k.as_slice(), &[v.eok()]].concat());
    assert_eq!(s.decoder_input, [&[v.sos_eos()], k.as_slice()].concat());
    assert_eq!(s.decoder_target.len(), s.decoder_input.len());
    let n = s.keyword_words.len();
    assert!(n >= cfg.min_words && n <= cfg.max_words);
    let eoks = s.ctc_target.iter().filter(|&&t| t == v.eok()).count();
    match s.polarity {
        Polarity::Positive => {
            assert!(n <= transcript_len);
            let at = find_subsequence(&s.transcript_phones, k)
                .expect("positive keyword is in the transcript");
            let mut expect = s.transcript_phones.clone();
            expect.insert(at + k.len(), v.eok());
            assert_eq!(s.ctc_target, expect);
            assert_eq!(eoks, 1);
            assert_eq!(s.decoder_target, s.keyword.encoder_input);
        }
        Polarity::Negative => {
            assert!(find_subsequence(&s.transcript_phones, k).is_none());
            assert_eq!(s.ctc_target, s.transcript_phones);
            assert_eq!(eoks, 0);
            assert!(s.decoder_target.iter().all(|&t| t == v.sos_eos()));
        }
    }
}

#[test]
fn ten_thousand_samples_hold_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let lex = random_lexicon(&mut rng, 20, 60);
    let words: Vec<String> = lex.words().map(String::from).collect();
    let cfg = SamplerConfig::default();
    let mut counts = [0usize; 2];
    for i in 0..10_000u64 {
        let mut r = sample_rng(7, 0, i);
        let len = r.random_range(2..=8);
        let transcript: Vec<&str> = (0..len)
            .map(|_| words[r.random_range(0..words.len())].as_str())
            .collect();
        let polarity = if i % 2 == 0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        let s = sample_keyword(&transcript, polarity, &lex, &cfg, &mut r).unwrap();
        assert_eq!(s.polarity, polarity);
        assert_eq!(
            s.transcript_phones,
            lex.phonemize_words(&transcript).unwrap()
        );
        check_invariants(&s, transcript.len(), &cfg, lex.vocab());
        counts[i as usize % 2] += 1;
    }
    assert_eq!(counts, [5000, 5000]);
}

#[test]
fn sampler_is_deterministic_per_utterance() {
    let lex = jarvis_lexicon();
    let t = ["Call", "you", "Jarvis"];
    let cfg = SamplerConfig {
        min_words: 1,
        max_words: 2,
        max_retries: 10,
    };
    let draw =
        |u| sample_keyword(&t, Polarity::Positive, &lex, &cfg, &mut sample_rng(3, 1, u)).unwrap();
    assert_eq!(draw(5), draw(5));
    let distinct: std::collections::HashSet<_> = (0..50).map(|u| draw(u).keyword.text).collect();
    assert!(distinct.len() > 1);
}

proptest! {
    #[test]
    fn positive_spans_are_contiguous(seed in any::<u64>(), len in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lex = random_lexicon(&mut rng, 8, 12);
        let words: Vec<String> = lex.words().map(String::from).collect();
        let transcript: Vec<&str> = (0..len).map(|_| words[rng.random_range(0..words.len())].as_str()).collect();
        let start = rng.random_range(0..len);
        let n = rng.random_range(1..=len - start);
        let s = positive_from_span(&transcript, start, n, &lex).unwrap();
        let at = find_subsequence(&s.transcript_phones, &s.keyword.phones).unwrap();
        prop_assert_eq!(&s.transcript_phones[at..at + s.keyword.phones.len()], s.keyword.phones.as_slice());
    }
}
