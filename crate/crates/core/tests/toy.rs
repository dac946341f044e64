//! Behaviour of a small model trained end to end on a toy corpus.

mod common;

use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u2kws::cascade::{run_stream, CascadeConfig, DecoderMode, StreamState};
use u2kws::corpus::{Corpus, CorpusConfig};
use u2kws::ctc::{estimate_segment, keyword_viterbi};
use u2kws::frontend::{synth_units, Unit};
use u2kws::keywords::Keyword;
use u2kws::model::KwsModel;
use u2kws_nn::{ChunkSpec, ParamStore, Tensor};

struct Trained {
    corpus: Corpus,
    model: KwsModel,
    store: ParamStore<f32>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = Corpus::generate(&CorpusConfig {
            n_phones: 8,
            feat_dim: 16,
            words: 30,
            train_utterances: 400,
            keywords: 8,
            test_positives: 12,
            dev_positives: 1,
            test_negatives: 4,
            dev_negatives: 1,
            negative_words: 12,
            phone_frames: (6, 10),
            noise: 0.3,
            seed: 17,
            ..Default::default()
        })
        .expect("corpus");
        let (model, store) = common::train_toy::<f32>(&corpus, 20, 40, 17);
        Trained {
            corpus,
            model,
            store,
        }
    })
}

struct Scored {
    stage1: f64,
    decoder: f64,
}

/// First-stage path score and causal decoder score of `kw` on `feats`.
fn score(t: &Trained, feats: &Tensor<f32>, kw: &Keyword) -> Option<Scored> {
    let h = t
        .model
        .encode_features(&t.store, feats, ChunkSpec::chunked(4))
        .unwrap()
        .h;
    let emb = t
        .model
        .keyword_embedding(&t.store, &kw.encoder_input)
        .unwrap();
    let (hb, lp) = t.model.posteriors(&t.store, &h, Some(&emb)).unwrap();
    let path = keyword_viterbi(&lp, &kw.encoder_input, 0..lp.rows()).ok()?;
    let eok = t.model.vocab().eok();
    let search = path.start.saturating_sub(4)..(path.end + 1).min(lp.rows());
    let seg = estimate_segment(&lp, eok, kw.phones.len(), 0.5, search)
        .unwrap()
        .padded(2, 0..lp.rows());
    let decoder = t
        .model
        .decoder_score(&t.store, &hb.slice_rows(seg.start, seg.len()), &kw.phones)
        .unwrap();
    Some(Scored {
        stage1: path.score,
        decoder,
    })
}

#[test]
fn true_keyword_outscores_other_keywords() {
    let t = trained();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut s1, mut s2, mut n) = (0, 0, 0);
    for _ in 0..200 {
        let u = t.corpus.test.positives.choose(&mut rng).unwrap();
        let k = u.keyword.unwrap();
        let other = loop {
            let o = rng.random_range(0..t.corpus.keywords.len());
            if o != k {
                break o;
            }
        };
        let a = score(t, &u.feats, &t.corpus.keywords[k]).unwrap();
        // a longer keyword may not fit the utterance at all
        let Some(b) = score(t, &u.feats, &t.corpus.keywords[other]) else {
            continue;
        };
        s1 += (a.stage1 > b.stage1) as usize;
        s2 += (a.decoder > b.decoder) as usize;
        n += 1;
    }
    eprintln!("stage1 {s1}/{n} decoder {s2}/{n}");
    assert!(s1 as f64 >= 0.85 * n as f64);
    assert!(s2 as f64 >= 0.85 * n as f64);
}

#[test]
fn decoder_prefers_ordered_frames() {
    let t = trained();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut wins = 0;
    for i in 0..100 {
        let u = &t.corpus.test.positives[i % t.corpus.test.positives.len()];
        let kw = &t.corpus.keywords[u.keyword.unwrap()];
        let (s, e) = u.keyword_frames.unwrap();
        let h = t
            .model
            .encode_features(&t.store, &u.feats, ChunkSpec::full())
            .unwrap()
            .h;
        let emb = t
            .model
            .keyword_embedding(&t.store, &kw.encoder_input)
            .unwrap();
        let (hb, _) = t.model.posteriors(&t.store, &h, Some(&emb)).unwrap();
        let seg = hb.slice_rows(s / 4, e.div_ceil(4).min(hb.rows()) - s / 4);
        let mut order: Vec<usize> = (0..seg.rows()).collect();
        order.shuffle(&mut rng);
        let rows: Vec<&[f32]> = order.iter().map(|&r| seg.row(r)).collect();
        let shuffled = Tensor::from_rows(&rows).unwrap();
        let a = t.model.decoder_score(&t.store, &seg, &kw.phones).unwrap();
        let b = t
            .model
            .decoder_score(&t.store, &shuffled, &kw.phones)
            .unwrap();
        wins += (a > b) as usize;
    }
    eprintln!("ordered wins {wins}/100");
    assert!(wins >= 90);
}

fn silence(t: &Trained, frames: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    synth_units(&t.corpus.synth, &[Unit::Silence(frames)], &mut rng)
        .unwrap()
        .frames
}

#[test]
fn planted_keyword_triggers_and_silence_does_not() {
    let t = trained();
    let cfg = CascadeConfig {
        chunk_size: 4,
        window: 40,
        refractory: 8,
        decoder_mode: DecoderMode::Causal,
        ..Default::default()
    };
    let mut hits = 0;
    for u in &t.corpus.test.positives {
        let kw = &t.corpus.keywords[u.keyword.unwrap()];
        let quiet = silence(t, 40);
        let feats = Tensor::concat_rows(&[&quiet, &u.feats, &quiet]);
        let dets = run_stream(&t.model, &t.store, std::slice::from_ref(kw), &cfg, &feats).unwrap();
        hits += dets
            .iter()
            .any(|d| d.candidate.stage1 >= cfg.stage1_threshold) as usize;
    }
    let n = t.corpus.test.positives.len();
    eprintln!("planted {hits}/{n}");
    assert!(hits as f64 >= 0.8 * n as f64);
    let dets = run_stream(
        &t.model,
        &t.store,
        &t.corpus.keywords,
        &cfg,
        &silence(t, 600),
    )
    .unwrap();
    assert!(dets.is_empty(), "{dets:?}");
}

#[test]
fn full_context_rescoring_is_at_least_as_confident() {
    let t = trained();
    let cfg = CascadeConfig {
        chunk_size: 1,
        window: 60,
        refractory: 8,
        ..Default::default()
    }
    .permissive();
    let (mut better, mut n) = (0, 0);
    for u in &t.corpus.test.positives {
        let kw = &t.corpus.keywords[u.keyword.unwrap()];
        let mut state =
            StreamState::new(&t.model, &t.store, std::slice::from_ref(kw), &cfg).unwrap();
        let mut dets = Vec::new();
        let step = cfg.chunk_size * 4;
        let mut at = 0;
        while at < u.feats.rows() {
            let len = step.min(u.feats.rows() - at);
            dets.extend(state.process_chunk(&u.feats.slice_rows(at, len)).unwrap());
            at += len;
        }
        dets.extend(state.finish().unwrap());
        let Some(best) = dets
            .iter()
            .max_by(|a, b| a.candidate.stage1.total_cmp(&b.candidate.stage1))
        else {
            continue;
        };
        let full = state.verify(&best.candidate, DecoderMode::Full).unwrap();
        better += (full.stage2.unwrap() >= best.stage2.unwrap()) as usize;
        n += 1;
    }
    eprintln!("full >= causal {better}/{n}");
    assert!(n > 0 && better as f64 >= 0.6 * n as f64);
}
