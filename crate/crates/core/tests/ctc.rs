use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u2kws::ctc::{
    ctc_loss, ctc_loss_and_grad, ctc_loss_value, detect_spikes, estimate_segment, keyword_viterbi,
    min_frames, top_k, write_posteriorgram_jsonl, Segment,
};
use u2kws::keywords::Vocab;
use u2kws::KwsError;
use u2kws_nn::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor};

const BLANK: usize = 0;

fn random_logp(rng: &mut impl Rng, t: usize, v: usize) -> Tensor<f64> {
    let mut rows = Vec::with_capacity(t);
    for _ in 0..t {
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        rows.push(logits.iter().map(|x| x - z).collect::<Vec<_>>());
    }
    Tensor::from_rows(&rows).unwrap()
}

fn collapse(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Every label sequence of length `t` over `v` symbols.
fn all_sequences(t: usize, v: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..v.pow(t as u32)).map(move |mut n| {
        let mut s = vec![0; t];
        for x in s.iter_mut() {
            *x = n % v;
            n /= v;
        }
        s
    })
}

fn path_logp(logp: &Tensor<f64>, start: usize, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| logp.get(start + i, l))
        .sum()
}

fn brute_ctc(logp: &Tensor<f64>, target: &[usize]) -> f64 {
    let total: f64 = all_sequences(logp.rows(), logp.cols())
        .filter(|s| collapse(s) == target)
        .map(|s| path_logp(logp, 0, &s).exp())
        .sum();
    -total.ln()
}

/// Best alignment whose first and last frames carry the first and last keyword
/// tokens, anywhere in the window.
fn brute_viterbi(
    logp: &Tensor<f64>,
    tokens: &[usize],
    window: std::ops::Range<usize>,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    for s in window.clone() {
        for e in s..window.end {
            for seq in all_sequences(e + 1 - s, logp.cols()) {
                if seq[0] != tokens[0]
                    || *seq.last().unwrap() != *tokens.last().unwrap()
                    || collapse(&seq) != tokens
                {
                    continue;
                }
                let lp = path_logp(logp, s, &seq);
                if best.is_none_or(|b| lp > b) {
                    best = Some(lp);
                }
            }
        }
    }
    best
}

fn random_target(rng: &mut impl Rng, len: usize, v: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(1..v)).collect()
}

#[test]
fn single_frame_loss_is_negative_log_prob() {
    let logp: Tensor<f64> =
        Tensor::from_f64_rows(&[&[0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]]).unwrap();
    let loss = ctc_loss_value(&logp, &[1]).unwrap();
    assert!((loss + 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn two_frame_loss_sums_three_alignments() {
    let (p0, p1) = ([0.3, 0.6, 0.1], [0.5, 0.2, 0.3]);
    let logp: Tensor<f64> = Tensor::from_f64_rows(&[&p0.map(f64::ln), &p1.map(f64::ln)]).unwrap();
    let loss = ctc_loss_value(&logp, &[1]).unwrap();
    let expect = -(p0[1] * p1[1] + p0[1] * p1[0] + p0[0] * p1[1]).ln();
    assert!((loss - expect).abs() < 1e-12);
}

#[test]
fn loss_rejects_target_longer_than_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logp = random_logp(&mut rng, 3, 4);
    assert_eq!(min_frames(&[1, 1, 2]), 4);
    assert!(matches!(
        ctc_loss_value(&logp, &[1, 1, 2]),
        Err(KwsError::TargetTooLong { .. })
    ));
    assert!(ctc_loss_value(&logp, &[]).is_err());
}

#[test]
fn loss_matches_alignment_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7C);
    let mut checked = 0;
    for _ in 0..200 {
        let t = rng.random_range(1..=6);
        let len = rng.random_range(1..=3);
        let target = random_target(&mut rng, len, 4);
        let logp = random_logp(&mut rng, t, 4);
        if t < min_frames(&target) {
            assert!(ctc_loss_value(&logp, &target).is_err());
            continue;
        }
        let loss = ctc_loss_value(&logp, &target).unwrap();
        let oracle = brute_ctc(&logp, &target);
        assert!(
            (loss - oracle).abs() < 1e-6,
            "T={t} target={target:?}: {loss} vs {oracle}"
        );
        checked += 1;
    }
    assert!(checked > 120);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::<f64>::new(0);
    for target in [vec![1], vec![1, 2], vec![2, 2], vec![1, 3, 1]] {
        let logits = random_logp(&mut rng, 6, 4);
        let report = grad_check(&store, &[logits], GradCheckOptions::default(), |g, x| {
            let lp = g.log_softmax(x[0]);
            Ok(ctc_loss(g, lp, &target).expect("target fits"))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{target:?}: {report:?}");
    }
}

#[test]
fn analytic_gradient_is_posterior_occupancy() {
    // d loss / d logp[t][k] = -occupancy(t, k); the occupancies of each frame sum to 1
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logp = random_logp(&mut rng, 5, 4);
    let (_, grad) = ctc_loss_and_grad(&logp, &[1, 2]).unwrap();
    for row in grad.chunks(4) {
        assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-9);
    }
    let store = ParamStore::new(0);
    let mut g = Graph::<f64>::new(&store);
    let x = g.input(logp, false);
    assert!(ctc_loss(&mut g, x, &[1, 2, 3, 1, 2, 3]).is_err());
}

#[test]
fn viterbi_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x71E);
    for case in 0..200 {
        let t = rng.random_range(1..=6);
        let len = rng.random_range(1..=3);
        let tokens = random_target(&mut rng, len, 4);
        let logp = random_logp(&mut rng, t, 4);
        let start = if case % 3 == 0 {
            rng.random_range(0..t)
        } else {
            0
        };
        let window = start..t;
        match brute_viterbi(&logp, &tokens, window.clone()) {
            None => assert!(keyword_viterbi(&logp, &tokens, window).is_err()),
            Some(oracle) => {
                let path = keyword_viterbi(&logp, &tokens, window.clone()).unwrap();
                assert!(
                    (path.log_prob - oracle).abs() < 1e-9,
                    "{tokens:?} {window:?}"
                );
                assert!(path.start >= window.start && path.end < window.end);
                assert_eq!(collapse(&path.alignment), tokens);
                assert_eq!(path.alignment.len(), path.frames());
                assert!(
                    (path_logp(&logp, path.start, &path.alignment) - path.log_prob).abs() < 1e-9
                );
                assert!((path.score * path.frames() as f64 - path.log_prob).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn single_phone_keyword_lands_on_best_frame() {
    let lp = |p: [f64; 4]| p.map(f64::ln);
    let logp: Tensor<f64> = Tensor::from_f64_rows(&[
        &lp([0.7, 0.1, 0.1, 0.1]),
        &lp([0.1, 0.8, 0.05, 0.05]),
        &lp([0.6, 0.2, 0.1, 0.1]),
    ])
    .unwrap();
    let path = keyword_viterbi(&logp, &[1], 0..3).unwrap();
    assert_eq!((path.start, path.end), (1, 1));
    assert!((path.score - 0.8f64.ln()).abs() < 1e-12);
}

#[test]
fn certain_spikes_score_zero() {
    let one_hot = |k: usize| {
        let mut r = vec![-30.0; 5];
        r[k] = 0.0;
        r
    };
    let rows: Vec<_> = [0, 2, 0, 3, 3, 0, 2, 0]
        .iter()
        .map(|&k| one_hot(k))
        .collect();
    let logp = Tensor::from_rows(&rows).unwrap();
    let path = keyword_viterbi(&logp, &[2, 3, 2], 0..8).unwrap();
    assert_eq!(path.score, 0.0);
    assert_eq!((path.start, path.end), (1, 6));
}

#[test]
fn viterbi_rejects_bad_requests() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logp = random_logp(&mut rng, 4, 4);
    assert!(matches!(
        keyword_viterbi(&logp, &[], 0..4),
        Err(KwsError::EmptyKeyword)
    ));
    assert!(matches!(
        keyword_viterbi(&logp, &[1, 1], 1..3),
        Err(KwsError::WindowTooShort { .. })
    ));
    assert!(keyword_viterbi(&logp, &[4], 0..4).is_err());
    assert!(keyword_viterbi(&logp, &[0], 0..4).is_err());
    assert!(keyword_viterbi(&logp, &[1], 2..6).is_err());
}

#[test]
fn uniform_posteriors_have_no_spikes() {
    let logp = Tensor::full(6, 4, 0.25f64.ln());
    assert!(detect_spikes(&logp, 0.5).is_empty());
}

#[test]
fn one_confident_frame_gives_one_spike() {
    let mut logp = Tensor::full(5, 4, 0.25f64.ln());
    logp.row_mut(2)
        .copy_from_slice(&[0.04f64.ln(), 0.03f64.ln(), 0.9f64.ln(), 0.03f64.ln()]);
    let spikes = detect_spikes(&logp, 0.5);
    assert_eq!(spikes.len(), 1);
    assert_eq!((spikes[0].frame, spikes[0].token), (2, 2));
    assert!((spikes[0].prob - 0.9).abs() < 1e-12);
}

// '-' blank, 'a' 'b' 'c' phones at 0.9, '~' phone a at 0.4, 's' <sos/eos> at
// 0.9, 'E' <eok> at 0.9, 'e' <eok> at 0.45; the rest of each row is spread
// evenly.
fn pattern(p: &str) -> Tensor<f64> {
    let v = Vocab::new(3).unwrap();
    let n = v.size();
    let rows: Vec<Vec<f64>> = p
        .chars()
        .map(|c| {
            let (tok, prob) = match c {
                '-' => (BLANK, 0.9),
                'a' => (1, 0.9),
                'b' => (2, 0.9),
                'c' => (3, 0.9),
                '~' => (1, 0.4),
                's' => (v.sos_eos(), 0.9),
                'E' => (v.eok(), 0.9),
                'e' => (v.eok(), 0.45),
                _ => panic!("unknown symbol {c}"),
            };
            let rest = (1.0 - prob) / (n - 1) as f64;
            (0..n)
                .map(|k| if k == tok { prob } else { rest }.ln())
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn segment_rule_hand_traces() {
    let eok = Vocab::new(3).unwrap().eok();
    let full = |p: &str| 0..p.len();
    #[rustfmt::skip]
    let cases: Vec<(&str, usize, f64, std::ops::Range<usize>, (usize, usize))> = vec![
        // exact spike count
        ("---a-b-c-E", 3, 0.5, full("---a-b-c-E"), (3, 9)),
        ("--a--E", 1, 0.5, full("--a--E"), (2, 5)),
        ("a-b-c-a-b-c-E", 6, 0.5, full("a-b-c-a-b-c-E"), (0, 12)),
        // surplus spikes: stop at the k-th counting backward
        ("---a-b-c-E", 2, 0.5, full("---a-b-c-E"), (5, 9)),
        ("a-b-c-a-b-c-E", 3, 0.5, full("a-b-c-a-b-c-E"), (6, 12)),
        ("-aab-E", 2, 0.5, full("-aab-E"), (2, 5)),
        // too few or zero spikes: window start
        ("---a-b-c-E", 4, 0.5, full("---a-b-c-E"), (0, 9)),
        ("-----E--", 2, 0.5, full("-----E--"), (0, 5)),
        ("-a~~b-E", 2, 0.95, full("-a~~b-E"), (0, 6)),
        ("---a-b-c-E", 3, 0.5, 4..10, (4, 9)),
        // <eok> peak at boundary frames
        ("E-a-b", 2, 0.5, full("E-a-b"), (0, 0)),
        ("a-b-c--E", 3, 0.5, full("a-b-c--E"), (0, 7)),
        ("a-b-c--E", 2, 0.5, full("a-b-c--E"), (2, 7)),
        ("---a-b-c-E", 3, 0.5, 9..10, (9, 9)),
        // first of tied peaks; stronger peak wins
        ("-aEbE", 1, 0.5, full("-aEbE"), (1, 2)),
        ("a-b-e-c-E-", 2, 0.5, full("a-b-e-c-E-"), (2, 8)),
        ("-a-e-b-E", 1, 0.5, 0..7, (1, 3)),
        // weak phones, later spikes and <sos/eos> spikes
        ("-a~~b-E", 2, 0.5, full("-a~~b-E"), (1, 6)),
        ("-a~~b-E", 2, 0.3, full("-a~~b-E"), (3, 6)),
        ("-a-b-E-c-", 2, 0.5, full("-a-b-E-c-"), (1, 5)),
        ("-s-a-E", 2, 0.5, full("-s-a-E"), (1, 5)),
        // no <eok> mass anywhere: peak falls on the highest residual
        ("-a-b~-", 2, 0.5, full("-a-b~-"), (1, 4)),
        ("abcab", 1, 0.5, full("abcab"), (0, 0)),
    ];
    for (p, k, thr, window, (start, end)) in cases {
        let seg = estimate_segment(&pattern(p), eok, k, thr, window.clone()).unwrap();
        assert_eq!(
            seg,
            Segment { start, end },
            "{p} k={k} thr={thr} window={window:?}"
        );
    }
}

#[test]
fn segment_rejects_empty_window() {
    let logp = pattern("-a-E");
    assert!(estimate_segment(&logp, 5, 1, 0.5, 2..2).is_err());
    assert!(estimate_segment(&logp, 5, 1, 0.5, 0..9).is_err());
}

#[test]
fn padding_clamps_to_bounds() {
    let s = Segment { start: 1, end: 7 };
    assert_eq!(s.padded(2, 0..9), Segment { start: 0, end: 8 });
    assert_eq!(s.padded(2, 0..20), Segment { start: 0, end: 9 });
    assert_eq!(s.padded(0, 0..20), s);
    assert_eq!(s.len(), 7);
}

#[test]
fn posteriorgram_dump_lists_top_tokens() {
    let logp = pattern("-aE");
    let top = top_k(&logp, 2);
    assert_eq!(top.len(), 3);
    assert_eq!(top[1].top[0].0, 1);
    let mut buf = Vec::new();
    write_posteriorgram_jsonl(&logp, 2, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["frame"], 0);
}

proptest! {
    #[test]
    fn spike_count_non_increasing_in_threshold(seed in any::<u64>(), t in 1usize..20, a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logp = random_logp(&mut rng, t, 5);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(detect_spikes(&logp, hi).len() <= detect_spikes(&logp, lo).len());
    }

    #[test]
    fn segment_is_always_valid(seed in any::<u64>(), t in 1usize..30, k in 1usize..6, lo in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logp = random_logp(&mut rng, t, 6);
        let start = lo % t;
        let seg = estimate_segment(&logp, 5, k, 0.5, start..t).unwrap();
        prop_assert!(start <= seg.start && seg.start <= seg.end && seg.end < t);
    }

    #[test]
    fn lowering_path_probabilities_never_raises_best_path(seed in any::<u64>(), t in 2usize..12, drop in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logp = random_logp(&mut rng, t, 4);
        let tokens = vec![rng.random_range(1..4)];
        let before = keyword_viterbi(&logp, &tokens, 0..t).unwrap();
        for (i, &tok) in before.alignment.iter().enumerate() {
            let f = before.start + i;
            logp.set(f, tok, logp.get(f, tok) - drop);
        }
        let after = keyword_viterbi(&logp, &tokens, 0..t).unwrap();
        prop_assert!(after.log_prob <= before.log_prob + 1e-12);
    }

    #[test]
    fn loss_is_non_negative_and_finite(seed in any::<u64>(), t in 3usize..12, len in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logp = random_logp(&mut rng, t, 5);
        let target = random_target(&mut rng, len, 5);
        let loss = ctc_loss_value(&logp, &target).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
    }
}
