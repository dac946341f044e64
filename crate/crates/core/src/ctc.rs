//! CTC loss, keyword path search, spike detection and `<eok>`-anchored
//! segment estimation over a posteriorgram (`T×V` log-probabilities).

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use u2kws_nn::{Float, Function, Graph, Tensor, Var};

use crate::error::{KwsError, Result};
use crate::keywords::Vocab;

const NEG_INF: f64 = f64::NEG_INFINITY;

fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames needed to emit `target`: one per token plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[usize], vocab_size: usize, frames: usize) -> Result<()> {
    if target.is_empty() {
        return Err(KwsError::EmptyKeyword);
    }
    if let Some(&id) = target
        .iter()
        .find(|&&t| t == Vocab::BLANK || t >= vocab_size)
    {
        return Err(KwsError::PhoneIdOutOfRange {
            id,
            size: vocab_size,
        });
    }
    let need = min_frames(target);
    if need > frames {
        return Err(KwsError::TargetTooLong {
            target: target.len(),
            need,
            frames,
        });
    }
    Ok(())
}

/// Blank-augmented label sequence `b l1 b l2 … lL b`.
fn augment(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(Vocab::BLANK);
    for &t in target {
        ext.push(t);
        ext.push(Vocab::BLANK);
    }
    ext
}

/// Loss value and the gradient `∂loss/∂logp`, both in f64.
pub fn ctc_loss_and_grad<F: Float>(logp: &Tensor<F>, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (t_len, v) = (logp.rows(), logp.cols());
    check_target(target, v, t_len)?;
    let ext = augment(target);
    let s_len = ext.len();
    let lp = |t: usize, s: usize| logp.get(t, ext[s]).as_f64();
    let skip = |s: usize| s >= 2 && ext[s] != Vocab::BLANK && ext[s] != ext[s - 2];

    // alpha and beta both include the emission at their own frame
    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = lp(0, 0);
    alpha[1] = lp(0, 1);
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            if a != NEG_INF {
                alpha[t * s_len + s] = a + lp(t, s);
            }
        }
    }
    let mut beta = vec![NEG_INF; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != Vocab::BLANK && ext[s + 2] != ext[s] {
                b = log_add(b, next[s + 2]);
            }
            if b != NEG_INF {
                beta[t * s_len + s] = b + lp(t, s);
            }
        }
    }
    let log_p = log_add(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_p.is_finite() {
        return Err(KwsError::TargetTooLong {
            target: target.len(),
            need: min_frames(target),
            frames: t_len,
        });
    }
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        let mut occ = vec![NEG_INF; v];
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a != NEG_INF && b != NEG_INF {
                occ[ext[s]] = log_add(occ[ext[s]], a + b - lp(t, s));
            }
        }
        for k in 0..v {
            if occ[k] != NEG_INF {
                grad[t * v + k] = -(occ[k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// `−log p(target | logp)` summed over all alignments.
pub fn ctc_loss_value<F: Float>(logp: &Tensor<F>, target: &[usize]) -> Result<f64> {
    ctc_loss_and_grad(logp, target).map(|(l, _)| l)
}

struct CtcBackward<F> {
    grad: Tensor<F>,
}

impl<F: Float> Function<F> for CtcBackward<F> {
    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad_output: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>> {
        vec![Some(self.grad.scale(grad_output.item()))]
    }
}

/// Differentiable CTC loss node on a log-probability matrix.
pub fn ctc_loss<F: Float>(g: &mut Graph<'_, F>, logp: Var, target: &[usize]) -> Result<Var> {
    let lv = g.value(logp);
    let (loss, grad) = ctc_loss_and_grad(lv, target)?;
    let grad = Tensor::from_vec(lv.rows(), lv.cols(), grad.into_iter().map(F::of).collect())?;
    Ok(g.custom(
        &[logp],
        Tensor::scalar(F::of(loss)),
        Arc::new(CtcBackward { grad }),
    ))
}

/// Best keyword alignment inside a window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordPath {
    /// `log_prob / (end − start + 1)`.
    pub score: f64,
    pub log_prob: f64,
    /// First frame of the first keyword token.
    pub start: usize,
    /// Last frame of the last keyword token.
    pub end: usize,
    /// Output unit on every frame of `start..=end`.
    pub alignment: Vec<usize>,
}

impl KeywordPath {
    pub fn frames(&self) -> usize {
        self.end + 1 - self.start
    }
}

/// Highest-probability CTC alignment of `tokens` anywhere inside `window`.
/// Frames before the first token and after the last are unconstrained and
/// cost nothing; the score is the path log-probability per occupied frame.
pub fn keyword_viterbi<F: Float>(
    logp: &Tensor<F>,
    tokens: &[usize],
    window: Range<usize>,
) -> Result<KeywordPath> {
    let v = logp.cols();
    if window.end > logp.rows() || window.start > window.end {
        return Err(KwsError::Config(format!(
            "window {window:?} outside posteriorgram of {} frames",
            logp.rows()
        )));
    }
    if tokens.is_empty() {
        return Err(KwsError::EmptyKeyword);
    }
    if let Some(&id) = tokens.iter().find(|&&t| t == Vocab::BLANK || t >= v) {
        return Err(KwsError::PhoneIdOutOfRange { id, size: v });
    }
    let w = window.len();
    if w < min_frames(tokens) {
        return Err(KwsError::WindowTooShort {
            window: w,
            tokens: tokens.len(),
        });
    }
    // states 1..=2L-1 of the blank-augmented sequence; 0 and 2L are the free
    // prefix/suffix and never visited
    let ext = augment(tokens);
    let s_len = ext.len();
    let (first, last) = (1, s_len - 2);
    const START: u32 = u32::MAX;
    let mut delta = vec![NEG_INF; w * s_len];
    let mut back = vec![START; w * s_len];
    let mut best: Option<(f64, usize)> = None;
    for i in 0..w {
        let t = window.start + i;
        for s in first..=last {
            let mut val = if s == first { 0.0 } else { NEG_INF };
            let mut from = START;
            if i > 0 {
                let prev = &delta[(i - 1) * s_len..i * s_len];
                let mut consider = |p: usize| {
                    if prev[p] > val {
                        val = prev[p];
                        from = p as u32;
                    }
                };
                consider(s);
                if s > first {
                    consider(s - 1);
                }
                if s >= first + 2 && ext[s] != Vocab::BLANK && ext[s] != ext[s - 2] {
                    consider(s - 2);
                }
            }
            if val != NEG_INF {
                delta[i * s_len + s] = val + logp.get(t, ext[s]).as_f64();
                back[i * s_len + s] = from;
            }
        }
        let end_val = delta[i * s_len + last];
        if end_val != NEG_INF && best.is_none_or(|(b, _)| end_val > b) {
            best = Some((end_val, i));
        }
    }
    let (log_prob, end_i) = best.expect("window admits at least one alignment");
    let mut alignment = Vec::new();
    let (mut i, mut s) = (end_i, last);
    loop {
        alignment.push(ext[s]);
        let b = back[i * s_len + s];
        if b == START {
            break;
        }
        s = b as usize;
        i -= 1;
    }
    alignment.reverse();
    let start = window.start + i;
    let end = window.start + end_i;
    Ok(KeywordPath {
        score: log_prob / (end + 1 - start) as f64,
        log_prob,
        start,
        end,
        alignment,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub frame: usize,
    pub token: usize,
    pub prob: f64,
}

fn best_non_blank<F: Float>(logp: &Tensor<F>, t: usize) -> (usize, f64) {
    let row = logp.row(t);
    let mut best = (1, row[1].as_f64());
    for (k, &x) in row.iter().enumerate().skip(2) {
        if x.as_f64() > best.1 {
            best = (k, x.as_f64());
        }
    }
    best
}

/// Frames whose most likely non-blank unit has probability above `threshold`.
pub fn detect_spikes<F: Float>(logp: &Tensor<F>, threshold: f64) -> Vec<Spike> {
    (0..logp.rows())
        .filter_map(|t| {
            let (token, lp) = best_non_blank(logp, t);
            let prob = lp.exp();
            (prob > threshold).then_some(Spike {
                frame: t,
                token,
                prob,
            })
        })
        .collect()
}

/// Inclusive frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Widens by `pad` frames on each side, clamped to `bounds`.
    pub fn padded(&self, pad: usize, bounds: Range<usize>) -> Segment {
        Segment {
            start: self.start.saturating_sub(pad).max(bounds.start),
            end: (self.end + pad).min(bounds.end.saturating_sub(1)),
        }
    }
}

/// End = frame of highest `<eok>` probability in `window`. Walking back from
/// there, non-blank spikes other than `<eok>` are counted; the frame where the
/// count reaches `keyword_len` is the start, else the window start.
pub fn estimate_segment<F: Float>(
    logp: &Tensor<F>,
    eok: usize,
    keyword_len: usize,
    spike_threshold: f64,
    window: Range<usize>,
) -> Result<Segment> {
    if window.is_empty() || window.end > logp.rows() {
        return Err(KwsError::Config(format!(
            "segment window {window:?} invalid for {} frames",
            logp.rows()
        )));
    }
    let mut end = window.start;
    for t in window.clone() {
        if logp.get(t, eok) > logp.get(end, eok) {
            end = t;
        }
    }
    let mut count = 0;
    for t in (window.start..=end).rev() {
        let (token, lp) = best_non_blank(logp, t);
        if token != eok && lp.exp() > spike_threshold {
            count += 1;
            if count == keyword_len {
                return Ok(Segment { start: t, end });
            }
        }
    }
    Ok(Segment {
        start: window.start,
        end,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTopK {
    pub frame: usize,
    pub top: Vec<(usize, f64)>,
}

/// Per-frame top-`k` units, most likely first.
pub fn top_k<F: Float>(logp: &Tensor<F>, k: usize) -> Vec<FrameTopK> {
    (0..logp.rows())
        .map(|t| {
            let mut row: Vec<(usize, f64)> =
                logp.row(t).iter().map(|x| x.as_f64()).enumerate().collect();
            row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            row.truncate(k);
            FrameTopK { frame: t, top: row }
        })
        .collect()
}

/// One JSON object per frame.
pub fn write_posteriorgram_jsonl<F: Float, W: Write>(
    logp: &Tensor<F>,
    k: usize,
    mut out: W,
) -> Result<()> {
    for f in top_k(logp, k) {
        serde_json::to_writer(&mut out, &f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(min_frames(&[1, 1, 2]), 4);
        assert_eq!(min_frames(&[1, 2, 1]), 3);
    }

    #[test]
    fn too_short_target_is_rejected() {
        let lp = Tensor::<f64>::full(2, 4, (0.25f64).ln());
        assert!(matches!(
            ctc_loss_value(&lp, &[1, 1]),
            Err(KwsError::TargetTooLong { need: 3, .. })
        ));
    }
}
