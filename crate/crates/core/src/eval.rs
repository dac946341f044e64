//! Detection runs over evaluation splits, per-keyword score lists, ROC
//! curves on a false-alarm-per-hour grid, F1 and threshold selection.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use u2kws_nn::{Float, ParamStore};

use crate::cascade::{run_stream, CascadeConfig, Detection};
use crate::corpus::{EvalSplit, Utterance};
use crate::error::{KwsError, Result};
use crate::keywords::Keyword;
use crate::model::{KwsModel, SUBSAMPLING};
use crate::par::{self, Parallelism};

/// Default false alarms per hour at which curves are reported.
pub const FA_GRID: [f64; 7] = [0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0];

/// Detections of every stream in a split, keyed by stream id.
pub type DetectionLog = HashMap<String, Vec<Detection>>;

/// Runs the cascade over a split: each positive against its own keyword,
/// each negative stream against every keyword.
pub fn run_split<F: Float>(
    model: &KwsModel,
    store: &ParamStore<F>,
    keywords: &[Keyword],
    split: &EvalSplit,
    config: &CascadeConfig,
    parallelism: Parallelism,
) -> Result<DetectionLog> {
    let streams: Vec<&Utterance> = split.positives.iter().chain(&split.negatives).collect();
    let mut inner = config.clone();
    if parallelism.is_parallel() {
        inner.parallelism = Parallelism::Sequential;
    }
    let results = par::map(
        parallelism,
        &streams,
        |u| -> Result<(String, Vec<Detection>)> {
            let feats = u.feats.cast::<F>();
            let dets = match u.keyword {
                Some(k) => {
                    let kw = keywords.get(k).ok_or_else(|| {
                        KwsError::Manifest(format!("`{}`: keyword index {k} out of range", u.id))
                    })?;
                    let mut dets =
                        run_stream(model, store, std::slice::from_ref(kw), &inner, &feats)?;
                    for d in &mut dets {
                        d.candidate.keyword = k;
                    }
                    dets
                }
                None => run_stream(model, store, keywords, &inner, &feats)?,
            };
            Ok((u.id.clone(), dets))
        },
    );
    results.into_iter().collect()
}

/// Which score a detection contributes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScoreRule {
    /// First-stage path score.
    Stage1,
    /// Decoder score of detections whose first-stage score reaches the given
    /// threshold.
    Stage2 { stage1_threshold: f64 },
}

impl ScoreRule {
    pub fn score(&self, d: &Detection) -> Option<f64> {
        if !d.accept {
            return None;
        }
        match *self {
            ScoreRule::Stage1 => Some(d.candidate.stage1),
            ScoreRule::Stage2 { stage1_threshold } => {
                if d.candidate.stage1 >= stage1_threshold {
                    d.stage2
                } else {
                    None
                }
            }
        }
    }
}

/// A labeled positive stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveRef {
    pub stream: String,
    pub keyword: usize,
    /// Encoder frames `[start, end)` of the true keyword.
    pub truth: Option<(usize, usize)>,
}

impl PositiveRef {
    pub fn of(u: &Utterance) -> Option<Self> {
        u.keyword.map(|k| PositiveRef {
            stream: u.id.clone(),
            keyword: k,
            truth: u
                .keyword_frames
                .map(|(s, e)| (s / SUBSAMPLING, e.div_ceil(SUBSAMPLING))),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Count a positive only if the detection segment overlaps the true
    /// keyword location.
    pub require_overlap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordScores {
    pub keyword: String,
    pub n_words: usize,
    /// Best score per positive utterance, `None` when nothing fired.
    pub positives: Vec<Option<f64>>,
    /// Every firing on the negative streams.
    pub negatives: Vec<f64>,
}

impl KeywordScores {
    pub fn true_positives(&self, theta: f64) -> usize {
        self.positives
            .iter()
            .filter(|s| s.is_some_and(|s| s >= theta))
            .count()
    }

    pub fn false_alarms(&self, theta: f64) -> usize {
        self.negatives.iter().filter(|&&s| s >= theta).count()
    }

    pub fn frr(&self, theta: f64) -> f64 {
        1.0 - self.true_positives(theta) as f64 / self.positives.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub keywords: Vec<KeywordScores>,
    pub negative_hours: f64,
}

/// Collects per-keyword score lists from a detection log.
pub fn evaluate(
    log: &DetectionLog,
    positives: &[PositiveRef],
    negative_streams: &[String],
    keywords: &[Keyword],
    negative_hours: f64,
    rule: ScoreRule,
    options: EvalOptions,
) -> Result<ScoreTable> {
    if !(negative_hours > 0.0) {
        return Err(KwsError::Config(
            "negative duration must be positive".into(),
        ));
    }
    let mut table: Vec<KeywordScores> = keywords
        .iter()
        .map(|k| KeywordScores {
            keyword: k.text.clone(),
            n_words: k.n_words,
            positives: Vec::new(),
            negatives: Vec::new(),
        })
        .collect();
    let empty = Vec::new();
    for p in positives {
        let entry = table.get_mut(p.keyword).ok_or_else(|| {
            KwsError::Manifest(format!("`{}`: keyword index out of range", p.stream))
        })?;
        if options.require_overlap && p.truth.is_none() {
            return Err(KwsError::Manifest(format!(
                "`{}` has no keyword location",
                p.stream
            )));
        }
        let best = log
            .get(&p.stream)
            .unwrap_or(&empty)
            .iter()
            .filter(|d| d.candidate.keyword == p.keyword)
            .filter(|d| {
                !options.require_overlap
                    || p.truth.is_some_and(|(s, e)| {
                        d.candidate.segment.start < e && d.candidate.segment.end >= s
                    })
            })
            .filter_map(|d| rule.score(d))
            .fold(None, |acc: Option<f64>, s| {
                Some(acc.map_or(s, |a| a.max(s)))
            });
        entry.positives.push(best);
    }
    for s in negative_streams {
        for d in log.get(s).unwrap_or(&empty) {
            if let (Some(score), Some(entry)) = (rule.score(d), table.get_mut(d.candidate.keyword))
            {
                entry.negatives.push(score);
            }
        }
    }
    if let Some(k) = table.iter().find(|k| k.positives.is_empty()) {
        return Err(KwsError::NoPositives(k.keyword.clone()));
    }
    Ok(ScoreTable {
        keywords: table,
        negative_hours,
    })
}

/// Score lists for a split run.
pub fn evaluate_split(
    log: &DetectionLog,
    split: &EvalSplit,
    keywords: &[Keyword],
    rule: ScoreRule,
    options: EvalOptions,
) -> Result<ScoreTable> {
    let positives: Vec<PositiveRef> = split.positives.iter().filter_map(PositiveRef::of).collect();
    let negatives: Vec<String> = split.negatives.iter().map(|u| u.id.clone()).collect();
    evaluate(
        log,
        &positives,
        &negatives,
        keywords,
        split.negative_hours(),
        rule,
        options,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fa_per_hour: f64,
    pub frr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub grid: Vec<f64>,
    /// Raw sweep per keyword, from strictest to most lenient threshold.
    pub sweeps: Vec<(String, Vec<RocPoint>)>,
    /// FRR of each keyword at each grid point.
    pub interpolated: Vec<Vec<f64>>,
    /// Mean FRR across keywords at each grid point.
    pub overall: Vec<f64>,
}

/// Threshold sweep of one keyword over the union of its observed scores.
/// The first point (`+∞`) rejects everything.
pub fn sweep(k: &KeywordScores, hours: f64) -> Vec<RocPoint> {
    let mut thetas: Vec<f64> = k
        .positives
        .iter()
        .flatten()
        .copied()
        .chain(k.negatives.iter().copied())
        .collect();
    thetas.sort_by(|a, b| b.total_cmp(a));
    thetas.dedup();
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        fa_per_hour: 0.0,
        frr: 1.0,
    }];
    for t in thetas {
        out.push(RocPoint {
            threshold: t,
            fa_per_hour: k.false_alarms(t) as f64 / hours,
            frr: k.frr(t),
        });
    }
    out
}

/// Lowest FRR among sweep points whose false-alarm rate is within `fa`.
pub fn frr_at(points: &[RocPoint], fa: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fa_per_hour <= fa)
        .map(|p| p.frr)
        .fold(1.0, f64::min)
}

pub fn roc(table: &ScoreTable, grid: &[f64]) -> Result<RocCurve> {
    if table.keywords.is_empty() {
        return Err(KwsError::NoKeywords);
    }
    let sweeps: Vec<(String, Vec<RocPoint>)> = table
        .keywords
        .iter()
        .map(|k| (k.keyword.clone(), sweep(k, table.negative_hours)))
        .collect();
    let interpolated: Vec<Vec<f64>> = sweeps
        .iter()
        .map(|(_, pts)| grid.iter().map(|&g| frr_at(pts, g)).collect())
        .collect();
    let n = interpolated.len() as f64;
    let overall = (0..grid.len())
        .map(|i| interpolated.iter().map(|row| row[i]).sum::<f64>() / n)
        .collect();
    Ok(RocCurve {
        grid: grid.to_vec(),
        sweeps,
        interpolated,
        overall,
    })
}

impl RocCurve {
    /// Overall FRR at the grid point closest to `fa`.
    pub fn frr_near(&self, fa: f64) -> Option<(f64, f64)> {
        self.grid
            .iter()
            .zip(&self.overall)
            .min_by(|a, b| (a.0 - fa).abs().total_cmp(&(b.0 - fa).abs()))
            .map(|(&g, &f)| (g, f))
    }

    /// Rows `keyword, fa_per_hour, frr`; the averaged curve uses `overall`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["keyword", "fa_per_hour", "frr"])?;
        for ((name, _), row) in self.sweeps.iter().zip(&self.interpolated) {
            for (g, f) in self.grid.iter().zip(row) {
                w.write_record([name.as_str(), &g.to_string(), &f.to_string()])?;
            }
        }
        for (g, f) in self.grid.iter().zip(&self.overall) {
            w.write_record(["overall", &g.to_string(), &f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub f1: f64,
}

pub fn f1_score(tp: usize, fn_: usize, fp: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub fn keyword_f1(k: &KeywordScores, theta: f64) -> F1Counts {
    let tp = k.true_positives(theta);
    let fn_ = k.positives.len() - tp;
    let fp = k.false_alarms(theta);
    F1Counts {
        tp,
        fn_,
        fp,
        f1: f1_score(tp, fn_, fp),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub threshold: f64,
    pub per_keyword: Vec<(String, F1Counts)>,
    pub macro_f1: f64,
    /// Macro-F1 per keyword length in words.
    pub by_length: Vec<(usize, f64, usize)>,
}

pub fn f1(table: &ScoreTable, theta: f64) -> Result<F1Report> {
    if !theta.is_finite() {
        return Err(KwsError::Config("F1 threshold must be finite".into()));
    }
    let per_keyword: Vec<(String, F1Counts)> = table
        .keywords
        .iter()
        .map(|k| (k.keyword.clone(), keyword_f1(k, theta)))
        .collect();
    let macro_f1 =
        per_keyword.iter().map(|(_, c)| c.f1).sum::<f64>() / per_keyword.len().max(1) as f64;
    let mut groups: Vec<(usize, f64, usize)> = Vec::new();
    for (k, (_, c)) in table.keywords.iter().zip(&per_keyword) {
        match groups.iter_mut().find(|g| g.0 == k.n_words) {
            Some(g) => {
                g.1 += c.f1;
                g.2 += 1;
            }
            None => groups.push((k.n_words, c.f1, 1)),
        }
    }
    groups.sort_by_key(|g| g.0);
    for g in &mut groups {
        g.1 /= g.2 as f64;
    }
    Ok(F1Report {
        threshold: theta,
        per_keyword,
        macro_f1,
        by_length: groups,
    })
}

impl F1Report {
    /// Rows `system, group, macro_f1, keywords`; group `all` first.
    pub fn write_csv<W: Write>(&self, system: &str, out: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        if header {
            w.write_record(["system", "group", "macro_f1", "keywords"])?;
        }
        w.write_record([
            system,
            "all",
            &self.macro_f1.to_string(),
            &self.per_keyword.len().to_string(),
        ])?;
        for (len, f, n) in &self.by_length {
            w.write_record([
                system,
                &format!("{len}_words"),
                &f.to_string(),
                &n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Threshold maximizing macro-F1 over every observed score; ties go to the
/// strictest threshold.
pub fn select_threshold(table: &ScoreTable) -> (f64, f64) {
    let mut thetas: Vec<f64> = table
        .keywords
        .iter()
        .flat_map(|k| {
            k.positives
                .iter()
                .flatten()
                .copied()
                .chain(k.negatives.iter().copied())
        })
        .collect();
    thetas.sort_by(|a, b| b.total_cmp(a));
    thetas.dedup();
    let mut best = (f64::MAX, 0.0);
    for t in thetas {
        let n = table.keywords.len().max(1) as f64;
        let m = table
            .keywords
            .iter()
            .map(|k| keyword_f1(k, t).f1)
            .sum::<f64>()
            / n;
        if m > best.1 {
            best = (t, m);
        }
    }
    best
}

/// Joint thresholds of a two-pass system: for each first-stage candidate
/// (the best single-stage threshold and quantiles of the positives' best
/// first-stage scores) the best second-stage threshold. Returns
/// `(θ1, θ2, macro-F1)`.
pub fn select_joint_thresholds(
    log: &DetectionLog,
    split: &EvalSplit,
    keywords: &[Keyword],
    options: EvalOptions,
    grid_size: usize,
) -> Result<(f64, f64, f64)> {
    let stage1 = evaluate_split(log, split, keywords, ScoreRule::Stage1, options)?;
    let mut s1: Vec<f64> = stage1
        .keywords
        .iter()
        .flat_map(|k| k.positives.iter().flatten().copied())
        .collect();
    s1.sort_by(f64::total_cmp);
    let mut grid = vec![f64::MIN, select_threshold(&stage1).0];
    if !s1.is_empty() {
        for i in 0..grid_size {
            grid.push(s1[i * (s1.len() - 1) / grid_size.max(1)]);
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut best = (f64::MIN, f64::MAX, 0.0);
    for t1 in grid {
        let table = evaluate_split(
            log,
            split,
            keywords,
            ScoreRule::Stage2 {
                stage1_threshold: t1,
            },
            options,
        )?;
        let (t2, m) = select_threshold(&table);
        if m > best.2 {
            best = (t1, t2, m);
        }
    }
    Ok(best)
}
