//! Two-pass streaming detector. Each incoming chunk advances the shared
//! streaming encoder; per keyword the biased CTC posteriorgram is searched
//! for the keyword path, nearby path hits are merged into one event, and
//! events above the first threshold are clipped and rescored by the decoder.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use u2kws_nn::{ChunkSpec, ConvSubsample, Float, ParamStore, Tensor};

use crate::ctc::{estimate_segment, keyword_viterbi, min_frames, Segment};
use crate::error::{KwsError, Result};
use crate::keywords::Keyword;
use crate::model::{EncoderStream, KwsModel, SUBSAMPLING};
use crate::par::{self, Parallelism};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    /// First stage only; every candidate is accepted.
    Off,
    /// Rescore against the stored streaming encoder rows.
    #[default]
    Causal,
    /// Re-encode buffered features with unrestricted attention, then rescore.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    /// Minimum per-frame path log-probability for a candidate.
    pub stage1_threshold: f64,
    /// Minimum per-token decoder log-probability for acceptance.
    pub stage2_threshold: f64,
    pub decoder_mode: DecoderMode,
    /// Encoder frames per streaming chunk.
    pub chunk_size: usize,
    pub spike_threshold: f64,
    /// Encoder frames searched for the keyword path.
    pub window: usize,
    /// Path hits ending within this many frames of each other are one event.
    pub refractory: usize,
    /// Frames added on each side of the clipped segment.
    pub padding: usize,
    /// Frames before the path start included in the segment search.
    pub segment_margin: usize,
    pub parallelism: Parallelism,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stage1_threshold: -1.0,
            stage2_threshold: -1.0,
            decoder_mode: DecoderMode::Causal,
            chunk_size: 8,
            spike_threshold: 0.5,
            window: 100,
            refractory: 25,
            padding: 2,
            segment_margin: 4,
            parallelism: Parallelism::Parallel,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KwsError::Config(m.to_string()));
        if !self.stage1_threshold.is_finite() || !self.stage2_threshold.is_finite() {
            return bad("cascade thresholds must be finite");
        }
        if self.chunk_size == 0 || self.window == 0 {
            return bad("chunk_size and window must be at least 1");
        }
        if !(self.spike_threshold > 0.0 && self.spike_threshold < 1.0) {
            return bad("spike_threshold must lie in (0, 1)");
        }
        Ok(())
    }

    /// Encoder frames kept in every buffer.
    pub fn capacity(&self) -> usize {
        self.window + self.refractory + 2 * self.chunk_size + self.segment_margin + self.padding
    }

    /// The lowest finite thresholds: every event becomes a candidate and every
    /// candidate is accepted. Used to record complete score logs.
    pub fn permissive(mut self) -> Self {
        self.stage1_threshold = f64::MIN;
        self.stage2_threshold = f64::MIN;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub keyword: usize,
    pub keyword_text: String,
    pub segment: Segment,
    /// Frames occupied by the best first-stage path.
    pub path: Segment,
    pub stage1: f64,
    /// Encoder frames processed when the candidate was emitted.
    pub trigger_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub candidate: Candidate,
    pub stage2: Option<f64>,
    pub accept: bool,
    /// `trigger_frame − segment.end`.
    pub latency: usize,
    pub mode: DecoderMode,
}

#[derive(Clone, Debug)]
struct RowBuffer<F> {
    start: usize,
    rows: Tensor<F>,
}

impl<F: Float> RowBuffer<F> {
    fn new(cols: usize) -> Self {
        RowBuffer {
            start: 0,
            rows: Tensor::zeros(0, cols),
        }
    }

    fn end(&self) -> usize {
        self.start + self.rows.rows()
    }

    fn push(&mut self, t: &Tensor<F>) {
        if t.rows() > 0 {
            self.rows = Tensor::concat_rows(&[&self.rows, t]);
        }
    }

    fn evict_before(&mut self, frame: usize) {
        if frame > self.start {
            let drop = (frame - self.start).min(self.rows.rows());
            self.rows = self.rows.slice_rows(drop, self.rows.rows() - drop);
            self.start += drop;
        }
    }

    fn slice(&self, range: Range<usize>) -> Result<Tensor<F>> {
        if range.start < self.start || range.end > self.end() {
            return Err(KwsError::Evicted {
                start: range.start,
                end: range.end.saturating_sub(1),
                oldest: self.start,
            });
        }
        Ok(self.rows.slice_rows(range.start - self.start, range.len()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct PathHit {
    score: f64,
    start: usize,
    end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Event {
    best: PathHit,
    max_end: usize,
}

#[derive(Clone, Debug)]
struct Track<F> {
    keyword: Keyword,
    tokens: Vec<usize>,
    embedding: Option<Tensor<F>>,
    biased: RowBuffer<F>,
    logp: RowBuffer<F>,
    open: Option<Event>,
    /// Hits ending at or before this frame belong to an already closed event.
    barrier: Option<usize>,
}

/// Per-stream state. Model parameters are borrowed read-only, so many
/// streams can run side by side.
pub struct StreamState<'m, F: Float> {
    model: &'m KwsModel,
    store: &'m ParamStore<F>,
    config: CascadeConfig,
    encoder: EncoderStream<F>,
    features: RowBuffer<F>,
    tracks: Vec<Track<F>>,
    full_cache: Option<(usize, Tensor<F>)>,
    now: usize,
    closed: bool,
}

/// Caches keyword embeddings and allocates empty buffers.
pub fn init_stream<'m, F: Float>(
    model: &'m KwsModel,
    store: &'m ParamStore<F>,
    keywords: &[Keyword],
    config: &CascadeConfig,
) -> Result<StreamState<'m, F>> {
    StreamState::new(model, store, keywords, config)
}

impl<'m, F: Float> StreamState<'m, F> {
    pub fn new(
        model: &'m KwsModel,
        store: &'m ParamStore<F>,
        keywords: &[Keyword],
        config: &CascadeConfig,
    ) -> Result<Self> {
        config.validate()?;
        if keywords.is_empty() {
            return Err(KwsError::NoKeywords);
        }
        if config.decoder_mode != DecoderMode::Off && !model.has_decoder() {
            return Err(KwsError::MissingModule("decoder"));
        }
        let vocab = model.vocab();
        let dim = model.config.dim;
        let tracks = keywords
            .iter()
            .map(|kw| -> Result<Track<F>> {
                if let Some(&id) = kw.encoder_input.iter().find(|&&t| t >= vocab.size()) {
                    return Err(KwsError::PhoneIdOutOfRange {
                        id,
                        size: vocab.size(),
                    });
                }
                let (tokens, embedding) = if model.has_bias() {
                    (
                        kw.encoder_input.clone(),
                        Some(model.keyword_embedding(store, &kw.encoder_input)?),
                    )
                } else {
                    (kw.phones.clone(), None)
                };
                Ok(Track {
                    keyword: kw.clone(),
                    tokens,
                    embedding,
                    biased: RowBuffer::new(dim),
                    logp: RowBuffer::new(vocab.size()),
                    open: None,
                    barrier: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ChunkSpec {
            chunk: Some(config.chunk_size),
            left_chunks: model.config.left_chunks,
        };
        Ok(StreamState {
            model,
            store,
            config: config.clone(),
            encoder: model.new_stream(spec),
            features: RowBuffer::new(model.config.feat_dim),
            tracks,
            full_cache: None,
            now: 0,
            closed: false,
        })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    /// Encoder frames emitted so far.
    pub fn frames(&self) -> usize {
        self.now
    }

    pub fn num_keywords(&self) -> usize {
        self.tracks.len()
    }

    /// Keyword embedding rows, if the model has a bias module.
    pub fn keyword_embedding(&self, keyword: usize) -> Option<&Tensor<F>> {
        self.tracks.get(keyword).and_then(|t| t.embedding.as_ref())
    }

    /// Buffered log-posteriors of one keyword's stream and the frame of the
    /// first buffered row.
    pub fn posteriorgram(&self, keyword: usize) -> Option<(usize, &Tensor<F>)> {
        self.tracks
            .get(keyword)
            .map(|t| (t.logp.start, &t.logp.rows))
    }

    /// Feeds feature frames (nominally `4 × chunk_size`) and returns the
    /// detections completed by them.
    pub fn process_chunk(&mut self, feats: &Tensor<F>) -> Result<Vec<Detection>> {
        self.advance(feats, false)
    }

    /// Flushes the encoder, closes every open event and ends the stream.
    pub fn finish(&mut self) -> Result<Vec<Detection>> {
        let out = self.advance(&Tensor::zeros(0, self.model.config.feat_dim), true)?;
        self.closed = true;
        Ok(out)
    }

    fn advance(&mut self, feats: &Tensor<F>, flush: bool) -> Result<Vec<Detection>> {
        if self.closed {
            return Err(KwsError::StreamClosed);
        }
        let h = self
            .model
            .encode_chunk(self.store, &mut self.encoder, feats, flush)?;
        self.features.push(feats);
        self.now += h.rows();
        let keep = self.now.saturating_sub(self.config.capacity());
        self.features.evict_before(keep * SUBSAMPLING);

        let shared = if self.model.has_bias() || h.rows() == 0 {
            None
        } else {
            Some(self.model.posteriors(self.store, &h, None)?)
        };
        let (model, store) = (self.model, self.store);
        let config = self.config.clone();
        let now = self.now;
        let eok = model.vocab().eok();
        let per_track = par::map_mut(config.parallelism, &mut self.tracks, |i, track| {
            track.advance(
                model,
                store,
                &config,
                &h,
                shared.as_ref(),
                keep,
                flush,
                eok,
                i,
            )
        });
        let mut candidates = Vec::new();
        for r in per_track {
            candidates.extend(r?);
        }
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        debug_assert!(candidates.iter().all(|c| c.trigger_frame == now));
        if config.decoder_mode == DecoderMode::Full {
            self.ensure_full_encoding()?;
        }
        let full = self.full_cache.as_ref().map(|(_, t)| t);
        let this = &*self;
        let results = par::map(config.parallelism, &candidates, |c| {
            this.verify_with(c, config.decoder_mode, full)
        });
        let mut out = Vec::with_capacity(results.len());
        for (c, r) in candidates.iter().zip(results) {
            match r {
                Ok(d) => out.push(d),
                Err(e @ KwsError::Evicted { .. }) => {
                    log::warn!("dropping candidate for `{}`: {e}", c.keyword_text);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Full-context encoder rows for the buffered features, starting at
    /// encoder frame `features.start / 4`.
    fn ensure_full_encoding(&mut self) -> Result<()> {
        if self
            .full_cache
            .as_ref()
            .is_some_and(|(at, _)| *at == self.now)
        {
            return Ok(());
        }
        let enc = self
            .model
            .encode_features(self.store, &self.features.rows, ChunkSpec::full())?;
        self.full_cache = Some((self.now, enc.h));
        Ok(())
    }

    /// Scores a candidate with the decoder in the given mode.
    pub fn verify(&mut self, candidate: &Candidate, mode: DecoderMode) -> Result<Detection> {
        if mode == DecoderMode::Full {
            self.ensure_full_encoding()?;
        }
        let full = self.full_cache.as_ref().map(|(_, t)| t);
        self.verify_with(candidate, mode, full)
    }

    fn verify_with(
        &self,
        c: &Candidate,
        mode: DecoderMode,
        full: Option<&Tensor<F>>,
    ) -> Result<Detection> {
        let track = &self.tracks[c.keyword];
        let seg = c.segment;
        let rows = seg.start..seg.end + 1;
        let stage2 = match mode {
            DecoderMode::Off => None,
            DecoderMode::Causal => {
                let h = track.biased.slice(rows)?;
                Some(
                    self.model
                        .decoder_score(self.store, &h, &track.keyword.phones)?,
                )
            }
            DecoderMode::Full => {
                let full = full.ok_or(KwsError::MissingModule("full-context encoding"))?;
                let base = self.features.start / SUBSAMPLING;
                let avail = base + full.rows();
                if seg.start < base || seg.end >= avail {
                    return Err(KwsError::Evicted {
                        start: seg.start,
                        end: seg.end,
                        oldest: base,
                    });
                }
                let h_a = full.slice_rows(seg.start - base, seg.len());
                let h = match &track.embedding {
                    Some(k) => self.model.posteriors(self.store, &h_a, Some(k))?.0,
                    None => h_a,
                };
                Some(
                    self.model
                        .decoder_score(self.store, &h, &track.keyword.phones)?,
                )
            }
        };
        let accept = stage2.is_none_or(|s| s >= self.config.stage2_threshold);
        Ok(Detection {
            candidate: c.clone(),
            stage2,
            accept,
            latency: c.trigger_frame.saturating_sub(seg.end),
            mode,
        })
    }
}

impl<F: Float> Track<F> {
    #[allow(clippy::too_many_arguments)]
    fn advance(
        &mut self,
        model: &KwsModel,
        store: &ParamStore<F>,
        config: &CascadeConfig,
        h: &Tensor<F>,
        shared: Option<&(Tensor<F>, Tensor<F>)>,
        keep: usize,
        flush: bool,
        eok: usize,
        index: usize,
    ) -> Result<Vec<Candidate>> {
        if h.rows() > 0 {
            let (biased, logp) = match shared {
                Some((b, l)) => (b.clone(), l.clone()),
                None => model.posteriors(store, h, self.embedding.as_ref())?,
            };
            self.biased.push(&biased);
            self.logp.push(&logp);
        }
        self.biased.evict_before(keep);
        self.logp.evict_before(keep);
        let now = self.logp.end();
        let mut closed = Vec::new();
        if h.rows() > 0 {
            let window = now.saturating_sub(config.window).max(self.logp.start)..now;
            if window.len() >= min_frames(&self.tokens) {
                let local = window.start - self.logp.start..window.end - self.logp.start;
                let path = keyword_viterbi(&self.logp.rows, &self.tokens, local)?;
                let hit = PathHit {
                    score: path.score,
                    start: path.start + self.logp.start,
                    end: path.end + self.logp.start,
                };
                self.observe(hit, config.refractory, &mut closed);
            }
        }
        if let Some(ev) = self.open {
            let timed_out = now > ev.max_end + config.refractory + 1;
            let too_old = ev.best.start + config.window < now;
            if flush || timed_out || too_old {
                self.close(config.refractory, &mut closed);
            }
        }
        let mut out = Vec::new();
        for ev in closed
            .into_iter()
            .filter(|ev| ev.best.score >= config.stage1_threshold)
        {
            match self.candidate(ev, config, eok, index, now) {
                Ok(c) => out.push(c),
                Err(e @ KwsError::Evicted { .. }) => {
                    log::warn!("dropping candidate for `{}`: {e}", self.keyword.text);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn observe(&mut self, hit: PathHit, refractory: usize, closed: &mut Vec<Event>) {
        if self.barrier.is_some_and(|b| hit.end <= b) {
            return;
        }
        match &mut self.open {
            Some(ev) if hit.end <= ev.max_end + refractory => {
                ev.max_end = ev.max_end.max(hit.end);
                if hit.score > ev.best.score {
                    ev.best = hit;
                }
            }
            Some(_) => {
                self.close(refractory, closed);
                self.open = Some(Event {
                    best: hit,
                    max_end: hit.end,
                });
            }
            None => {
                self.open = Some(Event {
                    best: hit,
                    max_end: hit.end,
                })
            }
        }
    }

    fn close(&mut self, refractory: usize, closed: &mut Vec<Event>) {
        if let Some(ev) = self.open.take() {
            self.barrier = Some(ev.max_end + refractory);
            closed.push(ev);
        }
    }

    fn candidate(
        &self,
        ev: Event,
        config: &CascadeConfig,
        eok: usize,
        index: usize,
        now: usize,
    ) -> Result<Candidate> {
        let path = Segment {
            start: ev.best.start,
            end: ev.best.end,
        };
        if path.start < self.logp.start {
            return Err(KwsError::Evicted {
                start: path.start,
                end: path.end,
                oldest: self.logp.start,
            });
        }
        let segment = if config.decoder_mode == DecoderMode::Off {
            path
        } else {
            let lo = path
                .start
                .saturating_sub(config.segment_margin)
                .max(self.logp.start);
            let hi = (path.end + 1).min(now);
            let local = lo - self.logp.start..hi - self.logp.start;
            let seg = estimate_segment(
                &self.logp.rows,
                eok,
                self.keyword.phones.len(),
                config.spike_threshold,
                local,
            )?;
            Segment {
                start: seg.start + self.logp.start,
                end: seg.end + self.logp.start,
            }
            .padded(config.padding, self.logp.start..now)
        };
        Ok(Candidate {
            keyword: index,
            keyword_text: self.keyword.text.clone(),
            segment,
            path,
            stage1: ev.best.score,
            trigger_frame: now,
        })
    }
}

/// Runs a whole feature matrix through a fresh stream in chunks of
/// `4 × chunk_size` feature frames.
pub fn run_stream<F: Float>(
    model: &KwsModel,
    store: &ParamStore<F>,
    keywords: &[Keyword],
    config: &CascadeConfig,
    feats: &Tensor<F>,
) -> Result<Vec<Detection>> {
    let mut state = StreamState::new(model, store, keywords, config)?;
    let step = config.chunk_size * SUBSAMPLING;
    let mut out = Vec::new();
    let mut at = 0;
    while at < feats.rows() {
        let n = step.min(feats.rows() - at);
        out.extend(state.process_chunk(&feats.slice_rows(at, n))?);
        at += n;
    }
    out.extend(state.finish()?);
    Ok(out)
}

/// Smallest stream (feature frames) the encoder accepts.
pub fn min_stream_frames() -> usize {
    ConvSubsample::MIN_FRAMES
}

#[derive(Serialize)]
struct DetectionLine<'a> {
    stream: &'a str,
    #[serde(flatten)]
    detection: &'a Detection,
}

/// One JSON object per detection, tagged with the stream id.
pub fn write_detections_jsonl<W: Write>(
    stream: &str,
    detections: &[Detection],
    mut out: W,
) -> Result<()> {
    for d in detections {
        serde_json::to_writer(
            &mut out,
            &DetectionLine {
                stream,
                detection: d,
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub stream: String,
    #[serde(flatten)]
    pub detection: Detection,
}

pub fn read_detections_jsonl(text: &str) -> Result<Vec<DetectionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(KwsError::from))
        .collect()
}
