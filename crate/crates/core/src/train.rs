//! Two-stage training. Stage one fits the encoder, keyword encoder, bias
//! module and CTC head on sampled keywords; stage two adds the decoder on
//! clipped encoder output under the weighted joint loss.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use u2kws_nn::{ChunkSpec, Float, Gradients, Graph, ParamStore, Tensor, Var};

use crate::corpus::Utterance;
use crate::ctc::{ctc_loss, estimate_segment, keyword_viterbi, min_frames};
use crate::error::{KwsError, Result};
use crate::frontend::{spec_augment, SpecAugmentConfig};
use crate::keywords::{
    sample_keyword, sample_rng, KeywordSample, Lexicon, Polarity, SamplerConfig,
};
use crate::model::KwsModel;
use crate::par::{self, Parallelism};

/// Attention chunk distribution for dynamic chunk training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkDistribution {
    /// Probability of unrestricted attention.
    pub p_full: f64,
    /// Otherwise the chunk is uniform in `1..=max_chunk`.
    pub max_chunk: usize,
}

impl Default for ChunkDistribution {
    fn default() -> Self {
        ChunkDistribution {
            p_full: 0.5,
            max_chunk: 16,
        }
    }
}

/// `None` means full attention.
pub fn dynamic_chunk_draw(
    rng: &mut impl Rng,
    frames: usize,
    dist: &ChunkDistribution,
) -> Option<usize> {
    debug_assert!(frames >= 1);
    if rng.random_bool(dist.p_full.clamp(0.0, 1.0)) {
        None
    } else {
        Some(rng.random_range(1..=dist.max_chunk.max(1)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// CTC weight in the joint loss.
    pub lambda: f64,
    pub lr: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Stop a stage after this many updates.
    pub max_steps: Option<usize>,
    pub chunks: ChunkDistribution,
    pub seed: u64,
    /// Share of positive keyword samples in each batch.
    pub positive_ratio: f64,
    pub spec_augment: SpecAugmentConfig,
    pub grad_clip: f64,
    pub spike_threshold: f64,
    /// Frames added on each side of a clipped positive segment.
    pub clip_padding: usize,
    /// Clip negatives too, around the keyword's best path as detection does,
    /// instead of attending to the whole utterance.
    pub clip_negatives: bool,
    /// Frames before a negative's best path included in its segment search.
    pub clip_margin: usize,
    /// Draw new keywords every epoch rather than fixing one per utterance.
    pub resample_each_epoch: bool,
    pub sampler: SamplerConfig,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.3,
            lr: 1e-3,
            warmup: 200,
            batch_size: 16,
            stage1_epochs: 10,
            stage2_epochs: 5,
            max_steps: None,
            chunks: ChunkDistribution::default(),
            seed: 0,
            positive_ratio: 0.5,
            spec_augment: SpecAugmentConfig::default(),
            grad_clip: 5.0,
            spike_threshold: 0.5,
            clip_padding: 2,
            clip_negatives: true,
            clip_margin: 4,
            resample_each_epoch: true,
            sampler: SamplerConfig::default(),
            parallelism: Parallelism::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KwsError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.positive_ratio > 0.0 && self.positive_ratio < 1.0) {
            return bad("positive_ratio must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.warmup == 0 {
            return bad("batch_size and warmup must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr and grad_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.chunks.p_full) || self.chunks.max_chunk == 0 {
            return bad("invalid chunk distribution");
        }
        Ok(())
    }

    /// Inverse-square-root schedule with linear warmup; `step` starts at 1.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }
}

/// Adam with decoupled per-parameter moments.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Adam<F> {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update; frozen parameters and missing gradients are skipped.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one, eps) = (F::one(), self.eps);
        for (id, g) in grads.iter() {
            if store.get(id).frozen {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let p = store.value_mut(id);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mh = mi.as_f64() / c1;
                let vh = vi.as_f64() / c2;
                *pi -= F::of(lr * mh / (vh.sqrt() + eps));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// One logged update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub stage: u8,
    pub l_ctc: f64,
    pub l_att: f64,
    pub total: f64,
    /// Attention chunk used for the batch; 0 means full.
    pub chunk: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        w.write_record([
            "step", "epoch", "stage", "l_ctc", "l_att", "total", "chunk", "lr",
        ])?;
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean total loss over the rows of one epoch.
    pub fn epoch_mean(&self, stage: u8, epoch: usize) -> Option<f64> {
        let rows: Vec<f64> = self
            .log
            .iter()
            .filter(|r| r.stage == stage && r.epoch == epoch)
            .map(|r| r.total)
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }
}

/// Per-sample loss terms (already combined into `total`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLoss {
    pub l_ctc: f64,
    pub l_att: f64,
    pub total: f64,
}

/// Inputs of one training sample after sampling and augmentation.
#[derive(Clone, Debug)]
pub struct PreparedSample<F> {
    pub feats: Tensor<F>,
    /// `None` for models without a bias module: the target is the transcript.
    pub keyword: Option<KeywordSample>,
    pub transcript_phones: Vec<usize>,
}

impl<F: Float> PreparedSample<F> {
    pub fn ctc_target(&self) -> &[usize] {
        match &self.keyword {
            Some(k) => &k.ctc_target,
            None => &self.transcript_phones,
        }
    }
}

/// Samples a keyword (when the model is biased) and augments the features.
pub fn prepare_sample<F: Float>(
    model: &KwsModel,
    utt: &Utterance,
    polarity: Polarity,
    lexicon: &Lexicon,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<PreparedSample<F>> {
    let transcript_phones = lexicon.phonemize_words(&utt.words)?;
    let keyword = if model.has_bias() {
        Some(sample_keyword(
            &utt.words,
            polarity,
            lexicon,
            &config.sampler,
            rng,
        )?)
    } else {
        None
    };
    let feats = spec_augment(&utt.feats, &config.spec_augment, rng).cast();
    Ok(PreparedSample {
        feats,
        keyword,
        transcript_phones,
    })
}

/// Builds the loss graph of one sample and returns the scalar total plus its
/// parts. With `stage == One` the attention term is zero and `total` is the
/// CTC loss alone.
pub fn sample_loss<F: Float>(
    model: &KwsModel,
    g: &mut Graph<'_, F>,
    sample: &PreparedSample<F>,
    spec: ChunkSpec,
    stage: Stage,
    config: &TrainConfig,
) -> Result<(Var, SampleLoss)> {
    let x = g.constant(sample.feats.clone());
    let h_a = model.encode(g, x, spec)?;
    let h_k = match &sample.keyword {
        Some(k) => Some(model.encode_keyword(g, &k.keyword.encoder_input)?),
        None => None,
    };
    let h = match h_k {
        Some(k) => model.bias(g, h_a, k)?,
        None => h_a,
    };
    let logp = model.ctc_head(g, h);
    let l_ctc = ctc_loss(g, logp, sample.ctc_target())?;
    let l_ctc_v = g.value(l_ctc).item().as_f64();
    if stage == Stage::One {
        return Ok((
            l_ctc,
            SampleLoss {
                l_ctc: l_ctc_v,
                l_att: 0.0,
                total: l_ctc_v,
            },
        ));
    }
    let kw = sample
        .keyword
        .as_ref()
        .ok_or(KwsError::MissingModule("bias module"))?;
    let h_clip = clip_for_decoder(model, g, h, logp, kw, config)?;
    let dec = model.decoder_forward(g, h_clip, &kw.decoder_input)?;
    let picks: Vec<(usize, usize)> = kw.decoder_target.iter().copied().enumerate().collect();
    let nll = g.pick_sum(dec, &picks);
    let l_att = g.scale(nll, F::of(-1.0 / picks.len() as f64));
    let l_att_v = g.value(l_att).item().as_f64();
    let a = g.scale(l_ctc, F::of(config.lambda));
    let b = g.scale(l_att, F::of(1.0 - config.lambda));
    let total = g.add(a, b);
    let total_v = g.value(total).item().as_f64();
    Ok((
        total,
        SampleLoss {
            l_ctc: l_ctc_v,
            l_att: l_att_v,
            total: total_v,
        },
    ))
}

/// Encoder rows the decoder attends to during training: the padded segment
/// estimated from the detached posteriorgram. For a negative the search is
/// limited to the surroundings of the keyword's best path, or skipped when
/// `clip_negatives` is off. Gradients reach `h` only through the selected
/// rows.
pub fn clip_for_decoder<F: Float>(
    model: &KwsModel,
    g: &mut Graph<'_, F>,
    h: Var,
    logp: Var,
    keyword: &KeywordSample,
    config: &TrainConfig,
) -> Result<Var> {
    if keyword.polarity == Polarity::Negative && !config.clip_negatives {
        return Ok(h);
    }
    let frames = g.value(h).rows();
    let lp = g.value(logp);
    let tokens = &keyword.keyword.encoder_input;
    let window = if keyword.polarity == Polarity::Negative && frames >= min_frames(tokens) {
        let path = keyword_viterbi(lp, tokens, 0..frames)?;
        path.start.saturating_sub(config.clip_margin)..path.end + 1
    } else {
        0..frames
    };
    let seg = estimate_segment(
        lp,
        model.vocab().eok(),
        keyword.keyword.phones.len(),
        config.spike_threshold,
        window,
    )?
    .padded(config.clip_padding, 0..frames);
    Ok(g.slice_rows(h, seg.start, seg.len()))
}

/// Mean loss and gradients over a batch of prepared samples.
pub fn batch_gradients<F: Float>(
    model: &KwsModel,
    store: &ParamStore<F>,
    samples: &[PreparedSample<F>],
    spec: ChunkSpec,
    stage: Stage,
    config: &TrainConfig,
) -> Result<(Gradients<F>, SampleLoss)> {
    let results = par::map(
        config.parallelism,
        samples,
        |s| -> Result<(Gradients<F>, SampleLoss)> {
            let mut g = Graph::new(store);
            let (loss, parts) = sample_loss(model, &mut g, s, spec, stage, config)?;
            Ok((g.backward(loss), parts))
        },
    );
    let mut grads = Gradients::empty(store.len());
    let mut sum = SampleLoss {
        l_ctc: 0.0,
        l_att: 0.0,
        total: 0.0,
    };
    for r in results {
        let (g, parts) = r?;
        grads.merge(&g);
        sum.l_ctc += parts.l_ctc;
        sum.l_att += parts.l_att;
        sum.total += parts.total;
    }
    let n = samples.len().max(1) as f64;
    grads.scale(F::of(1.0 / n));
    Ok((
        grads,
        SampleLoss {
            l_ctc: sum.l_ctc / n,
            l_att: sum.l_att / n,
            total: sum.total / n,
        },
    ))
}

const CHUNK_STREAM: u64 = 0xc4a7_0000;
const ORDER_STREAM: u64 = 0x0bde_0000;

fn run_stage<F: Float>(
    model: &KwsModel,
    store: &mut ParamStore<F>,
    corpus: &[Utterance],
    lexicon: &Lexicon,
    config: &TrainConfig,
    stage: Stage,
    epochs: usize,
    mut on_epoch: impl FnMut(usize, &ParamStore<F>) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(KwsError::Config("training corpus is empty".into()));
    }
    if model.config.vocab_size != lexicon.vocab().size() {
        return Err(KwsError::Config(format!(
            "model vocabulary {} does not match lexicon vocabulary {}",
            model.config.vocab_size,
            lexicon.vocab().size()
        )));
    }
    let mut adam = Adam::new(store.len());
    let mut report = TrainReport::default();
    let salt = stage.number() as u64;
    let mut step = 0;
    let n_pos = ((config.batch_size as f64) * config.positive_ratio).round() as usize;
    'epochs: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            config.seed ^ ORDER_STREAM ^ (salt << 32) ^ epoch as u64,
        ));
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let sample_epoch = if config.resample_each_epoch {
                epoch as u64
            } else {
                0
            };
            let samples = par::map_range(config.parallelism, batch.len(), |j| {
                let u = batch[j];
                let mut rng = sample_rng(config.seed ^ (salt << 56), sample_epoch, u as u64);
                let polarity = if j < n_pos {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                prepare_sample::<F>(model, &corpus[u], polarity, lexicon, config, &mut rng)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut crng = sample_rng(
                config.seed ^ CHUNK_STREAM ^ (salt << 56),
                epoch as u64,
                b as u64,
            );
            let chunk = dynamic_chunk_draw(&mut crng, 1, &config.chunks);
            let spec = ChunkSpec {
                chunk,
                left_chunks: None,
            };
            let (mut grads, loss) = batch_gradients(model, store, &samples, spec, stage, config)?;
            step += 1;
            if !loss.total.is_finite() || !grads.all_finite() {
                return Err(KwsError::Diverged(step));
            }
            let norm = grads.global_norm();
            if norm > config.grad_clip {
                grads.scale(F::of(config.grad_clip / norm));
            }
            let lr = config.learning_rate(step);
            adam.update(store, &grads, lr);
            report.log.push(LogRow {
                step,
                epoch,
                stage: stage.number(),
                l_ctc: loss.l_ctc,
                l_att: loss.l_att,
                total: loss.total,
                chunk: chunk.unwrap_or(0),
                lr,
            });
            log::debug!(
                "stage {} epoch {epoch} step {step}: total {:.4} ctc {:.4} att {:.4}",
                stage.number(),
                loss.total,
                loss.l_ctc,
                loss.l_att
            );
        }
        on_epoch(epoch, store)?;
    }
    Ok(report)
}

/// Stage one: CTC on the biased encoder output. For a model without a bias
/// module the target is the plain transcript.
pub fn train_stage1<F: Float>(
    model: &KwsModel,
    store: &mut ParamStore<F>,
    corpus: &[Utterance],
    lexicon: &Lexicon,
    config: &TrainConfig,
    on_epoch: impl FnMut(usize, &ParamStore<F>) -> Result<()>,
) -> Result<TrainReport> {
    run_stage(
        model,
        store,
        corpus,
        lexicon,
        config,
        Stage::One,
        config.stage1_epochs,
        on_epoch,
    )
}

/// Stage two: joint CTC and decoder training on clipped encoder output.
pub fn train_stage2<F: Float>(
    model: &KwsModel,
    store: &mut ParamStore<F>,
    corpus: &[Utterance],
    lexicon: &Lexicon,
    config: &TrainConfig,
    on_epoch: impl FnMut(usize, &ParamStore<F>) -> Result<()>,
) -> Result<TrainReport> {
    if !model.has_bias() {
        return Err(KwsError::MissingModule("bias module"));
    }
    if !model.has_decoder() {
        return Err(KwsError::MissingModule("decoder"));
    }
    run_stage(
        model,
        store,
        corpus,
        lexicon,
        config,
        Stage::Two,
        config.stage2_epochs,
        on_epoch,
    )
}
