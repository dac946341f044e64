//! Shared conformer encoder, keyword encoder, bias module, CTC head and the
//! keyword-conditioned attention decoder.

use serde::{Deserialize, Serialize};
use u2kws_nn::{
    sinusoidal_positions, AttentionMask, BlockCache, ChunkSpec, ConformerBlock, ConformerDims,
    ConvSubsample, Embedding, FeedForward, Float, Graph, LayerNorm, Linear, Lstm,
    MultiHeadAttention, ParamStore, RelPosBias, Tensor, Var,
};

use crate::error::{KwsError, Result};
use crate::keywords::Vocab;

/// Feature frames per encoder frame.
pub const SUBSAMPLING: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub conv_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub conv_kernel: usize,
    pub max_rel_dist: usize,
    pub vocab_size: usize,
    /// Keyword encoder plus acoustic-query bias in the streaming branch.
    pub bias: bool,
    pub bias_dim: usize,
    pub bias_heads: usize,
    /// Keyword-query attention decoder.
    pub decoder: bool,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_ffn: usize,
    /// Inference chunk size in encoder frames.
    pub chunk_size: usize,
    pub left_chunks: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 80,
            conv_channels: 16,
            dim: 64,
            heads: 4,
            ffn: 256,
            layers: 4,
            conv_kernel: 7,
            max_rel_dist: 16,
            vocab_size: 23,
            bias: true,
            bias_dim: 32,
            bias_heads: 4,
            decoder: true,
            dec_layers: 2,
            dec_heads: 4,
            dec_ffn: 256,
            chunk_size: 8,
            left_chunks: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size layout: 12 conformer layers of width 128, 213 output units.
    pub fn paper_scale() -> Self {
        ModelConfig {
            dim: 128,
            ffn: 256,
            layers: 12,
            conv_kernel: 15,
            max_rel_dist: 32,
            vocab_size: 213,
            bias_dim: 128,
            dec_ffn: 512,
            ..Default::default()
        }
    }

    /// Small layout for single-core experiments on the synthetic corpus.
    pub fn desk() -> Self {
        ModelConfig {
            feat_dim: 40,
            conv_channels: 8,
            dim: 48,
            heads: 4,
            ffn: 96,
            layers: 3,
            conv_kernel: 5,
            max_rel_dist: 16,
            bias_dim: 12,
            bias_heads: 2,
            dec_layers: 1,
            dec_ffn: 96,
            ..Default::default()
        }
    }

    /// Encoder-plus-CTC model without any keyword conditioning.
    pub fn without_keyword_modules(mut self) -> Self {
        self.bias = false;
        self.decoder = false;
        self
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_phones: self.vocab_size - 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KwsError::Config(m.to_string()));
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("model dim must be divisible by heads");
        }
        if self.bias && (self.bias_heads == 0 || self.bias_dim % self.bias_heads != 0) {
            return bad("bias dim must be divisible by bias heads");
        }
        if self.decoder && (self.dec_heads == 0 || self.dim % self.dec_heads != 0) {
            return bad("model dim must be divisible by decoder heads");
        }
        if self.chunk_size == 0 || self.conv_kernel == 0 || self.layers == 0 {
            return bad("chunk size, kernel and layer count must be positive");
        }
        Ok(())
    }

    pub fn streaming_spec(&self) -> ChunkSpec {
        ChunkSpec {
            chunk: Some(self.chunk_size),
            left_chunks: self.left_chunks,
        }
    }

    fn conformer_dims(&self) -> ConformerDims {
        ConformerDims {
            dim: self.dim,
            heads: self.heads,
            ffn: self.ffn,
            kernel: self.conv_kernel,
            max_rel_dist: self.max_rel_dist,
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_att: MultiHeadAttention,
    rel: RelPosBias,
    cross_norm: LayerNorm,
    cross_att: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Decoder {
    embed: Embedding,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    out: Linear,
}

/// Parameter layout of the whole model. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct KwsModel {
    pub config: ModelConfig,
    subsample: ConvSubsample,
    blocks: Vec<ConformerBlock>,
    kw_embed: Option<Embedding>,
    kw_lstm: Option<Lstm>,
    bias_att: Option<MultiHeadAttention>,
    bias_proj: Option<Linear>,
    ctc: Linear,
    decoder: Option<Decoder>,
}

/// Encoder frames plus the subsampling factor back to feature frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<F> {
    pub h: Tensor<F>,
    pub subsampling: usize,
}

/// Per-stream encoder state: attention and convolution caches plus the feature
/// rows still needed by the subsampling front end.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStream<F> {
    caches: Vec<BlockCache<F>>,
    pending: Tensor<F>,
    pending_start: usize,
    frames_in: usize,
    frames_out: usize,
    spec: ChunkSpec,
}

impl<F: Float> EncoderStream<F> {
    pub fn frames_in(&self) -> usize {
        self.frames_in
    }

    pub fn frames_out(&self) -> usize {
        self.frames_out
    }
}

pub const ENCODER_PREFIX: &str = "encoder.";
pub const KEYWORD_ENCODER_PREFIX: &str = "kw_encoder.";
pub const BIAS_PREFIX: &str = "bias.";
pub const CTC_PREFIX: &str = "ctc.";
pub const DECODER_PREFIX: &str = "decoder.";

impl KwsModel {
    /// Registers every parameter in `store` (seeded by the store).
    pub fn build<F: Float>(config: &ModelConfig, store: &mut ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let c = config;
        let subsample = ConvSubsample::new(
            store,
            "encoder.subsample",
            c.feat_dim,
            c.conv_channels,
            c.dim,
        )?;
        let blocks = (0..c.layers)
            .map(|i| ConformerBlock::new(store, &format!("encoder.layer{i}"), c.conformer_dims()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let keyword_encoder = c.bias || c.decoder;
        let kw_embed =
            keyword_encoder.then(|| Embedding::new(store, "kw_encoder.embed", c.vocab_size, c.dim));
        let kw_lstm = keyword_encoder.then(|| Lstm::new(store, "kw_encoder.lstm", c.dim, c.dim));
        let (bias_att, bias_proj) = if c.bias {
            let att = MultiHeadAttention::new(
                store,
                "bias.att",
                c.dim,
                c.dim,
                c.bias_dim,
                c.bias_dim,
                c.bias_heads,
            )?;
            let proj = Linear::new(store, "bias.proj", c.dim + c.bias_dim, c.dim);
            (Some(att), Some(proj))
        } else {
            (None, None)
        };
        let ctc = Linear::new(store, "ctc.out", c.dim, c.vocab_size);
        let decoder = if c.decoder {
            let layers = (0..c.dec_layers)
                .map(|i| -> Result<DecoderLayer> {
                    let n = format!("decoder.layer{i}");
                    Ok(DecoderLayer {
                        self_norm: LayerNorm::new(store, &format!("{n}.self_norm"), c.dim),
                        self_att: MultiHeadAttention::new(
                            store,
                            &format!("{n}.self_att"),
                            c.dim,
                            c.dim,
                            c.dim,
                            c.dim,
                            c.dec_heads,
                        )?,
                        rel: RelPosBias::new(
                            store,
                            &format!("{n}.rel"),
                            c.dec_heads,
                            c.max_rel_dist,
                        ),
                        cross_norm: LayerNorm::new(store, &format!("{n}.cross_norm"), c.dim),
                        cross_att: MultiHeadAttention::new(
                            store,
                            &format!("{n}.cross_att"),
                            c.dim,
                            c.dim,
                            c.dim,
                            c.dim,
                            c.dec_heads,
                        )?,
                        ffn_norm: LayerNorm::new(store, &format!("{n}.ffn_norm"), c.dim),
                        ffn: FeedForward::new(store, &format!("{n}.ffn"), c.dim, c.dec_ffn),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Decoder {
                embed: Embedding::new(store, "decoder.embed", c.vocab_size, c.dim),
                layers,
                final_norm: LayerNorm::new(store, "decoder.final_norm", c.dim),
                out: Linear::new(store, "decoder.out", c.dim, c.vocab_size),
            })
        } else {
            None
        };
        Ok(KwsModel {
            config: config.clone(),
            subsample,
            blocks,
            kw_embed,
            kw_lstm,
            bias_att,
            bias_proj,
            ctc,
            decoder,
        })
    }

    /// Fresh parameters seeded from `config.seed`.
    pub fn init<F: Float>(config: &ModelConfig) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new(config.seed);
        let model = Self::build(config, &mut store)?;
        Ok((model, store))
    }

    pub fn has_bias(&self) -> bool {
        self.bias_att.is_some()
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    /// Whole-utterance encoder under the given attention chunking.
    pub fn encode<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        feats: Var,
        spec: ChunkSpec,
    ) -> Result<Var> {
        let mut h = self.subsample.forward(g, feats)?;
        let pos: Vec<usize> = (0..g.value(h).rows()).collect();
        for b in &self.blocks {
            h = b.forward(g, h, &pos, spec, None)?;
        }
        Ok(h)
    }

    pub fn encode_features<F: Float>(
        &self,
        store: &ParamStore<F>,
        feats: &Tensor<F>,
        spec: ChunkSpec,
    ) -> Result<EncoderOutput<F>> {
        let mut g = Graph::new(store);
        let x = g.constant(feats.clone());
        let h = self.encode(&mut g, x, spec)?;
        Ok(EncoderOutput {
            h: g.value(h).clone(),
            subsampling: SUBSAMPLING,
        })
    }

    pub fn new_stream<F: Float>(&self, spec: ChunkSpec) -> EncoderStream<F> {
        EncoderStream {
            caches: self
                .blocks
                .iter()
                .map(|b| BlockCache::new(&b.dims))
                .collect(),
            pending: Tensor::zeros(0, self.config.feat_dim),
            pending_start: 0,
            frames_in: 0,
            frames_out: 0,
            spec,
        }
    }

    /// Feeds feature frames to a stream and returns the encoder frames that
    /// became final. Without `flush` only whole attention chunks are emitted,
    /// so the result matches a one-shot pass under the same chunk mask.
    pub fn encode_chunk<F: Float>(
        &self,
        store: &ParamStore<F>,
        stream: &mut EncoderStream<F>,
        feats: &Tensor<F>,
        flush: bool,
    ) -> Result<Tensor<F>> {
        if feats.rows() > 0 {
            if feats.cols() != self.config.feat_dim {
                return Err(u2kws_nn::NnError::Shape(format!(
                    "features have {} bins, model expects {}",
                    feats.cols(),
                    self.config.feat_dim
                ))
                .into());
            }
            stream.pending = Tensor::concat_rows(&[&stream.pending, feats]);
            stream.frames_in += feats.rows();
        }
        let available = ConvSubsample::output_len(stream.frames_in);
        let mut ready = available - stream.frames_out;
        if !flush {
            ready = match stream.spec.chunk {
                Some(c) => ready / c * c,
                None => 0,
            };
        }
        if ready == 0 {
            return Ok(Tensor::zeros(0, self.config.dim));
        }
        let mut g = Graph::new(store);
        let x = g.constant(stream.pending.clone());
        let start = stream.frames_out;
        let mut h = self
            .subsample
            .forward_range(&mut g, x, stream.pending_start, start, ready)?;
        let pos: Vec<usize> = (start..start + ready).collect();
        for (b, cache) in self.blocks.iter().zip(stream.caches.iter_mut()) {
            h = b.forward(&mut g, h, &pos, stream.spec, Some(cache))?;
        }
        let out = g.value(h).clone();
        stream.frames_out += ready;
        let keep_from = (SUBSAMPLING * stream.frames_out).saturating_sub(ConvSubsample::CONTEXT);
        if keep_from > stream.pending_start {
            let drop = (keep_from - stream.pending_start).min(stream.pending.rows());
            stream.pending = stream
                .pending
                .slice_rows(drop, stream.pending.rows() - drop);
            stream.pending_start += drop;
        }
        Ok(out)
    }

    /// `h_k`: LSTM states over the embedded keyword tokens (`L×dim`).
    pub fn encode_keyword<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        encoder_input: &[usize],
    ) -> Result<Var> {
        let (Some(embed), Some(lstm)) = (&self.kw_embed, &self.kw_lstm) else {
            return Err(KwsError::MissingModule("keyword encoder"));
        };
        if encoder_input.is_empty() {
            return Err(KwsError::EmptyKeyword);
        }
        let e = embed.forward(g, encoder_input)?;
        Ok(lstm.forward_seq(g, e)?)
    }

    pub fn keyword_embedding<F: Float>(
        &self,
        store: &ParamStore<F>,
        encoder_input: &[usize],
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new(store);
        let h = self.encode_keyword(&mut g, encoder_input)?;
        Ok(g.value(h).clone())
    }

    /// Acoustic-query attention over the keyword states, concatenated with
    /// `h_a` and projected back to the model width. Each output row depends
    /// only on the same row of `h_a`.
    pub fn bias<F: Float>(&self, g: &mut Graph<'_, F>, h_a: Var, h_k: Var) -> Result<Var> {
        let (Some(att), Some(proj)) = (&self.bias_att, &self.bias_proj) else {
            return Err(KwsError::MissingModule("bias module"));
        };
        let attended = att.forward(g, h_a, h_k, None)?;
        let cat = g.concat_cols(&[h_a, attended]);
        Ok(proj.forward(g, cat))
    }

    /// Per-frame log-probabilities over the output units.
    pub fn ctc_head<F: Float>(&self, g: &mut Graph<'_, F>, h: Var) -> Var {
        let z = self.ctc.forward(g, h);
        g.log_softmax(z)
    }

    /// Bias (if present) followed by the CTC head on detached rows.
    pub fn posteriors<F: Float>(
        &self,
        store: &ParamStore<F>,
        h_a: &Tensor<F>,
        h_k: Option<&Tensor<F>>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut g = Graph::new(store);
        let ha = g.constant(h_a.clone());
        let h = match (self.has_bias(), h_k) {
            (true, Some(k)) => {
                let kv = g.constant(k.clone());
                self.bias(&mut g, ha, kv)?
            }
            (true, None) => return Err(KwsError::MissingModule("keyword embedding")),
            (false, _) => ha,
        };
        let lp = self.ctc_head(&mut g, h);
        Ok((g.value(h).clone(), g.value(lp).clone()))
    }

    /// Decoder log-probabilities (`len × V`) for `decoder_input` attending to
    /// the clipped encoder rows.
    pub fn decoder_forward<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        h_clip: Var,
        decoder_input: &[usize],
    ) -> Result<Var> {
        let Some(dec) = &self.decoder else {
            return Err(KwsError::MissingModule("decoder"));
        };
        if g.value(h_clip).rows() == 0 {
            return Err(KwsError::Config("empty encoder segment".into()));
        }
        if decoder_input.first() != Some(&self.vocab().sos_eos()) {
            return Err(KwsError::Config(
                "decoder input must start with <sos>".into(),
            ));
        }
        let n = decoder_input.len();
        let pos: Vec<usize> = (0..n).collect();
        let causal = AttentionMask::causal(n);
        let dim = self.config.dim;
        let e = dec.embed.forward(g, decoder_input)?;
        let pe = g.constant(sinusoidal_positions(n, dim));
        let mut x = g.add(e, pe);
        // frame positions count from the start of the clip
        let pe = g.constant(sinusoidal_positions(g.value(h_clip).rows(), dim));
        let memory = g.add(h_clip, pe);
        for l in &dec.layers {
            let h = l.self_norm.forward(g, x);
            let q = l.self_att.q.forward(g, h);
            let (k, v) = l.self_att.project_kv(g, h);
            let biases = l.rel.head_biases(g, &pos, &pos);
            let a = l
                .self_att
                .attend(g, q, k, v, Some(&causal), Some(&biases))?;
            x = g.add(x, a);
            let h = l.cross_norm.forward(g, x);
            let a = l.cross_att.forward(g, h, memory, None)?;
            x = g.add(x, a);
            let h = l.ffn_norm.forward(g, x);
            let f = l.ffn.forward(g, h);
            x = g.add(x, f);
        }
        let x = dec.final_norm.forward(g, x);
        let z = dec.out.forward(g, x);
        Ok(g.log_softmax(z))
    }

    /// Length-normalized log-probability of `keyword + <eok>` given
    /// `<sos> + keyword`.
    pub fn decoder_score<F: Float>(
        &self,
        store: &ParamStore<F>,
        h_clip: &Tensor<F>,
        phones: &[usize],
    ) -> Result<f64> {
        if phones.is_empty() {
            return Err(KwsError::EmptyKeyword);
        }
        let v = self.vocab();
        let mut input = vec![v.sos_eos()];
        input.extend_from_slice(phones);
        let mut target = phones.to_vec();
        target.push(v.eok());
        let mut g = Graph::new(store);
        let h = g.constant(h_clip.clone());
        let lp = self.decoder_forward(&mut g, h, &input)?;
        let lp = g.value(lp);
        let total: f64 = target
            .iter()
            .enumerate()
            .map(|(i, &t)| lp.get(i, t).as_f64())
            .sum();
        Ok(total / target.len() as f64)
    }

    pub fn param_count<F: Float>(store: &ParamStore<F>, prefix: &str) -> usize {
        store.count(prefix)
    }
}

/// Parameter counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub encoder: usize,
    pub keyword_encoder: usize,
    pub bias: usize,
    pub ctc: usize,
    pub decoder: usize,
}

impl ParamReport {
    pub fn of<F: Float>(store: &ParamStore<F>) -> Self {
        ParamReport {
            encoder: store.count(ENCODER_PREFIX),
            keyword_encoder: store.count(KEYWORD_ENCODER_PREFIX),
            bias: store.count(BIAS_PREFIX),
            ctc: store.count(CTC_PREFIX),
            decoder: store.count(DECODER_PREFIX),
        }
    }

    pub fn total(&self) -> usize {
        self.encoder + self.keyword_encoder + self.bias + self.ctc + self.decoder
    }

    pub fn bias_fraction(&self) -> f64 {
        self.bias as f64 / self.encoder.max(1) as f64
    }
}
