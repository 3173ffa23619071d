//! The multimodal transformer network.
//!
//! The encoder runs, separately for each enabled video modality, a query
//! self-attention block followed by a query-to-feature block, repeated over
//! `rounds`. The decoder cascades the embedded response through self,
//! history, summary and query attention, then through the audio- and
//! visual-attended query representations, again repeated over `rounds`.
//! The decoder output feeds the generation head and the pointers.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_block, positional_encoding, AttentionBlockParams, DropoutCtx, KeyMask};
use crate::data::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::pointer::{
    generation_distribution, mix_distributions, mixture_scores, pointer_distribution, scatter_to_vocab, MaskedSeq,
    PointerSource, PointerVocab,
};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::training::{Init, Initializer};

/// Video feature streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "visual" | "vis" => Ok(Modality::Visual),
            "audio" | "aud" => Ok(Modality::Audio),
            other => Err(Error::Config(format!("unknown feature type {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Attention rounds in encoder and decoder.
    pub rounds: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub d_vis: usize,
    pub d_aud: usize,
    /// Inner width of the position-wise feed-forward layers.
    pub ff_inner: usize,
    pub dropout: f64,
    pub pointer_sources: Vec<PointerSource>,
    pub features: Vec<Modality>,
    /// Reuse round 0's parameters in every round.
    #[serde(default)]
    pub tie_rounds: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 512,
            rounds: 6,
            heads: 16,
            vocab_size: 0,
            d_vis: 2048,
            d_aud: 128,
            ff_inner: 2048,
            dropout: 0.5,
            pointer_sources: vec![PointerSource::Query, PointerSource::Summary],
            features: vec![Modality::Visual],
            tie_rounds: false,
        }
    }
}

impl ModelConfig {
    /// Small profile that trains on one CPU core in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d: 64,
            rounds: 2,
            heads: 4,
            vocab_size,
            ff_inner: 256,
            dropout: 0.1,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.vocab_size <= crate::data::RESERVED.len() {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.ff_inner == 0 || self.d_vis == 0 || self.d_aud == 0 {
            return fail("feature and feed-forward widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let mut srcs = self.pointer_sources.clone();
        srcs.sort();
        srcs.dedup();
        if srcs != self.pointer_sources {
            return fail("pointer_sources must be sorted and unique".into());
        }
        let mut feats = self.features.clone();
        feats.sort();
        feats.dedup();
        if feats != self.features {
            return fail("features must be sorted and unique".into());
        }
        Ok(())
    }

    /// Sorts and deduplicates the set-valued fields.
    pub fn normalized(mut self) -> Self {
        self.pointer_sources.sort();
        self.pointer_sources.dedup();
        self.features.sort();
        self.features.dedup();
        self
    }

    pub fn uses(&self, m: Modality) -> bool {
        self.features.contains(&m)
    }

    pub fn points_to(&self, s: PointerSource) -> bool {
        self.pointer_sources.contains(&s)
    }

    fn feature_width(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.d_vis,
            Modality::Audio => self.d_aud,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderRound {
    pub self_attention: AttentionBlockParams,
    pub cross_attention: AttentionBlockParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub modality: Modality,
    pub projection: ParamId,
    pub projection_bias: ParamId,
    pub rounds: Vec<EncoderRound>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderRound {
    pub res2res: AttentionBlockParams,
    pub res2his: AttentionBlockParams,
    pub res2cap: AttentionBlockParams,
    pub res2que: AttentionBlockParams,
    pub res2aud: Option<AttentionBlockParams>,
    pub res2vis: Option<AttentionBlockParams>,
}

/// Every learnable tensor of one model, registered in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct MtnParams {
    pub store: ParamStore,
    pub embedding: ParamId,
    pub encoders: Vec<EncoderStack>,
    pub decoder: Vec<DecoderRound>,
    pub w_gen: ParamId,
    /// `5d × k` with `k = 1 + |pointer_sources|`; absent without pointers.
    pub w_ctx: Option<ParamId>,
}

impl MtnParams {
    pub fn build(config: &ModelConfig, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        let (d, h, ff) = (config.d, config.heads, config.ff_inner);
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", init.make(config.vocab_size, d, Init::Glorot))?;
        let distinct_rounds = if config.tie_rounds { 1 } else { config.rounds };

        let mut encoders = Vec::new();
        for &m in &config.features {
            let name = m.name();
            let projection = store.add(
                format!("enc.{name}.proj"),
                init.make(config.feature_width(m), d, Init::Glorot),
            )?;
            let projection_bias = store.add(format!("enc.{name}.proj_bias"), init.make(1, d, Init::Zeros))?;
            let mut rounds = Vec::new();
            for r in 0..distinct_rounds {
                let p = format!("enc.{name}.r{r}");
                rounds.push(EncoderRound {
                    self_attention: AttentionBlockParams::register(&mut store, &format!("{p}.que2que"), d, h, ff, init)?,
                    cross_attention: AttentionBlockParams::register(&mut store, &format!("{p}.que2feat"), d, h, ff, init)?,
                });
            }
            encoders.push(EncoderStack {
                modality: m,
                projection,
                projection_bias,
                rounds,
            });
        }

        let mut decoder = Vec::new();
        for r in 0..distinct_rounds {
            let mut block = |stage: &str, store: &mut ParamStore| {
                AttentionBlockParams::register(store, &format!("dec.r{r}.{stage}"), d, h, ff, init)
            };
            let res2res = block("res2res", &mut store)?;
            let res2his = block("res2his", &mut store)?;
            let res2cap = block("res2cap", &mut store)?;
            let res2que = block("res2que", &mut store)?;
            let res2aud = match config.uses(Modality::Audio) {
                true => Some(block("res2aud", &mut store)?),
                false => None,
            };
            let res2vis = match config.uses(Modality::Visual) {
                true => Some(block("res2vis", &mut store)?),
                false => None,
            };
            decoder.push(DecoderRound {
                res2res,
                res2his,
                res2cap,
                res2que,
                res2aud,
                res2vis,
            });
        }

        let w_gen = store.add("w_gen", init.make(d, config.vocab_size, Init::Glorot))?;
        let w_ctx = match config.pointer_sources.len() {
            0 => None,
            n => Some(store.add("w_ctx", init.make(5 * d, n + 1, Init::Glorot))?),
        };
        Ok(MtnParams {
            store,
            embedding,
            encoders,
            decoder,
            w_gen,
            w_ctx,
        })
    }

    fn encoder(&self, m: Modality) -> Option<&EncoderStack> {
        self.encoders.iter().find(|e| e.modality == m)
    }
}

/// Token ids and features of one dialog turn, ready for the network.
///
/// Sequences may carry trailing [`PAD`] ids; padded positions are masked
/// out of every attention, pointer and pooling step.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub history: Vec<usize>,
    pub query: Vec<usize>,
    pub summary: Vec<usize>,
    pub visual: Option<Tensor>,
    pub audio: Option<Tensor>,
}

/// An embedded text sequence.
#[derive(Clone, Debug)]
pub struct TextRepr {
    pub ids: Vec<usize>,
    pub keep: Vec<bool>,
    /// Scaled embedding plus position signal, before dropout.
    pub clean: Var,
    /// `clean` after dropout; what the attention stacks consume.
    pub dropped: Var,
}

/// Encoder results for one input.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub history: TextRepr,
    pub query: TextRepr,
    pub summary: TextRepr,
    pub que2vis: Option<Var>,
    pub que2aud: Option<Var>,
}

/// Everything the output layer produces for one decoder pass.
#[derive(Clone, Debug)]
pub struct OutputDistributions {
    pub p_vocab: Var,
    pub p_gen: Var,
    pub pointers: PointerVocab,
    pub scores: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub encoder: EncoderOutputs,
    pub response: TextRepr,
    pub z_dec: Var,
    pub output: OutputDistributions,
    pub qae_vis: Option<Var>,
    pub qae_aud: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mtn {
    config: ModelConfig,
    params: MtnParams,
}

fn keep_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| i != PAD).collect()
}

impl Mtn {
    pub fn new(config: ModelConfig, params: MtnParams) -> Self {
        Mtn { config, params }
    }

    /// Freshly initialized model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = crate::training::init_params(&config, seed)?;
        Ok(Mtn { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &MtnParams {
        &self.params
    }

    pub fn store(&self) -> &ParamStore {
        &self.params.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params.store
    }

    /// Looks up `ids`, scales by `√d` and adds the position signal.
    pub fn embed_text<'p>(&'p self, g: &mut Graph<'p>, ids: &[usize], drop: &mut DropoutCtx) -> Result<TextRepr> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot embed an empty sequence".into()));
        }
        let keep = keep_mask(ids);
        if !keep.iter().any(|&k| k) {
            return Err(Error::InvalidArgument("sequence is entirely padding".into()));
        }
        let d = self.config.d;
        let table = g.param(&self.params.store, self.params.embedding);
        let emb = g.embedding(table, ids)?;
        let emb = g.scale(emb, (d as f64).sqrt());
        let pe = g.constant(positional_encoding(ids.len(), d));
        let clean = g.add(emb, pe)?;
        let dropped = drop.apply(g, clean)?;
        Ok(TextRepr {
            ids: ids.to_vec(),
            keep,
            clean,
            dropped,
        })
    }

    fn project_features<'p>(
        &'p self,
        g: &mut Graph<'p>,
        m: Modality,
        features: Option<&Tensor>,
        drop: &mut DropoutCtx,
    ) -> Result<Option<Var>> {
        let Some(stack) = self.params.encoder(m) else {
            return Ok(None);
        };
        let x = features.ok_or_else(|| {
            Error::InvalidArgument(format!("model uses {} features but the input has none", m.name()))
        })?;
        let width = self.config.feature_width(m);
        if x.cols() != width {
            return Err(Error::shape("feature projection", x.shape(), [x.rows(), width]));
        }
        let store = &self.params.store;
        let xv = g.constant(x.clone());
        let w = g.param(store, stack.projection);
        let b = g.param(store, stack.projection_bias);
        let z = g.matmul(xv, w)?;
        let z = g.add_row(z, b)?;
        drop.apply(g, z).map(Some)
    }

    /// Query-guided attention over each enabled feature stream.
    ///
    /// Returns `(que2vis, que2aud)`, each `L_que × d`, `None` for disabled
    /// modalities.
    pub fn encode_query_guided<'p>(
        &'p self,
        g: &mut Graph<'p>,
        query: &TextRepr,
        z_vis: Option<Var>,
        z_aud: Option<Var>,
        drop: &mut DropoutCtx,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let store = &self.params.store;
        let mut run = |g: &mut Graph<'p>, stack: &'p EncoderStack, feats: Var| {
            crate::attention::progressive_rounds(query.dropped, self.config.rounds, |r, z| {
                let round = &stack.rounds[r.min(stack.rounds.len() - 1)];
                let s = attention_block(g, store, &round.self_attention, z, z, KeyMask::keys(&query.keep), drop)?;
                attention_block(g, store, &round.cross_attention, s, feats, KeyMask::none(), drop)
            })
        };
        let mut out = (None, None);
        if let (Some(stack), Some(v)) = (self.params.encoder(Modality::Visual), z_vis) {
            out.0 = Some(run(g, stack, v)?);
        }
        if let (Some(stack), Some(a)) = (self.params.encoder(Modality::Audio), z_aud) {
            out.1 = Some(run(g, stack, a)?);
        }
        Ok(out)
    }

    /// Embeds the text inputs and runs the query-guided encoder.
    pub fn encode<'p>(&'p self, g: &mut Graph<'p>, input: &ModelInput, drop: &mut DropoutCtx) -> Result<EncoderOutputs> {
        if input.query.is_empty() {
            return Err(Error::InvalidArgument("empty query".into()));
        }
        let history = self.embed_text(g, &input.history, drop)?;
        let query = self.embed_text(g, &input.query, drop)?;
        let summary = self.embed_text(g, &input.summary, drop)?;
        let z_vis = self.project_features(g, Modality::Visual, input.visual.as_ref(), drop)?;
        let z_aud = self.project_features(g, Modality::Audio, input.audio.as_ref(), drop)?;
        let (que2vis, que2aud) = self.encode_query_guided(g, &query, z_vis, z_aud, drop)?;
        Ok(EncoderOutputs {
            history,
            query,
            summary,
            que2vis,
            que2aud,
        })
    }

    /// The decoder cascade; returns `Z_dec_out`, `L_Y × d`.
    pub fn decode_responses<'p>(
        &'p self,
        g: &mut Graph<'p>,
        response: &TextRepr,
        enc: &EncoderOutputs,
        drop: &mut DropoutCtx,
    ) -> Result<Var> {
        let store = &self.params.store;
        let causal = KeyMask {
            keep: Some(&response.keep),
            causal: true,
        };
        let (his, cap, que) = (
            KeyMask::keys(&enc.history.keep),
            KeyMask::keys(&enc.summary.keep),
            KeyMask::keys(&enc.query.keep),
        );
        crate::attention::progressive_rounds(response.dropped, self.config.rounds, |r, z| {
            let round = &self.params.decoder[r.min(self.params.decoder.len() - 1)];
            let z = attention_block(g, store, &round.res2res, z, z, causal, drop)?;
            let z = attention_block(g, store, &round.res2his, z, enc.history.dropped, his, drop)?;
            let z = attention_block(g, store, &round.res2cap, z, enc.summary.dropped, cap, drop)?;
            let mut z = attention_block(g, store, &round.res2que, z, enc.query.dropped, que, drop)?;
            if let (Some(p), Some(a)) = (&round.res2aud, enc.que2aud) {
                z = attention_block(g, store, p, z, a, que, drop)?;
            }
            if let (Some(p), Some(v)) = (&round.res2vis, enc.que2vis) {
                z = attention_block(g, store, p, z, v, que, drop)?;
            }
            Ok(z)
        })
    }

    /// Generation head, enabled pointers, and their mixture.
    pub fn output_distribution<'p>(
        &'p self,
        g: &mut Graph<'p>,
        enc: &EncoderOutputs,
        response: &TextRepr,
        z_dec: Var,
    ) -> Result<OutputDistributions> {
        let store = &self.params.store;
        let v = self.config.vocab_size;
        let w_gen = g.param(store, self.params.w_gen);
        let p_gen = generation_distribution(g, z_dec, w_gen)?;
        let Some(w_ctx) = self.params.w_ctx else {
            return Ok(OutputDistributions {
                p_vocab: p_gen,
                p_gen,
                pointers: PointerVocab::default(),
                scores: None,
            });
        };
        let point = |g: &mut Graph<'p>, src: PointerSource, text: &TextRepr| -> Result<Option<Var>> {
            if !self.config.points_to(src) {
                return Ok(None);
            }
            let ptr = pointer_distribution(g, z_dec, text.clean, &text.keep)?;
            scatter_to_vocab(g, ptr, &text.ids, v).map(Some)
        };
        let pointers = PointerVocab {
            history: point(g, PointerSource::History, &enc.history)?,
            query: point(g, PointerSource::Query, &enc.query)?,
            summary: point(g, PointerSource::Summary, &enc.summary)?,
        };
        let w_ctx = g.param(store, w_ctx);
        let scores = mixture_scores(
            g,
            MaskedSeq { z: enc.history.clean, keep: &enc.history.keep },
            MaskedSeq { z: enc.query.clean, keep: &enc.query.keep },
            MaskedSeq { z: enc.summary.clean, keep: &enc.summary.keep },
            response.clean,
            z_dec,
            w_ctx,
        )?;
        let p_vocab = mix_distributions(g, pointers, p_gen, scores)?;
        Ok(OutputDistributions {
            p_vocab,
            p_gen,
            pointers,
            scores: Some(scores),
        })
    }

    /// Query auto-encoder distributions `Softmax(Z_que2{vis,aud} · W_gen)`.
    pub fn qae_distributions<'p>(
        &'p self,
        g: &mut Graph<'p>,
        enc: &EncoderOutputs,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let w_gen = g.param(&self.params.store, self.params.w_gen);
        let mut head = |z: Option<Var>| -> Result<Option<Var>> {
            match z {
                Some(z) => {
                    let logits = g.matmul(z, w_gen)?;
                    g.softmax_rows(logits, None).map(Some)
                }
                None => Ok(None),
            }
        };
        Ok((head(enc.que2vis)?, head(enc.que2aud)?))
    }

    /// Full pass with the decoder fed `decoder_input` (start token first).
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        input: &ModelInput,
        decoder_input: &[usize],
        drop: &mut DropoutCtx,
    ) -> Result<ForwardOutputs> {
        let encoder = self.encode(g, input, drop)?;
        self.forward_decoder(g, encoder, decoder_input, drop)
    }

    /// Embeds `decoder_input`, runs the decoder cascade and the output layer.
    pub fn decode_prefix<'p>(
        &'p self,
        g: &mut Graph<'p>,
        encoder: &EncoderOutputs,
        decoder_input: &[usize],
        drop: &mut DropoutCtx,
    ) -> Result<(TextRepr, Var, OutputDistributions)> {
        if decoder_input.is_empty() {
            return Err(Error::InvalidArgument("empty target sequence".into()));
        }
        let response = self.embed_text(g, decoder_input, drop)?;
        let z_dec = self.decode_responses(g, &response, encoder, drop)?;
        let output = self.output_distribution(g, encoder, &response, z_dec)?;
        Ok((response, z_dec, output))
    }

    /// Decoder, output layer and auto-encoder heads on top of a finished encoder pass.
    pub fn forward_decoder<'p>(
        &'p self,
        g: &mut Graph<'p>,
        encoder: EncoderOutputs,
        decoder_input: &[usize],
        drop: &mut DropoutCtx,
    ) -> Result<ForwardOutputs> {
        let (response, z_dec, output) = self.decode_prefix(g, &encoder, decoder_input, drop)?;
        let (qae_vis, qae_aud) = self.qae_distributions(g, &encoder)?;
        Ok(ForwardOutputs {
            encoder,
            response,
            z_dec,
            output,
            qae_vis,
            qae_aud,
        })
    }
}

/// Model plus the vocabulary it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Mtn,
    pub vocab: Vocab,
}

const CKPT_MAGIC: &[u8; 7] = b"MTNCKPT";
const CKPT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab: Vec<String>,
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    /// Layout: `"MTNCKPT"`, version byte, `u32` length + JSON metadata
    /// (config and vocabulary), `u32` tensor count, then per tensor a `u32`
    /// length-prefixed name, `u32` rank, `u32` dims, and `f64` values, all
    /// little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&CheckpointMeta {
            config: self.model.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
        })?;
        let store = self.model.store();
        let mut out = Vec::with_capacity(16 + meta.len() + store.numel() * 8);
        out.extend_from_slice(CKPT_MAGIC);
        out.push(CKPT_VERSION);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (_, name, t) in store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("checkpoint", d);
        let io = |e: std::io::Error| bad(format!("truncated: {e}"));
        let mut r = bytes;
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CKPT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version).map_err(io)?;
        if version[0] != CKPT_VERSION {
            return Err(bad(format!("unsupported version {}", version[0])));
        }
        let meta_len = read_u32(&mut r).map_err(io)? as usize;
        if meta_len > r.len() {
            return Err(bad("metadata runs past end of file".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&r[..meta_len])?;
        r = &r[meta_len..];
        let vocab = Vocab::from_tokens(meta.vocab)?;
        if vocab.len() != meta.config.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} tokens but config says {}",
                vocab.len(),
                meta.config.vocab_size
            )));
        }
        let mut params = MtnParams::build(&meta.config, &mut Initializer::zeros())?;
        let count = read_u32(&mut r).map_err(io)? as usize;
        if count != params.store.len() {
            return Err(bad(format!("{count} tensors, expected {}", params.store.len())));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name_len = read_u32(&mut r).map_err(io)? as usize;
            if name_len > r.len() {
                return Err(bad("tensor name runs past end of file".into()));
            }
            let name = std::str::from_utf8(&r[..name_len]).map_err(|e| bad(e.to_string()))?.to_string();
            r = &r[name_len..];
            let rank = read_u32(&mut r).map_err(io)?;
            if rank != 2 {
                return Err(bad(format!("tensor {name} has rank {rank}")));
            }
            let rows = read_u32(&mut r).map_err(io)? as usize;
            let cols = read_u32(&mut r).map_err(io)? as usize;
            let id = params.store.id(&name).ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
            if seen[id.index()] {
                return Err(bad(format!("tensor {name} appears twice")));
            }
            seen[id.index()] = true;
            let target = params.store.get_mut(id);
            if target.shape() != [rows, cols] {
                return Err(bad(format!("tensor {name} is {rows}x{cols}, expected {:?}", target.shape())));
            }
            let n = rows * cols;
            if r.len() < n * 8 {
                return Err(bad(format!("tensor {name} truncated")));
            }
            for (dst, chunk) in target.data_mut().iter_mut().zip(r[..n * 8].chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            r = &r[n * 8..];
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            model: Mtn::new(meta.config, params),
            vocab,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{END, SEP, START};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            rounds: 1,
            heads: 2,
            vocab_size: 12,
            d_vis: 6,
            d_aud: 5,
            ff_inner: 16,
            dropout: 0.0,
            pointer_sources: vec![PointerSource::History, PointerSource::Query, PointerSource::Summary],
            features: vec![Modality::Visual, Modality::Audio],
            tie_rounds: false,
        }
    }

    fn features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn input(rng: &mut ChaCha8Rng, cfg: &ModelConfig, frames: usize) -> ModelInput {
        ModelInput {
            history: vec![SEP, 7, 8, SEP, 9],
            query: vec![5, 6, 7],
            summary: vec![9, 10, 11, 5],
            visual: Some(features(rng, frames, cfg.d_vis)),
            audio: Some(features(rng, frames, cfg.d_aud)),
        }
    }

    #[test]
    fn parameter_layout_is_a_function_of_config() {
        let cfg = micro_config();
        let a = Mtn::init(cfg.clone(), 11).unwrap();
        let b = Mtn::init(cfg.clone(), 11).unwrap();
        assert_eq!(a, b);
        let c = Mtn::init(cfg.clone(), 12).unwrap();
        assert_eq!(a.store().numel(), c.store().numel());
        assert_ne!(a, c);
        assert!(a.params().w_ctx.is_some());
        assert_eq!(a.store().get(a.params().w_ctx.unwrap()).shape(), [40, 4]);
    }

    #[test]
    fn disabling_a_modality_drops_exactly_its_parameters() {
        let full = Mtn::init(micro_config(), 1).unwrap();
        let cfg = ModelConfig {
            features: vec![Modality::Visual],
            ..micro_config()
        };
        let vis_only = Mtn::init(cfg, 1).unwrap();
        let full_names: Vec<&str> = full.store().iter().map(|(_, n, _)| n).collect();
        let vis_names: Vec<&str> = vis_only.store().iter().map(|(_, n, _)| n).collect();
        let removed: Vec<&str> = full_names.iter().copied().filter(|n| !vis_names.contains(n)).collect();
        assert!(vis_names.iter().all(|n| full_names.contains(n)));
        assert!(!removed.is_empty());
        assert!(removed.iter().all(|n| n.contains("audio") || n.contains("res2aud")), "{removed:?}");
    }

    #[test]
    fn forward_shapes_and_stochastic_outputs() {
        let cfg = micro_config();
        let model = Mtn::init(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = input(&mut rng, &cfg, 3);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &[START, 5, 9], &mut DropoutCtx::eval()).unwrap();
        assert_eq!(g.shape(out.z_dec), [3, 8]);
        assert_eq!(g.shape(out.output.p_vocab), [3, 12]);
        assert_eq!(g.shape(out.output.scores.unwrap()), [3, 4]);
        assert_eq!(g.shape(out.encoder.que2vis.unwrap()), [3, 8]);
        assert_eq!(g.shape(out.encoder.que2aud.unwrap()), [3, 8]);
        for v in [out.output.p_vocab, out.output.p_gen, out.qae_vis.unwrap(), out.qae_aud.unwrap()] {
            assert_eq!(crate::pointer::first_non_stochastic_row(&g.tensor(v), 1e-12), None);
        }
    }

    #[test]
    fn single_clip_gets_full_cross_attention_weight() {
        let cfg = micro_config();
        let model = Mtn::init(cfg.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = input(&mut rng, &cfg, 1);
        let mut g = Graph::new();
        let mut drop = DropoutCtx::eval();
        let enc = model.encode(&mut g, &x, &mut drop).unwrap();
        let stack = &model.params().encoders[0];
        let round = &stack.rounds[0];
        // recompute the cross-attention step with tracing on the same inputs
        let s = attention_block(
            &mut g,
            model.store(),
            &round.self_attention,
            enc.query.dropped,
            enc.query.dropped,
            KeyMask::keys(&enc.query.keep),
            &mut drop,
        )
        .unwrap();
        let feats = model.project_features(&mut g, Modality::Visual, x.visual.as_ref(), &mut drop).unwrap().unwrap();
        let trace = crate::attention::multi_head_attention_traced(
            &mut g,
            model.store(),
            &round.cross_attention.attention,
            s,
            feats,
            KeyMask::none(),
        )
        .unwrap();
        for w in trace.weights {
            assert!(g.value(w).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn text_only_config_skips_video_stages() {
        let cfg = ModelConfig {
            features: vec![],
            ..micro_config()
        };
        let model = Mtn::init(cfg, 5).unwrap();
        assert!(model.params().encoders.is_empty());
        assert!(model.params().decoder.iter().all(|r| r.res2aud.is_none() && r.res2vis.is_none()));
        let x = ModelInput {
            history: vec![SEP],
            query: vec![5, 6],
            summary: vec![7],
            visual: None,
            audio: None,
        };
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &[START, 8, 9, 10], &mut DropoutCtx::eval()).unwrap();
        assert_eq!(g.shape(out.z_dec), [4, 8]);
        assert!(out.qae_vis.is_none() && out.qae_aud.is_none());
    }

    #[test]
    fn decoder_is_causal_end_to_end() {
        let cfg = micro_config();
        let model = Mtn::init(cfg.clone(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = input(&mut rng, &cfg, 2);
        let run = |target: &[usize]| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &x, target, &mut DropoutCtx::eval()).unwrap();
            (g.tensor(out.z_dec), g.tensor(out.output.p_vocab))
        };
        let base = [START, 5, 6, 7, 8];
        let (z0, p0) = run(&base);
        for j in 1..base.len() {
            let mut t = base;
            t[j] = 11;
            let (z1, p1) = run(&t);
            for i in 0..j {
                assert_eq!(z0.row(i), z1.row(i));
                assert_eq!(p0.row(i), p1.row(i));
            }
            assert_ne!(z0.row(j), z1.row(j));
        }
    }

    #[test]
    fn trailing_padding_changes_nothing() {
        let cfg = micro_config();
        let model = Mtn::init(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = input(&mut rng, &cfg, 3);
        let mut padded = x.clone();
        padded.history.extend([PAD, PAD]);
        padded.query.push(PAD);
        padded.summary.extend([PAD, PAD, PAD]);
        let target = [START, 9, 5];
        let mut g1 = Graph::new();
        let a = model.forward(&mut g1, &x, &target, &mut DropoutCtx::eval()).unwrap();
        let mut g2 = Graph::new();
        let b = model.forward(&mut g2, &padded, &[START, 9, 5, PAD], &mut DropoutCtx::eval()).unwrap();
        let (pa, pb) = (g1.tensor(a.output.p_vocab), g2.tensor(b.output.p_vocab));
        for i in 0..3 {
            for (u, v) in pa.row(i).iter().zip(pb.row(i)) {
                assert!((u - v).abs() < 1e-12, "{u} vs {v}");
            }
            assert_eq!(pb.row(i)[PAD], 0.0_f64.max(pb.row(i)[PAD]));
        }
        // pointer mass never lands on the pad id
        for p in b.output.pointers.columns() {
            for i in 0..4 {
                assert_eq!(g2.row(p, i)[PAD], 0.0);
            }
        }
        let qa = g1.tensor(a.qae_vis.unwrap());
        let qb = g2.tensor(b.qae_vis.unwrap());
        for i in 0..3 {
            for (u, v) in qa.row(i).iter().zip(qb.row(i)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn progressive_encoder_composes_round_by_round() {
        let cfg = ModelConfig {
            rounds: 2,
            features: vec![Modality::Visual],
            ..micro_config()
        };
        let model = Mtn::init(cfg.clone(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = input(&mut rng, &cfg, 3);
        let mut g = Graph::new();
        let mut drop = DropoutCtx::eval();
        let enc = model.encode(&mut g, &x, &mut drop).unwrap();
        let store = model.store();
        let feats = model.project_features(&mut g, Modality::Visual, x.visual.as_ref(), &mut drop).unwrap().unwrap();
        let mut z = enc.query.dropped;
        for round in &model.params().encoders[0].rounds {
            let s = attention_block(&mut g, store, &round.self_attention, z, z, KeyMask::keys(&enc.query.keep), &mut drop)
                .unwrap();
            z = attention_block(&mut g, store, &round.cross_attention, s, feats, KeyMask::none(), &mut drop).unwrap();
        }
        assert_eq!(g.value(z), g.value(enc.que2vis.unwrap()));
    }

    #[test]
    fn qae_hand_computed_row() {
        // d = 2, |V| = 6: one row of Z_que2vis · W_gen against a hand softmax
        let cfg = ModelConfig {
            d: 2,
            heads: 1,
            vocab_size: 6,
            ff_inner: 2,
            ..micro_config()
        };
        let mut model = Mtn::init(cfg, 9).unwrap();
        let w_gen = model.params().w_gen;
        let weights = [1.0, 0.0, -1.0, 0.5, 0.0, 2.0, 0.0, 1.0, 1.0, 0.0, -0.5, 1.0];
        model.store_mut().get_mut(w_gen).data_mut().copy_from_slice(&weights);
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&[[0.5, 2.0]]).unwrap());
        let enc = EncoderOutputs {
            history: dummy_text(&mut g),
            query: dummy_text(&mut g),
            summary: dummy_text(&mut g),
            que2vis: Some(z),
            que2aud: None,
        };
        let (vis, aud) = model.qae_distributions(&mut g, &enc).unwrap();
        assert!(aud.is_none());
        // logits = [0.5·1 + 2·0, 0.5·0 + 2·1, 0.5·-1 + 2·1, 0.5·0.5 + 2·0, 0.5·0 - 2·0.5, 0.5·2 + 2·1]
        let logits = [0.5, 2.0, 1.5, 0.25, -1.0, 3.0];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        for (p, l) in g.row(vis.unwrap(), 0).iter().zip(logits) {
            assert!((p - l.exp() / z).abs() < 1e-15);
        }
    }

    fn dummy_text(g: &mut Graph<'_>) -> TextRepr {
        let v = g.constant(Tensor::zeros(1, 2));
        TextRepr {
            ids: vec![END],
            keep: vec![true],
            clean: v,
            dropped: v,
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let cfg = micro_config();
        let model = Mtn::init(cfg, 10).unwrap();
        let vocab = Vocab::from_tokens(
            crate::data::RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain((0..7).map(|i| format!("w{i}")))
                .collect(),
        )
        .unwrap();
        let ck = Checkpoint { model, vocab };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..7], b"MTNCKPT");
        assert_eq!(bytes[7], 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes;
        bad[7] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    }
}
