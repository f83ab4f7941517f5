//! Compact pre-layernorm transformer encoder whose CLS output serves as the
//! sentence representation. Feed-forward sublayers are the warp layers.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::corpus::{TokenId, CLS_ID};
use crate::params::{truncated_normal, ParamTree};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;
/// Amplitude of the sinusoidal position signal, matched to the token
/// embedding scale so positions do not drown out word identity.
pub const POSITION_SCALE: f64 = INIT_STD;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("parameter {0} missing from tree")]
    MissingParam(String),
    #[error("layer {layer} out of range (0..={max})")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Sequence cap including the CLS token.
    pub max_seq_len: usize,
    /// Applied to embeddings, sublayer outputs and attention probabilities
    /// in training mode.
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            model_dim: 64,
            ff_dim: 256,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 32,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::InvalidConfig(m));
        if [self.vocab_size, self.model_dim, self.ff_dim, self.n_layers, self.n_heads, self.max_seq_len].contains(&0) {
            return fail("all sizes must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return fail(format!("model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads));
        }
        if self.ff_dim < self.model_dim {
            return fail(format!("ff_dim {} < model_dim {}", self.ff_dim, self.model_dim));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must leave room for CLS and one token".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= CLS_ID as usize {
            return fail("vocabulary must include the reserved ids".into());
        }
        Ok(())
    }
}

/// Sinusoidal position table row for `pos`, scaled by [`POSITION_SCALE`].
pub fn position_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            POSITION_SCALE * if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Forward-pass products.
pub struct EncoderOutput {
    /// Final-layer CLS representation, `[batch, model_dim]`.
    pub cls: NodeId,
    /// CLS rows after the embedding (index 0) and after each block, when
    /// requested.
    pub layers: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
}

fn layer_name(l: usize, rest: &str) -> String {
    format!("layer{l}.{rest}")
}

/// True for names of feed-forward sublayer parameters.
pub fn is_feed_forward_param(name: &str) -> bool {
    name.split_once('.').is_some_and(|(layer, rest)| layer.starts_with("layer") && rest.starts_with("ffn."))
}

impl TextEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Random initialization: weights truncated-normal, biases zero,
    /// layernorm gains one.
    pub fn init_params(&self, seed: u64) -> ParamTree {
        let c = &self.cfg;
        let (d, ff) = (c.model_dim, c.ff_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = ParamTree::new();
        tree.push("embed.token", truncated_normal(&[c.vocab_size, d], INIT_STD, &mut rng), "embed", false, true);
        for l in 0..c.n_layers {
            let attn = layer_name(l, "attn");
            tree.push(layer_name(l, "attn_norm.gain"), Tensor::full(&[d], 1.0), &attn, false, true);
            tree.push(layer_name(l, "attn_norm.bias"), Tensor::zeros(&[d]), &attn, false, true);
            for proj in ["q", "k", "v", "o"] {
                let w = truncated_normal(&[d, d], INIT_STD, &mut rng);
                tree.push(layer_name(l, &format!("attn.{proj}.weight")), w, &attn, false, true);
                tree.push(layer_name(l, &format!("attn.{proj}.bias")), Tensor::zeros(&[d]), &attn, false, true);
            }
            let norm = layer_name(l, "ffn_norm");
            tree.push(layer_name(l, "ffn_norm.gain"), Tensor::full(&[d], 1.0), &norm, false, true);
            tree.push(layer_name(l, "ffn_norm.bias"), Tensor::zeros(&[d]), &norm, false, true);
            let warp = layer_name(l, "ffn");
            tree.push(layer_name(l, "ffn.up.weight"), truncated_normal(&[d, ff], INIT_STD, &mut rng), &warp, true, false);
            tree.push(layer_name(l, "ffn.up.bias"), Tensor::zeros(&[ff]), &warp, true, false);
            tree.push(layer_name(l, "ffn.down.weight"), truncated_normal(&[ff, d], INIT_STD, &mut rng), &warp, true, false);
            tree.push(layer_name(l, "ffn.down.bias"), Tensor::zeros(&[d]), &warp, true, false);
        }
        tree.push("final_norm.gain", Tensor::full(&[d], 1.0), "final_norm", false, true);
        tree.push("final_norm.bias", Tensor::zeros(&[d]), "final_norm", false, true);
        tree
    }

    /// Prepends CLS and truncates to `max_seq_len`.
    fn prepare(&self, batch: &[&[TokenId]]) -> Result<(Vec<usize>, Vec<Range<usize>>), EncoderError> {
        if batch.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        for seq in batch {
            let start = ids.len();
            ids.push(CLS_ID as usize);
            for &t in seq.iter().take(self.cfg.max_seq_len - 1) {
                if t as usize >= self.cfg.vocab_size {
                    return Err(EncoderError::TokenOutOfRange { token: t, vocab: self.cfg.vocab_size });
                }
                ids.push(t as usize);
            }
            segments.push(start..ids.len());
        }
        Ok((ids, segments))
    }

    /// Records the encoder on `tape`. `nodes[i]` holds the value of entry `i`
    /// of `tree`; only names are read from `tree`. Sequences are encoded
    /// independently (attention never crosses sequences). Overlong inputs
    /// are truncated to `max_seq_len - 1` tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        tree: &ParamTree,
        nodes: &[NodeId],
        batch: &[&[TokenId]],
        train: bool,
        rng: &mut R,
        with_layers: bool,
    ) -> Result<EncoderOutput, EncoderError> {
        let c = &self.cfg;
        let p = |name: &str| -> Result<NodeId, EncoderError> {
            tree.index_of(name)
                .map(|i| nodes[i])
                .ok_or_else(|| EncoderError::MissingParam(name.to_string()))
        };
        let drop = if train { c.dropout } else { 0.0 };
        let (ids, segments) = self.prepare(batch)?;
        let starts: Vec<usize> = segments.iter().map(|s| s.start).collect();

        let mut pos = Vec::with_capacity(ids.len() * c.model_dim);
        for seg in &segments {
            for i in 0..seg.len() {
                pos.extend(position_encoding(i, c.model_dim));
            }
        }
        let pos = tape.constant(Tensor::new(vec![ids.len(), c.model_dim], pos)?);
        let emb = tape.embedding_lookup(p("embed.token")?, &ids)?;
        let mut x = tape.add(emb, pos)?;
        x = tape.dropout(x, drop, rng);

        let mut layers = Vec::new();
        if with_layers {
            layers.push(tape.embedding_lookup(x, &starts)?);
        }
        for l in 0..c.n_layers {
            let n = |rest: &str| p(&layer_name(l, rest));
            let h = tape.layer_norm(x, n("attn_norm.gain")?, n("attn_norm.bias")?, LAYER_NORM_EPS)?;
            let proj = |which: &str, tape: &mut Tape| -> Result<NodeId, EncoderError> {
                let y = tape.matmul(h, n(&format!("attn.{which}.weight"))?)?;
                Ok(tape.add_row(y, n(&format!("attn.{which}.bias"))?)?)
            };
            let q = proj("q", tape)?;
            let k = proj("k", tape)?;
            let v = proj("v", tape)?;
            let a = if drop > 0.0 {
                tape.segment_attention(q, k, v, &segments, c.n_heads, Some((drop, &mut *rng)))?
            } else {
                tape.segment_attention::<R>(q, k, v, &segments, c.n_heads, None)?
            };
            let o = tape.matmul(a, n("attn.o.weight")?)?;
            let o = tape.add_row(o, n("attn.o.bias")?)?;
            let o = tape.dropout(o, drop, rng);
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, n("ffn_norm.gain")?, n("ffn_norm.bias")?, LAYER_NORM_EPS)?;
            let f = tape.matmul(h, n("ffn.up.weight")?)?;
            let f = tape.add_row(f, n("ffn.up.bias")?)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, n("ffn.down.weight")?)?;
            let f = tape.add_row(f, n("ffn.down.bias")?)?;
            let f = tape.dropout(f, drop, rng);
            x = tape.add(x, f)?;
            if with_layers {
                layers.push(tape.embedding_lookup(x, &starts)?);
            }
        }
        let x = tape.layer_norm(x, p("final_norm.gain")?, p("final_norm.bias")?, LAYER_NORM_EPS)?;
        let cls = tape.embedding_lookup(x, &starts)?;
        Ok(EncoderOutput { cls, layers })
    }

    /// CLS representation of one sequence as a plain vector.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        params: &ParamTree,
        tokens: &[TokenId],
        train: bool,
        rng: &mut R,
    ) -> Result<Tensor, EncoderError> {
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, false);
        let out = self.forward(&mut tape, params, &nodes, &[tokens], train, rng, false)?;
        let v = tape.value(out.cls).clone();
        Ok(v.reshaped(vec![self.cfg.model_dim])?)
    }

    /// CLS rows at the requested layers (0 = embeddings, `n_layers` = last
    /// block) for every input, in evaluation mode.
    pub fn layer_representations(
        &self,
        params: &ParamTree,
        inputs: &[&[TokenId]],
        layers: &[usize],
    ) -> Result<Vec<Tensor>, EncoderError> {
        if let Some(&bad) = layers.iter().find(|&&l| l > self.cfg.n_layers) {
            return Err(EncoderError::LayerOutOfRange { layer: bad, max: self.cfg.n_layers });
        }
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, params, &nodes, inputs, false, &mut rng, true)?;
        Ok(layers.iter().map(|&l| tape.value(out.layers[l]).clone()).collect())
    }
}
