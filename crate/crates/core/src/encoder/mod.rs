//! A small pre-norm transformer encoder that turns subtoken ids into
//! contextual vectors `h`, plus vocabulary handling and masked language
//! modeling.

mod masking;
mod vocab;

use ndtensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use masking::{apply_masking, load_lexicon, MaskedInput, MaskingPolicy, MlmTarget, Treatment};
pub use vocab::{Encoded, TokenAlignment, Vocabulary, CLS, MASK, NUM_SPECIAL, PAD, SEP, UNK};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{0}")]
    Domain(String),

    #[error("sequence of {len} subtokens exceeds max_len {max}")]
    Length { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Two layers, four heads, width 64.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            max_len: 64,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.model_dim == 0 || self.heads == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return fail("model_dim, heads, ffn_dim and max_len must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return fail(format!("model_dim {} is not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.vocab_size <= NUM_SPECIAL {
            return fail(format!("vocab_size {} leaves no room beyond the special tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2: (ParamId, ParamId),
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

/// Parameter handles of the encoder; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_ln: (ParamId, ParamId),
    proj_w: ParamId,
    proj_b: ParamId,
    mlm_bias: ParamId,
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
        store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
    )
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let f = config.ffn_dim;
        let tok_emb = store.add_uniform("encoder.tok_emb", &[config.vocab_size, d], d, rng);
        let pos_emb = store.add_uniform("encoder.pos_emb", &[config.max_len, d], d, rng);
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("encoder.block{i}");
                Block {
                    ln1: layer_norm_params(store, &format!("{p}.ln1"), d),
                    qkv_w: store.add_uniform(format!("{p}.qkv.weight"), &[d, 3 * d], d, rng),
                    qkv_b: store.add(format!("{p}.qkv.bias"), Tensor::zeros(&[3 * d])),
                    out_w: store.add_uniform(format!("{p}.attn_out.weight"), &[d, d], d, rng),
                    out_b: store.add(format!("{p}.attn_out.bias"), Tensor::zeros(&[d])),
                    ln2: layer_norm_params(store, &format!("{p}.ln2"), d),
                    ff1_w: store.add_uniform(format!("{p}.ff1.weight"), &[d, f], d, rng),
                    ff1_b: store.add(format!("{p}.ff1.bias"), Tensor::zeros(&[f])),
                    ff2_w: store.add_uniform(format!("{p}.ff2.weight"), &[f, d], f, rng),
                    ff2_b: store.add(format!("{p}.ff2.bias"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        let final_ln = layer_norm_params(store, "encoder.final_ln", d);
        let proj_w = store.add_uniform("encoder.proj.weight", &[d, d], d, rng);
        let proj_b = store.add("encoder.proj.bias", Tensor::zeros(&[d]));
        let mlm_bias = store.add("encoder.mlm.bias", Tensor::zeros(&[config.vocab_size]));
        Ok(Encoder {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
            proj_w,
            proj_b,
            mlm_bias,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// Contextual representations `h` of shape `[ids.len(), d]`.
    ///
    /// Dropout is applied only when a generator is supplied.
    pub fn encode(&self, g: &mut Graph<'_>, ids: &[usize], mut dropout: Option<&mut dyn RngCore>) -> Result<Var> {
        let n = ids.len();
        if n == 0 {
            return Err(EncoderError::Domain("cannot encode an empty sequence".into()));
        }
        if n > self.config.max_len {
            return Err(EncoderError::Length {
                len: n,
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(EncoderError::Domain(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let rate = self.config.dropout;
        let mut drop = |g: &mut Graph<'_>, x: Var| -> Result<Var> {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => Ok(g.dropout(x, rate, rng)?),
                _ => Ok(x),
            }
        };

        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..n).collect();
        let te = g.rows(tok, ids)?;
        let pe = g.rows(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        x = drop(g, x)?;

        for b in &self.blocks {
            let a = self.norm(g, x, b.ln1)?;
            let att = self.self_attention(g, a, b)?;
            let att = drop(g, att)?;
            x = g.add(x, att)?;

            let a = self.norm(g, x, b.ln2)?;
            let hidden = linear(g, a, b.ff1_w, b.ff1_b)?;
            let hidden = g.gelu(hidden);
            let ff = linear(g, hidden, b.ff2_w, b.ff2_b)?;
            let ff = drop(g, ff)?;
            x = g.add(x, ff)?;
        }
        let x = self.norm(g, x, self.final_ln)?;
        Ok(linear(g, x, self.proj_w, self.proj_b)?)
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let gain = g.param(gain);
        let bias = g.param(bias);
        Ok(g.layer_norm(x, gain, bias)?)
    }

    fn self_attention(&self, g: &mut Graph<'_>, x: Var, b: &Block) -> Result<Var> {
        let d = self.config.model_dim;
        let dh = d / self.config.heads;
        let qkv = linear(g, x, b.qkv_w, b.qkv_b)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = g.slice_cols(qkv, h * dh, (h + 1) * dh)?;
            let k = g.slice_cols(qkv, d + h * dh, d + (h + 1) * dh)?;
            let v = g.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores)?;
            heads.push(g.matmul(weights, v)?);
        }
        let joined = g.concat(&heads)?;
        Ok(linear(g, joined, b.out_w, b.out_b)?)
    }

    /// Mean cross-entropy of the original ids at the target positions,
    /// scored against the (tied) token embedding table. A constant zero
    /// when there are no targets.
    pub fn mlm_loss(&self, g: &mut Graph<'_>, h: Var, targets: &[MlmTarget]) -> Result<Var> {
        if targets.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let positions: Vec<usize> = targets.iter().map(|t| t.position).collect();
        let originals: Vec<usize> = targets.iter().map(|t| t.original).collect();
        let rows = g.rows(h, &positions)?;
        let emb = g.param(self.tok_emb);
        let emb_t = g.transpose(emb)?;
        let logits = g.matmul(rows, emb_t)?;
        let bias = g.param(self.mlm_bias);
        let logits = g.add_bias(logits, bias)?;
        Ok(g.cross_entropy(logits, &originals)?)
    }
}

/// `x @ w + b` for `x` of shape `[n, in]` or `[in]`.
pub(crate) fn linear(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> ndtensor::Result<Var> {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}
