//! Post-norm encoder-decoder transformer operating on embedding sequences.
//!
//! The encoder and decoder take embeddings rather than token ids so that any
//! interpolation of inputs happens outside the network. Embeddings are scaled
//! by `sqrt(d_model)` on lookup; sinusoidal positions are added inside
//! [`encode`] and [`decode`], after any mixing.

mod checkpoint;
mod infer;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use infer::{DecoderCache, EncoderOutput, IncrementalDecoder};
pub use params::{Attention, DecoderLayer, EncoderLayer, FeedForward, Norm, ParamSet, Parameters};



use crate::error::{Error, Result};
use crate::rng::{SeedTree, StreamRng};
use crate::tensor::{kernels, AttnShape, Graph, Scalar, Tensor, Var};

/// Architecture and regularization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, width 64, FFN 256.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 256,
            src_vocab,
            tgt_vocab,
            max_len: 64,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.num_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::config("layers, d_ff and max_len must be positive"));
        }
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return Err(Error::config("vocabularies must be non-empty"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("num_layers".into(), self.num_layers.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("src_vocab".into(), self.src_vocab.to_string()),
            ("tgt_vocab".into(), self.tgt_vocab.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("label_smoothing".into(), self.label_smoothing.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        fn get<V: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<V> {
            let raw = pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::config(format!("missing model key `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::config(format!("bad value `{raw}` for `{key}`")))
        }
        let cfg = ModelConfig {
            num_layers: get(pairs, "num_layers")?,
            num_heads: get(pairs, "num_heads")?,
            d_model: get(pairs, "d_model")?,
            d_ff: get(pairs, "d_ff")?,
            src_vocab: get(pairs, "src_vocab")?,
            tgt_vocab: get(pairs, "tgt_vocab")?,
            max_len: get(pairs, "max_len")?,
            dropout: get(pairs, "dropout")?,
            label_smoothing: get(pairs, "label_smoothing")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sinusoidal position table `[len, d]`, repeated for every sequence in a batch.
pub fn positions<T: Scalar>(batch: usize, len: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![batch * len, d]);
    for b in 0..batch {
        for p in 0..len {
            kernels::sinusoid_row(p, t.row_mut(b * len + p));
        }
    }
    t
}

/// Batch layout for graph forward passes: `batch` sequences of padded length `len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
}

fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Attention<Var>,
    query: Var,
    memory: Var,
    shape: AttnShape,
    key_mask: &[bool],
    causal: bool,
) -> Result<Var> {
    let q = g.linear(query, p.wq, p.bq)?;
    let k = g.matmul(memory, p.wk)?;
    let v = g.linear(memory, p.wv, p.bv)?;
    let a = g.attention(q, k, v, shape, key_mask, causal)?;
    g.linear(a, p.wo, p.bo)
}

fn feed_forward<T: Scalar>(g: &mut Graph<T>, p: &FeedForward<Var>, x: Var) -> Result<Var> {
    let h = g.linear(x, p.w1, p.b1)?;
    let h = g.gelu(h);
    g.linear(h, p.w2, p.b2)
}

fn residual_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    sub: Var,
    norm: &Norm<Var>,
    rate: f64,
    rng: &mut Option<&mut StreamRng>,
) -> Result<Var> {
    let sub = match rng {
        Some(r) => g.dropout(sub, rate, &mut **r),
        None => sub,
    };
    let s = g.add(x, sub)?;
    g.layer_norm(s, norm.gain, norm.bias)
}

fn add_positions<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    layout: SeqLayout,
    cfg: &ModelConfig,
    with_positions: bool,
) -> Result<Var> {
    if layout.len > cfg.max_len {
        return Err(Error::contract(format!(
            "sequence length {} exceeds max length {}",
            layout.len, cfg.max_len
        )));
    }
    if g.value(x).shape() != [layout.batch * layout.len, cfg.d_model] {
        return Err(Error::Shape {
            op: "embeddings",
            left: g.value(x).shape().to_vec(),
            right: vec![layout.batch * layout.len, cfg.d_model],
        });
    }
    if !with_positions {
        return Ok(x);
    }
    let pos = g.constant(positions(layout.batch, layout.len, cfg.d_model));
    g.add(x, pos)
}

/// Encoder stack over (possibly mixed) embeddings `x: [batch*len, d]`.
#[allow(clippy::too_many_arguments)]
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamSet<Var>,
    cfg: &ModelConfig,
    x: Var,
    layout: SeqLayout,
    src_mask: &[bool],
    mut rng: Option<&mut StreamRng>,
    with_positions: bool,
) -> Result<Var> {
    if src_mask.len() != layout.batch * layout.len {
        return Err(Error::contract(format!(
            "source mask length {} does not match {}x{}",
            src_mask.len(),
            layout.batch,
            layout.len
        )));
    }
    let mut h = add_positions(g, x, layout, cfg, with_positions)?;
    if let Some(r) = rng.as_deref_mut() {
        h = g.dropout(h, cfg.dropout, r);
    }
    let shape = AttnShape {
        batch: layout.batch,
        q_len: layout.len,
        k_len: layout.len,
        heads: cfg.num_heads,
    };
    for layer in &p.encoder {
        let a = attention_block(g, &layer.self_attn, h, h, shape, src_mask, false)?;
        h = residual_norm(g, h, a, &layer.norm1, cfg.dropout, &mut rng)?;
        let f = feed_forward(g, &layer.ffn, h)?;
        h = residual_norm(g, h, f, &layer.norm2, cfg.dropout, &mut rng)?;
    }
    Ok(h)
}

/// Decoder stack over teacher-forced input embeddings `y: [batch*tgt_len, d]`;
/// returns logits `[batch*tgt_len, V_tgt]`.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamSet<Var>,
    cfg: &ModelConfig,
    memory: Var,
    src: SeqLayout,
    src_mask: &[bool],
    y: Var,
    tgt: SeqLayout,
    mut rng: Option<&mut StreamRng>,
) -> Result<Var> {
    if src.batch != tgt.batch || src_mask.len() != src.batch * src.len {
        return Err(Error::contract("decoder batch layout does not match encoder"));
    }
    let mut h = add_positions(g, y, tgt, cfg, true)?;
    if let Some(r) = rng.as_deref_mut() {
        h = g.dropout(h, cfg.dropout, r);
    }
    let self_shape = AttnShape {
        batch: tgt.batch,
        q_len: tgt.len,
        k_len: tgt.len,
        heads: cfg.num_heads,
    };
    let cross_shape = AttnShape {
        batch: tgt.batch,
        q_len: tgt.len,
        k_len: src.len,
        heads: cfg.num_heads,
    };
    let self_mask = vec![true; tgt.batch * tgt.len];
    for layer in &p.decoder {
        let a = attention_block(g, &layer.self_attn, h, h, self_shape, &self_mask, true)?;
        h = residual_norm(g, h, a, &layer.norm1, cfg.dropout, &mut rng)?;
        let c = attention_block(g, &layer.cross_attn, h, memory, cross_shape, src_mask, false)?;
        h = residual_norm(g, h, c, &layer.norm2, cfg.dropout, &mut rng)?;
        let f = feed_forward(g, &layer.ffn, h)?;
        h = residual_norm(g, h, f, &layer.norm3, cfg.dropout, &mut rng)?;
    }
    g.linear(h, p.out_w, p.out_b)
}

/// Inputs to one teacher-forced training loss evaluation.
pub struct TrainInputs<'a, T: Scalar> {
    pub src: Var,
    pub src_layout: SeqLayout,
    pub src_mask: &'a [bool],
    pub tgt_in: Var,
    pub tgt_layout: SeqLayout,
    /// Soft label distribution per target position, `[batch*tgt_len, V_tgt]`.
    pub labels: &'a Tensor<T>,
    /// Per-position loss weight; zero excludes the position.
    pub loss_weights: &'a [T],
}

/// Mean soft-label cross entropy of a teacher-forced batch.
pub fn forward_train<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamSet<Var>,
    cfg: &ModelConfig,
    inputs: &TrainInputs<'_, T>,
    mut rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let memory = encode(
        g,
        p,
        cfg,
        inputs.src,
        inputs.src_layout,
        inputs.src_mask,
        rng.as_deref_mut(),
        true,
    )?;
    let logits = decode(
        g,
        p,
        cfg,
        memory,
        inputs.src_layout,
        inputs.src_mask,
        inputs.tgt_in,
        inputs.tgt_layout,
        rng,
    )?;
    g.cross_entropy_weighted(logits, inputs.labels, inputs.loss_weights)
}

/// A model: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedTree::new(seed).stream("init");
        let params = Parameters::init(&config, &mut rng);
        Ok(Transformer { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn embed(table: &Tensor<T>, tokens: &[usize], d: usize) -> Result<Tensor<T>> {
        let scale = T::from_f64((d as f64).sqrt());
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= table.rows() {
                return Err(Error::contract(format!(
                    "token id {t} outside vocabulary of size {}",
                    table.rows()
                )));
            }
            out.extend(table.row(t).iter().map(|&v| v * scale));
        }
        Tensor::new(vec![tokens.len(), d], out)
    }

    /// Source embedding rows scaled by `sqrt(d_model)`, `[I, d]`.
    pub fn embed_source(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        Self::embed(&self.params.src_embed, tokens, self.config.d_model)
    }

    /// Target embedding rows scaled by `sqrt(d_model)`, `[T, d]`.
    pub fn embed_target(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        Self::embed(&self.params.tgt_embed, tokens, self.config.d_model)
    }

    /// Run the encoder over one embedding sequence.
    pub fn encode(&self, embeddings: &Tensor<T>, mask: &[bool]) -> Result<EncoderOutput<T>> {
        infer::encode(self, embeddings, mask, true)
    }

    /// Logits for the position after `prefix` (`[t, d]`, position 0 being the
    /// begin-of-sentence embedding), recomputing the whole prefix.
    pub fn decode_step(&self, enc: &EncoderOutput<T>, prefix: &Tensor<T>) -> Result<Vec<T>> {
        let t = prefix.rows();
        if t == 0 {
            return Err(Error::contract("decode_step needs a non-empty prefix"));
        }
        if t > self.config.max_len {
            return Err(Error::contract(format!(
                "prefix length {t} exceeds max length {}",
                self.config.max_len
            )));
        }
        let mut g = Graph::new();
        let p = self.params.map(|_, t| g.constant(t.clone()));
        let memory = g.constant(enc.hidden.clone());
        let y = g.constant(prefix.clone());
        let src = SeqLayout {
            batch: 1,
            len: enc.mask.len(),
        };
        let logits = decode(
            &mut g,
            &p,
            &self.config,
            memory,
            src,
            &enc.mask,
            y,
            SeqLayout { batch: 1, len: t },
            None,
        )?;
        Ok(g.value(logits).row(t - 1).to_vec())
    }

    /// Incremental decoder with cached self-attention keys and values.
    pub fn incremental<'a>(&'a self, enc: &EncoderOutput<T>) -> IncrementalDecoder<'a, T> {
        IncrementalDecoder::new(self, enc)
    }
}

#[cfg(test)]
mod tests;
