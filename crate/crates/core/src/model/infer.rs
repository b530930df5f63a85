//! Tape-free forward passes for decoding.

use super::{FeedForward, Norm, Transformer};
use crate::error::{Error, Result};
use crate::tensor::{kernels, AttnShape, Scalar, Tensor};

/// Encoder hidden states for one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T: Scalar = f32> {
    /// `[I, d_model]`
    pub hidden: Tensor<T>,
    /// `true` for real (attendable) source positions.
    pub mask: Vec<bool>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

fn project<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::ZERO; rows * n];
    kernels::matmul(x, w.data(), rows, k, n, &mut out);
    out
}

fn linear<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let n = w.shape()[1];
    let mut out = project(x, rows, w);
    for row in out.chunks_mut(n) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    out
}

fn residual_norm<T: Scalar>(h: &mut Vec<T>, sub: &[T], d: usize, norm: &Norm<Tensor<T>>) {
    for (a, &s) in h.iter_mut().zip(sub) {
        *a += s;
    }
    let mut out = vec![T::ZERO; h.len()];
    kernels::layer_norm(h, d, norm.gain.data(), norm.bias.data(), &mut out, None);
    *h = out;
}

fn feed_forward<T: Scalar>(h: &[T], rows: usize, p: &FeedForward<Tensor<T>>) -> Vec<T> {
    let mut inner = linear(h, rows, &p.w1, &p.b1);
    for v in inner.iter_mut() {
        *v = kernels::gelu(*v);
    }
    linear(&inner, rows, &p.w2, &p.b2)
}

pub(crate) fn encode<T: Scalar>(
    model: &Transformer<T>,
    embeddings: &Tensor<T>,
    mask: &[bool],
    with_positions: bool,
) -> Result<EncoderOutput<T>> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let len = embeddings.rows();
    if embeddings.shape() != [len, d] {
        return Err(Error::Shape {
            op: "encode",
            left: embeddings.shape().to_vec(),
            right: vec![len, d],
        });
    }
    if mask.len() != len {
        return Err(Error::contract(format!(
            "mask length {} does not match source length {len}",
            mask.len()
        )));
    }
    if len == 0 || len > cfg.max_len {
        return Err(Error::contract(format!(
            "source length {len} outside [1, {}]",
            cfg.max_len
        )));
    }
    let mut h = embeddings.data().to_vec();
    if with_positions {
        let pos = super::positions::<T>(1, len, d);
        for (a, &p) in h.iter_mut().zip(pos.data()) {
            *a += p;
        }
    }
    let shape = AttnShape {
        batch: 1,
        q_len: len,
        k_len: len,
        heads: cfg.num_heads,
    };
    for layer in &model.params.encoder {
        let a = &layer.self_attn;
        let q = linear(&h, len, &a.wq, &a.bq);
        let k = project(&h, len, &a.wk);
        let v = linear(&h, len, &a.wv, &a.bv);
        let ctx = kernels::attention_forward(&q, &k, &v, d, shape, mask, false, None);
        let o = linear(&ctx, len, &a.wo, &a.bo);
        residual_norm(&mut h, &o, d, &layer.norm1);
        let f = feed_forward(&h, len, &layer.ffn);
        residual_norm(&mut h, &f, d, &layer.norm2);
    }
    Ok(EncoderOutput {
        hidden: Tensor::new(vec![len, d], h)?,
        mask: mask.to_vec(),
    })
}

/// Per-hypothesis self-attention cache.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderCache<T: Scalar = f32> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> DecoderCache<T> {
    /// Number of positions already consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Step-at-a-time decoder bound to one encoder output. Cross-attention keys
/// and values are projected once and shared by every hypothesis.
pub struct IncrementalDecoder<'a, T: Scalar = f32> {
    model: &'a Transformer<T>,
    cross: Vec<(Vec<T>, Vec<T>)>,
    src_mask: Vec<bool>,
}

impl<'a, T: Scalar> IncrementalDecoder<'a, T> {
    pub(crate) fn new(model: &'a Transformer<T>, enc: &EncoderOutput<T>) -> Self {
        let len = enc.len();
        let cross = model
            .params
            .decoder
            .iter()
            .map(|l| {
                let a = &l.cross_attn;
                (
                    project(enc.hidden.data(), len, &a.wk),
                    linear(enc.hidden.data(), len, &a.wv, &a.bv),
                )
            })
            .collect();
        IncrementalDecoder {
            model,
            cross,
            src_mask: enc.mask.clone(),
        }
    }

    pub fn model(&self) -> &Transformer<T> {
        self.model
    }

    pub fn new_cache(&self) -> DecoderCache<T> {
        let n = self.model.params.decoder.len();
        DecoderCache {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Feed the (already mixed and scaled) input embedding for the next
    /// position and return the logits predicted at that position.
    pub fn step(&self, cache: &mut DecoderCache<T>, input: &[T]) -> Result<Vec<T>> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        if input.len() != d {
            return Err(Error::Shape {
                op: "decode step",
                left: vec![input.len()],
                right: vec![d],
            });
        }
        let pos = cache.len;
        if pos >= cfg.max_len {
            return Err(Error::contract(format!(
                "prefix length {} exceeds max length {}",
                pos + 1,
                cfg.max_len
            )));
        }
        let mut h = input.to_vec();
        let mut pe = vec![T::ZERO; d];
        kernels::sinusoid_row(pos, &mut pe);
        for (a, &p) in h.iter_mut().zip(&pe) {
            *a += p;
        }
        let self_mask = vec![true; pos + 1];
        let src_len = self.src_mask.len();
        for (l, layer) in self.model.params.decoder.iter().enumerate() {
            let a = &layer.self_attn;
            let q = linear(&h, 1, &a.wq, &a.bq);
            cache.keys[l].extend(project(&h, 1, &a.wk));
            cache.values[l].extend(linear(&h, 1, &a.wv, &a.bv));
            let shape = AttnShape {
                batch: 1,
                q_len: 1,
                k_len: pos + 1,
                heads: cfg.num_heads,
            };
            let ctx = kernels::attention_forward(&q, &cache.keys[l], &cache.values[l], d, shape, &self_mask, false, None);
            let o = linear(&ctx, 1, &a.wo, &a.bo);
            residual_norm(&mut h, &o, d, &layer.norm1);

            let c = &layer.cross_attn;
            let q = linear(&h, 1, &c.wq, &c.bq);
            let shape = AttnShape {
                batch: 1,
                q_len: 1,
                k_len: src_len,
                heads: cfg.num_heads,
            };
            let (ck, cv) = &self.cross[l];
            let ctx = kernels::attention_forward(&q, ck, cv, d, shape, &self.src_mask, false, None);
            let o = linear(&ctx, 1, &c.wo, &c.bo);
            residual_norm(&mut h, &o, d, &layer.norm2);

            let f = feed_forward(&h, 1, &layer.ffn);
            residual_norm(&mut h, &f, d, &layer.norm3);
        }
        cache.len += 1;
        let p = &self.model.params;
        Ok(linear(&h, 1, &p.out_w, &p.out_b))
    }
}
