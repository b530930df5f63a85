//! Parameter layout, generic over the slot type so the same structure holds
//! tensors, graph handles, or anything else keyed by parameter.

use rand::Rng;

use super::ModelConfig;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<P> {
    pub wq: P,
    pub bq: P,
    /// No key bias: it shifts every score of a query equally and cancels in the softmax.
    pub wk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gain: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<P> {
    pub self_attn: Attention<P>,
    pub norm1: Norm<P>,
    pub ffn: FeedForward<P>,
    pub norm2: Norm<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<P> {
    pub self_attn: Attention<P>,
    pub norm1: Norm<P>,
    pub cross_attn: Attention<P>,
    pub norm2: Norm<P>,
    pub ffn: FeedForward<P>,
    pub norm3: Norm<P>,
}

/// Every trainable quantity of the transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<P> {
    pub src_embed: P,
    pub tgt_embed: P,
    pub encoder: Vec<EncoderLayer<P>>,
    pub decoder: Vec<DecoderLayer<P>>,
    pub out_w: P,
    pub out_b: P,
}

/// Parameters stored as dense tensors.
pub type Parameters<T = f32> = ParamSet<Tensor<T>>;

impl<P> Attention<P> {
    fn map<Q, E>(&self, pre: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<Attention<Q>, E> {
        Ok(Attention {
            wq: f(&format!("{pre}.wq"), &self.wq)?,
            bq: f(&format!("{pre}.bq"), &self.bq)?,
            wk: f(&format!("{pre}.wk"), &self.wk)?,
            wv: f(&format!("{pre}.wv"), &self.wv)?,
            bv: f(&format!("{pre}.bv"), &self.bv)?,
            wo: f(&format!("{pre}.wo"), &self.wo)?,
            bo: f(&format!("{pre}.bo"), &self.bo)?,
        })
    }

    fn refs<'a>(&'a self, pre: &str, out: &mut Vec<(String, &'a P)>) {
        for (n, p) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            out.push((format!("{pre}.{n}"), p));
        }
    }

    fn refs_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.extend([
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]);
    }
}

impl<P> FeedForward<P> {
    fn map<Q, E>(&self, pre: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<FeedForward<Q>, E> {
        Ok(FeedForward {
            w1: f(&format!("{pre}.w1"), &self.w1)?,
            b1: f(&format!("{pre}.b1"), &self.b1)?,
            w2: f(&format!("{pre}.w2"), &self.w2)?,
            b2: f(&format!("{pre}.b2"), &self.b2)?,
        })
    }

    fn refs<'a>(&'a self, pre: &str, out: &mut Vec<(String, &'a P)>) {
        for (n, p) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            out.push((format!("{pre}.{n}"), p));
        }
    }

    fn refs_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.extend([&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]);
    }
}

impl<P> Norm<P> {
    fn map<Q, E>(&self, pre: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<Norm<Q>, E> {
        Ok(Norm {
            gain: f(&format!("{pre}.gain"), &self.gain)?,
            bias: f(&format!("{pre}.bias"), &self.bias)?,
        })
    }

    fn refs<'a>(&'a self, pre: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{pre}.gain"), &self.gain));
        out.push((format!("{pre}.bias"), &self.bias));
    }

    fn refs_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.extend([&mut self.gain, &mut self.bias]);
    }
}

impl<P> ParamSet<P> {
    /// Map every slot, visiting in canonical order with its dotted name.
    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&str, &P) -> Result<Q, E>) -> Result<ParamSet<Q>, E> {
        let src_embed = f("src_embed", &self.src_embed)?;
        let tgt_embed = f("tgt_embed", &self.tgt_embed)?;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for (i, l) in self.encoder.iter().enumerate() {
            let pre = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                self_attn: l.self_attn.map(&format!("{pre}.self_attn"), &mut f)?,
                norm1: l.norm1.map(&format!("{pre}.norm1"), &mut f)?,
                ffn: l.ffn.map(&format!("{pre}.ffn"), &mut f)?,
                norm2: l.norm2.map(&format!("{pre}.norm2"), &mut f)?,
            });
        }
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (i, l) in self.decoder.iter().enumerate() {
            let pre = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                self_attn: l.self_attn.map(&format!("{pre}.self_attn"), &mut f)?,
                norm1: l.norm1.map(&format!("{pre}.norm1"), &mut f)?,
                cross_attn: l.cross_attn.map(&format!("{pre}.cross_attn"), &mut f)?,
                norm2: l.norm2.map(&format!("{pre}.norm2"), &mut f)?,
                ffn: l.ffn.map(&format!("{pre}.ffn"), &mut f)?,
                norm3: l.norm3.map(&format!("{pre}.norm3"), &mut f)?,
            });
        }
        let out_w = f("out_w", &self.out_w)?;
        let out_b = f("out_b", &self.out_b)?;
        Ok(ParamSet {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ParamSet<Q> {
        self.try_map(|n, p| Ok::<_, std::convert::Infallible>(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    /// Named references in canonical order (same order as [`ParamSet::try_map`]).
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("src_embed".to_string(), &self.src_embed),
            ("tgt_embed".to_string(), &self.tgt_embed),
        ];
        for (i, l) in self.encoder.iter().enumerate() {
            let pre = format!("encoder.{i}");
            l.self_attn.refs(&format!("{pre}.self_attn"), &mut out);
            l.norm1.refs(&format!("{pre}.norm1"), &mut out);
            l.ffn.refs(&format!("{pre}.ffn"), &mut out);
            l.norm2.refs(&format!("{pre}.norm2"), &mut out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            let pre = format!("decoder.{i}");
            l.self_attn.refs(&format!("{pre}.self_attn"), &mut out);
            l.norm1.refs(&format!("{pre}.norm1"), &mut out);
            l.cross_attn.refs(&format!("{pre}.cross_attn"), &mut out);
            l.norm2.refs(&format!("{pre}.norm2"), &mut out);
            l.ffn.refs(&format!("{pre}.ffn"), &mut out);
            l.norm3.refs(&format!("{pre}.norm3"), &mut out);
        }
        out.push(("out_w".to_string(), &self.out_w));
        out.push(("out_b".to_string(), &self.out_b));
        out
    }

    /// Mutable references in canonical order.
    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.src_embed, &mut self.tgt_embed];
        for l in self.encoder.iter_mut() {
            l.self_attn.refs_mut(&mut out);
            l.norm1.refs_mut(&mut out);
            l.ffn.refs_mut(&mut out);
            l.norm2.refs_mut(&mut out);
        }
        for l in self.decoder.iter_mut() {
            l.self_attn.refs_mut(&mut out);
            l.norm1.refs_mut(&mut out);
            l.cross_attn.refs_mut(&mut out);
            l.norm2.refs_mut(&mut out);
            l.ffn.refs_mut(&mut out);
            l.norm3.refs_mut(&mut out);
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn slots(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }
}

impl<T: Scalar> Parameters<T> {
    /// Xavier-uniform weights, N(0, d^-1/2) embeddings, zero biases, unit gains.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let mut xavier = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| T::from_f64(rng.random_range(-limit..limit)))
                .collect();
            Tensor::new(vec![rows, cols], data).expect("sized")
        };
        let zeros = |n: usize| Tensor::zeros(vec![n]);
        let ones = |n: usize| Tensor::new(vec![n], vec![T::ONE; n]).expect("sized");
        let attn = |xavier: &mut dyn FnMut(usize, usize) -> Tensor<T>| Attention {
            wq: xavier(d, d),
            bq: zeros(d),
            wk: xavier(d, d),
            wv: xavier(d, d),
            bv: zeros(d),
            wo: xavier(d, d),
            bo: zeros(d),
        };
        let norm = || Norm {
            gain: ones(d),
            bias: zeros(d),
        };
        let mut encoder = Vec::new();
        for _ in 0..cfg.num_layers {
            let self_attn = attn(&mut xavier);
            let ffn = FeedForward {
                w1: xavier(d, cfg.d_ff),
                b1: zeros(cfg.d_ff),
                w2: xavier(cfg.d_ff, d),
                b2: zeros(d),
            };
            encoder.push(EncoderLayer {
                self_attn,
                norm1: norm(),
                ffn,
                norm2: norm(),
            });
        }
        let mut decoder = Vec::new();
        for _ in 0..cfg.num_layers {
            let self_attn = attn(&mut xavier);
            let cross_attn = attn(&mut xavier);
            let ffn = FeedForward {
                w1: xavier(d, cfg.d_ff),
                b1: zeros(cfg.d_ff),
                w2: xavier(cfg.d_ff, d),
                b2: zeros(d),
            };
            decoder.push(DecoderLayer {
                self_attn,
                norm1: norm(),
                cross_attn,
                norm2: norm(),
                ffn,
                norm3: norm(),
            });
        }
        let out_w = xavier(d, cfg.tgt_vocab);
        let std = 1.0 / (d as f64).sqrt();
        let mut normal_table = |rows: usize| {
            let dist = rand_distr::Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * d)
                .map(|_| T::from_f64(rand_distr::Distribution::sample(&dist, rng)))
                .collect();
            Tensor::new(vec![rows, d], data).expect("sized")
        };
        let src_embed = normal_table(cfg.src_vocab);
        let tgt_embed = normal_table(cfg.tgt_vocab);
        ParamSet {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_w,
            out_b: zeros(cfg.tgt_vocab),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        self.map(|_, t| t.cast())
    }

    pub fn all_finite(&self) -> bool {
        self.slots().iter().all(|t| t.all_finite())
    }

    pub fn num_scalars(&self) -> usize {
        self.slots().iter().map(|t| t.len()).sum()
    }
}
