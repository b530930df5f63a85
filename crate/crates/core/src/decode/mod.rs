//! Plain and mixup beam search, and K-way diverse translation.
//!
//! For each sampled partner pair `(x^i, y^i)` the input's source embeddings
//! are interpolated with the partner source, and at every decoder step the
//! previous-token embedding of each beam is interpolated with the partner's
//! target token. Weights are folded Beta draws whose concentration grows as
//! the partner gets closer to the input.

mod beam;

pub use beam::{beam_search, length_normalized, BeamConfig, Hypothesis, StepScorer};

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::corpus::{sample_partners, sample_uniform, LengthBuckets, ParallelCorpus, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{DecoderCache, EncoderOutput, IncrementalDecoder, Transformer};
use crate::par::{self, Execution};
use crate::rng::SeedTree;
use crate::tensor::{kernels, Scalar, Tensor};

/// Smallest sentence distance used when computing partner concentrations.
pub const DISTANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    /// Translations per input.
    pub k: usize,
    pub tau: f64,
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: usize,
    /// Scale each partner's concentration by its distance to the input.
    pub sim_weight: bool,
    /// Draw partners from length buckets around the input length.
    pub len_selection: bool,
    /// Concentration used when `sim_weight` is off; `None` means `tau`.
    pub fixed_alpha: Option<f64>,
    pub seed: u64,
    /// Test hook: every interpolation weight takes this value.
    pub force_lambda: Option<f64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            k: 5,
            tau: 0.3,
            beam: 4,
            length_penalty: 0.6,
            max_len: 64,
            sim_weight: true,
            len_selection: true,
            fixed_alpha: None,
            seed: 1,
            force_lambda: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.beam == 0 {
            return Err(Error::config("beam size must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max output length must be at least 1"));
        }
        if let Some(a) = self.fixed_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config(format!("fixed alpha must be > 0, got {a}")));
            }
        }
        if let Some(l) = self.force_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(format!("forced lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Plain beam settings shared by every partner decode.
    pub fn beam_config(&self, model_max: usize) -> BeamConfig {
        BeamConfig {
            beam: self.beam,
            max_len: self.max_len.min(model_max),
            length_penalty: self.length_penalty,
            bos: BOS,
            eos: EOS,
        }
    }
}

/// Mean of the unscaled embedding rows of `tokens`.
pub fn sentence_embedding<T: Scalar>(tokens: &[usize], table: &Tensor<T>) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::contract("sentence embedding of an empty sequence"));
    }
    let d = table.cols();
    let mut acc = vec![0.0f64; d];
    for &t in tokens {
        if t >= table.rows() {
            return Err(Error::contract(format!("token id {t} outside vocabulary of {}", table.rows())));
        }
        for (a, &v) in acc.iter_mut().zip(table.row(t)) {
            *a += v.to_f64();
        }
    }
    let n = tokens.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Concentration `α = τ + τ/d` for a partner at (floored) distance `d`.
/// Returns `(α, d)`.
pub fn partner_alpha<T: Scalar>(x: &[usize], partner: &[usize], tau: f64, table: &Tensor<T>) -> Result<(f64, f64)> {
    let a = sentence_embedding(x, table)?;
    let b = sentence_embedding(partner, table)?;
    let d = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
        .max(DISTANCE_FLOOR);
    Ok((alpha_from_distance(tau, d), d))
}

pub fn alpha_from_distance(tau: f64, d: f64) -> f64 {
    tau + tau / d.max(DISTANCE_FLOOR)
}

/// `max(β, 1−β)` with `β ~ Beta(α, α)`; always in `[0.5, 1]`.
pub fn sample_step_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::contract(format!("invalid Beta({alpha}, {alpha}): {e}")))?;
    let b: f64 = beta.sample(rng);
    Ok(b.max(1.0 - b))
}

/// Rowwise `λ_t·a_t + (1−λ_t)·b_t`.
pub fn mix_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, lambdas: &[f64]) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || lambdas.len() != a.rows() {
        return Err(Error::Shape {
            op: "mix_rows",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let d = a.cols();
    let mut out = Vec::with_capacity(a.len());
    for (t, &l) in lambdas.iter().enumerate() {
        let (wa, wb) = (T::from_f64(l), T::from_f64(1.0 - l));
        out.extend(a.row(t).iter().zip(b.row(t)).map(|(&x, &y)| wa * x + wb * y));
        debug_assert_eq!(out.len(), (t + 1) * d);
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Partner source aligned to the input length: truncated or padded with `<pad>`.
pub fn align_partner(partner: &[usize], len: usize) -> Vec<usize> {
    (0..len).map(|t| partner.get(t).copied().unwrap_or(PAD)).collect()
}

/// Scaled source embeddings of `x` interpolated tokenwise with the partner.
pub fn mix_source<T: Scalar>(model: &Transformer<T>, x: &[usize], partner: &[usize], lambdas: &[f64]) -> Result<Tensor<T>> {
    let ex = model.embed_source(x)?;
    let ep = model.embed_source(&align_partner(partner, x.len()))?;
    mix_rows(&ex, &ep, lambdas)
}

/// Partner target token fed alongside step `step`: `<s>`, then the partner's
/// tokens, then `</s>` forever.
pub fn partner_target_token(partner_tgt: &[usize], step: usize) -> usize {
    match step {
        0 => BOS,
        s => partner_tgt.get(s - 1).copied().unwrap_or(EOS),
    }
}

/// Next-token scorer over the incremental decoder, optionally mixing each
/// input embedding with a partner target token.
pub struct ModelScorer<'a, T: Scalar> {
    dec: IncrementalDecoder<'a, T>,
    mix: Option<(&'a [usize], &'a [f64])>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn plain(model: &'a Transformer<T>, enc: &EncoderOutput<T>) -> Self {
        ModelScorer {
            dec: model.incremental(enc),
            mix: None,
        }
    }

    /// `lambdas[t]` weights the beam's own token at step `t`.
    pub fn mixed(model: &'a Transformer<T>, enc: &EncoderOutput<T>, partner_tgt: &'a [usize], lambdas: &'a [f64]) -> Self {
        ModelScorer {
            dec: model.incremental(enc),
            mix: Some((partner_tgt, lambdas)),
        }
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    type State = DecoderCache<T>;

    fn start(&self) -> Result<Self::State> {
        Ok(self.dec.new_cache())
    }

    fn advance(&self, cache: &mut Self::State, step: usize, prev: usize) -> Result<Vec<f64>> {
        let model = self.dec.model();
        let own = model.embed_target(&[prev])?;
        let input = match self.mix {
            None => own.into_data(),
            Some((partner, lambdas)) => {
                let l = *lambdas
                    .get(step)
                    .ok_or_else(|| Error::contract(format!("no interpolation weight for step {step}")))?;
                let other = model.embed_target(&[partner_target_token(partner, step)])?;
                mix_rows(&own, &other, &[l])?.into_data()
            }
        };
        let logits = self.dec.step(cache, &input)?;
        let mut lp = vec![T::ZERO; logits.len()];
        kernels::log_softmax(&logits, &mut lp);
        let mut out: Vec<f64> = lp.iter().map(|v| v.to_f64()).collect();
        out[PAD] = f64::NEG_INFINITY;
        out[BOS] = f64::NEG_INFINITY;
        Ok(out)
    }
}

/// Standard beam search from raw source embeddings.
pub fn translate<T: Scalar>(model: &Transformer<T>, x: &[usize], beam: BeamConfig, top_n: usize) -> Result<Vec<Hypothesis>> {
    let emb = model.embed_source(x)?;
    let enc = model.encode(&emb, &vec![true; x.len()])?;
    beam_search(&ModelScorer::plain(model, &enc), &beam, top_n)
}

/// Interpolation weights for one (input, partner) decode.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaTrace {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl LambdaTrace {
    /// Independent folded draws for the encoder positions and decoder steps.
    pub fn sample(tree: &SeedTree, alpha: f64, src_len: usize, steps: usize) -> Result<Self> {
        let mut enc = tree.stream("encoder");
        let mut dec = tree.stream("decoder");
        Ok(LambdaTrace {
            encoder: (0..src_len).map(|_| sample_step_lambda(alpha, &mut enc)).collect::<Result<_>>()?,
            decoder: (0..steps).map(|_| sample_step_lambda(alpha, &mut dec)).collect::<Result<_>>()?,
        })
    }

    pub fn constant(lambda: f64, src_len: usize, steps: usize) -> Self {
        LambdaTrace {
            encoder: vec![lambda; src_len],
            decoder: vec![lambda; steps],
        }
    }
}

/// Beam search with the source and every decoder input mixed with one partner.
pub fn mixup_beam_search<T: Scalar>(
    model: &Transformer<T>,
    x: &[usize],
    partner_src: &[usize],
    partner_tgt: &[usize],
    lambdas: &LambdaTrace,
    beam: BeamConfig,
) -> Result<Hypothesis> {
    if lambdas.encoder.len() != x.len() || lambdas.decoder.len() < beam.max_len {
        return Err(Error::contract("interpolation trace does not cover the input and output lengths"));
    }
    let mixed = mix_source(model, x, partner_src, &lambdas.encoder)?;
    let enc = model.encode(&mixed, &vec![true; x.len()])?;
    let scorer = ModelScorer::mixed(model, &enc, partner_tgt, &lambdas.decoder);
    let mut best = beam_search(&scorer, &beam, 1)?;
    Ok(best.remove(0))
}

/// One of the K translations of an input.
#[derive(Clone, Debug, PartialEq)]
pub struct DiverseHypothesis {
    pub partner_id: usize,
    pub alpha: f64,
    pub distance: f64,
    pub hypothesis: Hypothesis,
    pub lambdas: LambdaTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiverseOutput {
    pub input: Vec<usize>,
    pub hypotheses: Vec<DiverseHypothesis>,
    /// Fewer than K partners were available.
    pub shortfall: bool,
}

/// Read-only context shared by all diverse decodes.
pub struct PartnerPool<'a> {
    pub corpus: &'a ParallelCorpus,
    pub buckets: LengthBuckets,
}

impl<'a> PartnerPool<'a> {
    pub fn new(corpus: &'a ParallelCorpus) -> Result<Self> {
        Ok(PartnerPool {
            corpus,
            buckets: LengthBuckets::build(corpus)?,
        })
    }
}

/// K translations of `x` (the `input_idx`-th input), one per sampled partner,
/// in partner order. `exclude` removes the input's own pair from the pool.
pub fn diverse_translate<T: Scalar>(
    model: &Transformer<T>,
    pool: &PartnerPool<'_>,
    x: &[usize],
    input_idx: usize,
    exclude: Option<usize>,
    cfg: &DecodeConfig,
    exec: Execution,
) -> Result<DiverseOutput> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::contract("cannot translate an empty input"));
    }
    let tree = SeedTree::new(cfg.seed).child("diverse").indexed("input", input_idx as u64);
    let excluded: HashSet<usize> = exclude.into_iter().collect();
    let mut rng = tree.stream("partners");
    let sample = if cfg.len_selection {
        sample_partners(&pool.buckets, x.len(), cfg.k, &mut rng, &excluded)?
    } else {
        sample_uniform(pool.corpus, cfg.k, &mut rng, &excluded)?
    };
    if sample.shortfall {
        log::warn!(
            "input {input_idx}: only {} partners available for K = {}",
            sample.ids.len(),
            cfg.k
        );
    }
    let beam = cfg.beam_config(model.config.max_len);
    let hypotheses = par::try_map(exec, &sample.ids, |i, &pid| {
        let partner = pool.corpus.pair(pid);
        let (alpha, distance) = if cfg.sim_weight {
            partner_alpha(x, &partner.src, cfg.tau, &model.params.src_embed)?
        } else {
            (cfg.fixed_alpha.unwrap_or(cfg.tau), f64::NAN)
        };
        let lambdas = match cfg.force_lambda {
            Some(l) => LambdaTrace::constant(l, x.len(), beam.max_len),
            None => LambdaTrace::sample(&tree.indexed("partner", i as u64), alpha, x.len(), beam.max_len)?,
        };
        let hypothesis = mixup_beam_search(model, x, &partner.src, &partner.tgt, &lambdas, beam)?;
        Ok(DiverseHypothesis {
            partner_id: pid,
            alpha,
            distance,
            hypothesis,
            lambdas,
        })
    })?;
    Ok(DiverseOutput {
        input: x.to_vec(),
        hypotheses,
        shortfall: sample.shortfall,
    })
}

/// Diverse translations of many inputs; inputs run in parallel, each input's
/// partners sequentially, and results keep input order.
pub fn diverse_translate_all<T: Scalar>(
    model: &Transformer<T>,
    pool: &PartnerPool<'_>,
    inputs: &[Vec<usize>],
    exclude: &[Option<usize>],
    cfg: &DecodeConfig,
    exec: Execution,
) -> Result<Vec<DiverseOutput>> {
    if exclude.len() != inputs.len() {
        return Err(Error::contract("one exclusion entry per input is required"));
    }
    par::try_map(exec, inputs, |i, x| {
        diverse_translate(model, pool, x, i, exclude[i], cfg, Execution::Sequential)
    })
}

/// Top-1 beam output for each input, in parallel.
pub fn translate_all<T: Scalar>(model: &Transformer<T>, inputs: &[Vec<usize>], beam: BeamConfig, exec: Execution) -> Result<Vec<Hypothesis>> {
    par::try_map(exec, inputs, |_, x| Ok(translate(model, x, beam, 1)?.remove(0)))
}

#[cfg(test)]
mod tests;
