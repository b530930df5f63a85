//! Teacher-forced training with optional sentence-pair mixup.
//!
//! A mixed example interpolates two pairs on both sides with one weight
//! `λ ~ Beta(α, α)`. Embeddings are mixed tokenwise after padding both sides
//! to the longer length. Each target position carries loss weight
//! `λ·[real in i] + (1−λ)·[real in j]` and a label distribution normalized by
//! that weight, so the loss is the λ-weighted mixture of the two sequence
//! losses and `λ = 1` reproduces plain training exactly.

use std::io::Write;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use crate::corpus::{ParallelCorpus, SentencePair, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{forward_train, ModelConfig, ParamSet, SeqLayout, TrainInputs, Transformer};
use crate::rng::SeedTree;
use crate::tensor::{AdamConfig, AdamState, Graph, Scalar, Tensor, Var};

/// Mixup on/off plus the Beta concentration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
    /// Test hook: use this λ for every example instead of sampling.
    pub force_lambda: Option<f64>,
}

impl MixupConfig {
    pub fn disabled() -> Self {
        MixupConfig {
            alpha: 1.0,
            enabled: false,
            force_lambda: None,
        }
    }

    pub fn with_alpha(alpha: f64) -> Self {
        MixupConfig {
            alpha,
            enabled: true,
            force_lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("mixup alpha must be > 0, got {}", self.alpha)));
        }
        if let Some(l) = self.force_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(format!("forced lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draws one interpolation weight from `Beta(α, α)`.
pub fn sample_pair_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::config(format!("invalid Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

/// Index-level description of a (possibly mixed) teacher-forcing batch.
///
/// Embedding row `r` is `wa[r]·E[ids_a[r]] + wb[r]·E[ids_b[r]]`, scaled by
/// √d. Plain batches have no `b` side.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan<T: Scalar = f32> {
    pub src_layout: SeqLayout,
    pub tgt_layout: SeqLayout,
    pub src_a: Vec<usize>,
    pub src_b: Option<Vec<usize>>,
    pub tgt_a: Vec<usize>,
    pub tgt_b: Option<Vec<usize>>,
    /// Per-row weights of the `a` and `b` constituents (same for source and target rows of an example).
    pub src_weights: Option<(Vec<T>, Vec<T>)>,
    pub tgt_weights: Option<(Vec<T>, Vec<T>)>,
    pub src_mask: Vec<bool>,
    pub labels: Tensor<T>,
    pub loss_weights: Vec<T>,
    pub lambdas: Vec<f64>,
    /// Real target tokens (including `</s>`) of the `a` constituents.
    pub tokens: usize,
}

/// Mixed batch with realized embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch<T: Scalar = f32> {
    /// `[B*L_src, d]`
    pub src_embeddings: Tensor<T>,
    /// `[B*L_tgt, d]`
    pub tgt_embeddings: Tensor<T>,
    pub plan: BatchPlan<T>,
}

impl<T: Scalar> MixedBatch<T> {
    pub fn labels(&self) -> &Tensor<T> {
        &self.plan.labels
    }

    pub fn loss_mask(&self) -> Vec<bool> {
        self.plan.loss_weights.iter().map(|w| *w > T::ZERO).collect()
    }
}

fn target_label(pair: &SentencePair, t: usize) -> Option<usize> {
    match t.cmp(&pair.tgt.len()) {
        std::cmp::Ordering::Less => Some(pair.tgt[t]),
        std::cmp::Ordering::Equal => Some(EOS),
        std::cmp::Ordering::Greater => None,
    }
}

fn target_input(pair: &SentencePair, t: usize) -> usize {
    match t {
        0 => BOS,
        _ => pair.tgt.get(t - 1).copied().unwrap_or(PAD),
    }
}

fn smooth_row<T: Scalar>(row: &mut [T], eps: f64) {
    let keep = T::from_f64(1.0 - eps);
    let floor = T::from_f64(eps / row.len() as f64);
    for x in row {
        *x = keep * *x + floor;
    }
}

impl<T: Scalar> BatchPlan<T> {
    /// Standard teacher-forcing batch.
    pub fn plain(pairs: &[&SentencePair], tgt_vocab: usize, eps: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let b = pairs.len();
        let ls = pairs.iter().map(|p| p.src.len()).max().unwrap_or(0).max(1);
        let lt = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap_or(1);
        let mut plan = Self::empty(b, ls, lt, tgt_vocab);
        for (e, p) in pairs.iter().enumerate() {
            for s in 0..ls {
                plan.src_a[e * ls + s] = p.src.get(s).copied().unwrap_or(PAD);
                plan.src_mask[e * ls + s] = s < p.src.len();
            }
            for t in 0..lt {
                let r = e * lt + t;
                plan.tgt_a[r] = target_input(p, t);
                if let Some(l) = target_label(p, t) {
                    let row = plan.labels.row_mut(r);
                    row[l] = T::ONE;
                    smooth_row(row, eps);
                    plan.loss_weights[r] = T::ONE;
                    plan.tokens += 1;
                }
            }
        }
        plan.lambdas = vec![1.0; b];
        Ok(plan)
    }

    /// Mixed batch: example `e` interpolates `pairs_i[e]` and `pairs_j[e]` with weight `lambdas[e]`.
    pub fn mixed(
        pairs_i: &[&SentencePair],
        pairs_j: &[&SentencePair],
        lambdas: &[f64],
        tgt_vocab: usize,
        eps: f64,
    ) -> Result<Self> {
        if pairs_i.len() != pairs_j.len() || pairs_i.len() != lambdas.len() {
            return Err(Error::contract(format!(
                "mixup batch sizes differ: {} pairs_i, {} pairs_j, {} lambdas",
                pairs_i.len(),
                pairs_j.len(),
                lambdas.len()
            )));
        }
        if pairs_i.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::contract(format!("lambda {l} outside [0, 1]")));
        }
        let b = pairs_i.len();
        let both = pairs_i.iter().chain(pairs_j);
        let ls = both.clone().map(|p| p.src.len()).max().unwrap_or(0).max(1);
        let lt = both.map(|p| p.tgt.len() + 1).max().unwrap_or(1);
        let mut plan = Self::empty(b, ls, lt, tgt_vocab);
        let mut src_b = vec![PAD; b * ls];
        let mut tgt_b = vec![PAD; b * lt];
        let (mut swa, mut swb) = (vec![T::ZERO; b * ls], vec![T::ZERO; b * ls]);
        let (mut twa, mut twb) = (vec![T::ZERO; b * lt], vec![T::ZERO; b * lt]);
        for e in 0..b {
            let (pi, pj, lam) = (pairs_i[e], pairs_j[e], lambdas[e]);
            let (wa, wb) = (T::from_f64(lam), T::from_f64(1.0 - lam));
            for s in 0..ls {
                let r = e * ls + s;
                plan.src_a[r] = pi.src.get(s).copied().unwrap_or(PAD);
                src_b[r] = pj.src.get(s).copied().unwrap_or(PAD);
                swa[r] = wa;
                swb[r] = wb;
                plan.src_mask[r] = (lam > 0.0 && s < pi.src.len()) || (lam < 1.0 && s < pj.src.len());
            }
            for t in 0..lt {
                let r = e * lt + t;
                plan.tgt_a[r] = target_input(pi, t);
                tgt_b[r] = target_input(pj, t);
                twa[r] = wa;
                twb[r] = wb;
                let la = target_label(pi, t);
                let lb = target_label(pj, t);
                let mass_a = if la.is_some() { lam } else { 0.0 };
                let mass_b = if lb.is_some() { 1.0 - lam } else { 0.0 };
                let w = mass_a + mass_b;
                if w == 0.0 {
                    continue;
                }
                let row = plan.labels.row_mut(r);
                if let Some(l) = la {
                    row[l] += T::from_f64(mass_a / w);
                }
                if let Some(l) = lb {
                    row[l] += T::from_f64(mass_b / w);
                }
                smooth_row(row, eps);
                plan.loss_weights[r] = T::from_f64(w);
                if la.is_some() {
                    plan.tokens += 1;
                }
            }
        }
        plan.src_b = Some(src_b);
        plan.tgt_b = Some(tgt_b);
        plan.src_weights = Some((swa, swb));
        plan.tgt_weights = Some((twa, twb));
        plan.lambdas = lambdas.to_vec();
        Ok(plan)
    }

    fn empty(b: usize, ls: usize, lt: usize, v: usize) -> Self {
        BatchPlan {
            src_layout: SeqLayout { batch: b, len: ls },
            tgt_layout: SeqLayout { batch: b, len: lt },
            src_a: vec![PAD; b * ls],
            src_b: None,
            tgt_a: vec![PAD; b * lt],
            tgt_b: None,
            src_weights: None,
            tgt_weights: None,
            src_mask: vec![false; b * ls],
            labels: Tensor::zeros(vec![b * lt, v]),
            loss_weights: vec![T::ZERO; b * lt],
            lambdas: Vec::new(),
            tokens: 0,
        }
    }

    /// Mixed source and target-input embeddings as graph nodes.
    pub fn embed(&self, g: &mut Graph<T>, p: &ParamSet<Var>, d_model: usize) -> Result<(Var, Var)> {
        let scale = T::from_f64((d_model as f64).sqrt());
        let side = |g: &mut Graph<T>,
                    table: Var,
                    a: &[usize],
                    b: Option<&Vec<usize>>,
                    w: Option<&(Vec<T>, Vec<T>)>|
         -> Result<Var> {
            let ea = g.gather(table, a)?;
            let ea = g.scale(ea, scale);
            match (b, w) {
                (Some(b), Some((wa, wb))) => {
                    let eb = g.gather(table, b)?;
                    let eb = g.scale(eb, scale);
                    let xa = g.scale_rows(ea, wa.clone())?;
                    let xb = g.scale_rows(eb, wb.clone())?;
                    g.add(xa, xb)
                }
                _ => Ok(ea),
            }
        };
        let src = side(g, p.src_embed, &self.src_a, self.src_b.as_ref(), self.src_weights.as_ref())?;
        let tgt = side(g, p.tgt_embed, &self.tgt_a, self.tgt_b.as_ref(), self.tgt_weights.as_ref())?;
        Ok((src, tgt))
    }

    /// Builds the training loss for this batch on `g`.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        p: &ParamSet<Var>,
        cfg: &ModelConfig,
        rng: Option<&mut crate::rng::StreamRng>,
    ) -> Result<Var> {
        let (src, tgt_in) = self.embed(g, p, cfg.d_model)?;
        let inputs = TrainInputs {
            src,
            src_layout: self.src_layout,
            src_mask: &self.src_mask,
            tgt_in,
            tgt_layout: self.tgt_layout,
            labels: &self.labels,
            loss_weights: &self.loss_weights,
        };
        forward_train(g, p, cfg, &inputs, rng)
    }
}

/// Realizes a mixed batch: interpolated embeddings, soft labels and masks.
pub fn build_mixed_batch<T: Scalar>(
    pairs_i: &[&SentencePair],
    pairs_j: &[&SentencePair],
    lambdas: &[f64],
    model: &Transformer<T>,
    eps: f64,
) -> Result<MixedBatch<T>> {
    let plan = BatchPlan::mixed(pairs_i, pairs_j, lambdas, model.config.tgt_vocab, eps)?;
    realize(plan, model)
}

/// Realizes a plain teacher-forcing batch in the same form as [`build_mixed_batch`].
pub fn build_plain_batch<T: Scalar>(pairs: &[&SentencePair], model: &Transformer<T>, eps: f64) -> Result<MixedBatch<T>> {
    let plan = BatchPlan::plain(pairs, model.config.tgt_vocab, eps)?;
    realize(plan, model)
}

fn realize<T: Scalar>(plan: BatchPlan<T>, model: &Transformer<T>) -> Result<MixedBatch<T>> {
    let mut g = Graph::new();
    let p = model.params.map(|_, t| g.constant(t.clone()));
    let (s, t) = plan.embed(&mut g, &p, model.config.d_model)?;
    Ok(MixedBatch {
        src_embeddings: g.value(s).clone(),
        tgt_embeddings: g.value(t).clone(),
        plan,
    })
}

/// Endless shuffled pass over pair ids; reshuffles at each epoch with its own stream.
#[derive(Clone, Debug)]
struct BatchStream {
    tree: SeedTree,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl BatchStream {
    fn new(tree: SeedTree, n: usize) -> Self {
        let mut s = BatchStream {
            tree,
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.tree.indexed_stream("epoch", self.epoch));
    }

    fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.pos = 0;
        self.shuffle();
    }

    /// Next batch under a target-token budget; never crosses an epoch boundary.
    fn next_budget(&mut self, corpus: &ParallelCorpus, budget: usize) -> (Vec<usize>, bool) {
        let mut ids = Vec::new();
        let mut tokens = 0;
        while self.pos < self.order.len() {
            let id = self.order[self.pos];
            let t = corpus.pair(id).tgt.len() + 1;
            if !ids.is_empty() && tokens + t > budget {
                break;
            }
            ids.push(id);
            tokens += t;
            self.pos += 1;
        }
        let ended = self.pos == self.order.len();
        if ended {
            self.advance_epoch();
        }
        (ids, ended)
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(n);
        while ids.len() < n {
            if self.pos == self.order.len() {
                self.advance_epoch();
            }
            ids.push(self.order[self.pos]);
            self.pos += 1;
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_tokens: usize,
    pub mixup: MixupConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Emit a log line every this many steps (0 disables).
    pub log_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens must be positive"));
        }
        self.mixup.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub steps: u64,
    pub mean_loss: f64,
    pub tokens: usize,
    pub losses: Vec<f64>,
}

impl EpochStats {
    fn push(&mut self, s: &StepStats) {
        self.steps += 1;
        self.tokens += s.tokens;
        self.losses.push(s.loss);
        self.mean_loss = self.losses.iter().sum::<f64>() / self.losses.len() as f64;
    }
}

/// Training loop state. Batch order and all per-step randomness are pure
/// functions of the seed and the step index, so a resumed run continues
/// exactly where a saved one stopped.
pub struct Trainer {
    pub model: Transformer<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    tree: SeedTree,
    stream_a: BatchStream,
    stream_b: BatchStream,
}

impl Trainer {
    pub fn new(model: Transformer<f32>, config: TrainConfig, corpus: &ParallelCorpus) -> Result<Self> {
        let adam = AdamState::new(config.adam, model.params.slots().into_iter().map(|t| t.shape()));
        Self::resume(model, adam, config, corpus)
    }

    /// Continues from an optimizer state (its step counter selects the batch position).
    pub fn resume(
        model: Transformer<f32>,
        adam: AdamState<f32>,
        config: TrainConfig,
        corpus: &ParallelCorpus,
    ) -> Result<Self> {
        config.validate()?;
        model.config.validate()?;
        if corpus.is_empty() {
            return Err(Error::contract("training corpus is empty"));
        }
        let too_long = corpus.max_src_len().max(corpus.max_tgt_len() + 1);
        if too_long > model.config.max_len {
            return Err(Error::config(format!(
                "corpus sequences of length {too_long} exceed model max_len {}",
                model.config.max_len
            )));
        }
        let tree = SeedTree::new(config.seed).child("train");
        let mut t = Trainer {
            stream_a: BatchStream::new(tree.child("stream_a"), corpus.len()),
            stream_b: BatchStream::new(tree.child("stream_b"), corpus.len()),
            tree,
            model,
            adam,
            config,
        };
        for _ in 0..t.adam.step {
            t.next_ids(corpus);
        }
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Pair ids of the next primary batch, without consuming it.
    pub fn peek_batch(&self, corpus: &ParallelCorpus) -> Vec<usize> {
        self.stream_a.clone().next_budget(corpus, self.config.batch_tokens).0
    }

    fn next_ids(&mut self, corpus: &ParallelCorpus) -> (Vec<usize>, Option<Vec<usize>>, bool) {
        let (a, ended) = self.stream_a.next_budget(corpus, self.config.batch_tokens);
        let b = self.config.mixup.enabled.then(|| self.stream_b.take(a.len()));
        (a, b, ended)
    }

    fn plan(&self, corpus: &ParallelCorpus, a: &[usize], b: Option<&[usize]>, step: u64) -> Result<BatchPlan<f32>> {
        let cfg = &self.model.config;
        let pa: Vec<&SentencePair> = a.iter().map(|&i| corpus.pair(i)).collect();
        match b {
            None => BatchPlan::plain(&pa, cfg.tgt_vocab, cfg.label_smoothing),
            Some(b) => {
                let pb: Vec<&SentencePair> = b.iter().map(|&i| corpus.pair(i)).collect();
                let mix = &self.config.mixup;
                let lambdas = match mix.force_lambda {
                    Some(l) => vec![l; a.len()],
                    None => {
                        let mut rng = self.tree.indexed_stream("lambda", step);
                        (0..a.len())
                            .map(|_| sample_pair_lambda(mix.alpha, &mut rng))
                            .collect::<Result<_>>()?
                    }
                };
                BatchPlan::mixed(&pa, &pb, &lambdas, cfg.tgt_vocab, cfg.label_smoothing)
            }
        }
    }

    /// One optimizer step; returns its statistics and whether it closed an epoch.
    pub fn step(&mut self, corpus: &ParallelCorpus) -> Result<(StepStats, bool)> {
        let step = self.adam.step;
        let (a, b, ended) = self.next_ids(corpus);
        let plan = self.plan(corpus, &a, b.as_deref(), step)?;
        let mut g = Graph::new();
        let p = self.model.params.map(|_, t| g.param(t.clone()));
        let mut drop_rng = self.tree.indexed_stream("dropout", step);
        let loss_var = plan.loss(&mut g, &p, &self.model.config, Some(&mut drop_rng))?;
        let loss = g.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, loss });
        }
        g.backward(loss_var)?;
        let grads: Vec<&[f32]> = p
            .slots()
            .into_iter()
            .map(|v| g.grad(*v).expect("parameter gradient"))
            .collect();
        let lr = self.adam.next_lr();
        let mut slots = self.model.params.slots_mut();
        self.adam.step(&mut slots, &grads)?;
        Ok((
            StepStats {
                step: step + 1,
                loss,
                lr,
                tokens: plan.tokens,
            },
            ended,
        ))
    }

    fn log(&self, s: &StepStats, log: &mut Option<&mut dyn Write>) -> Result<()> {
        if self.config.log_every == 0 || !s.step.is_multiple_of(self.config.log_every) {
            return Ok(());
        }
        let line = format!("{} {:.6} {:.6e} {}", s.step, s.loss, s.lr, s.tokens);
        log::info!("{line}");
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    }

    /// Trains until the primary stream finishes its current epoch.
    pub fn train_epoch(&mut self, corpus: &ParallelCorpus, mut log: Option<&mut dyn Write>) -> Result<EpochStats> {
        let mut stats = EpochStats::default();
        loop {
            let (s, ended) = self.step(corpus)?;
            self.log(&s, &mut log)?;
            stats.push(&s);
            if ended {
                return Ok(stats);
            }
        }
    }

    pub fn train_steps(
        &mut self,
        corpus: &ParallelCorpus,
        steps: u64,
        mut log: Option<&mut dyn Write>,
    ) -> Result<EpochStats> {
        let mut stats = EpochStats::default();
        for _ in 0..steps {
            let (s, _) = self.step(corpus)?;
            self.log(&s, &mut log)?;
            stats.push(&s);
        }
        Ok(stats)
    }
}
