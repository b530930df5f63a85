use super::*;
use crate::corpus::ParallelText;
use crate::model::ModelConfig;
use crate::rng::hash_index;
use proptest::prelude::*;

/// Three-token table model: 0 ends, 1 and 2 are words. Logits are a fixed
/// function of the whole prefix.
struct Table {
    never_end: bool,
}

const T_EOS: usize = 0;
const T_BOS: usize = 3;

fn table_logits(prefix: &[usize]) -> [f64; 3] {
    let key = prefix.iter().fold(17u64, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64 + 1));
    let mut out = [0.0; 3];
    for (v, o) in out.iter_mut().enumerate() {
        *o = (hash_index(key, v as u64) % 1000) as f64 / 250.0;
    }
    out
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - z).collect()
}

impl StepScorer for Table {
    type State = Vec<usize>;

    fn start(&self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn advance(&self, state: &mut Vec<usize>, _step: usize, prev: usize) -> Result<Vec<f64>> {
        if prev != T_BOS {
            state.push(prev);
        }
        let mut lp = log_softmax(&table_logits(state));
        if self.never_end {
            lp[T_EOS] = f64::NEG_INFINITY;
        }
        Ok(lp)
    }
}

fn table_config(beam: usize) -> BeamConfig {
    BeamConfig {
        beam,
        max_len: 3,
        length_penalty: 0.6,
        bos: T_BOS,
        eos: T_EOS,
    }
}

// Every word sequence of length <= 2 followed by the end token.
fn enumerate_finished() -> Vec<Hypothesis> {
    let mut seqs: Vec<Vec<usize>> = vec![vec![]];
    for len in 1..=2 {
        let mut next = Vec::new();
        for s in seqs.iter().filter(|s| s.len() == len - 1) {
            for w in [1, 2] {
                let mut t = s.clone();
                t.push(w);
                next.push(t);
            }
        }
        seqs.extend(next);
    }
    seqs.into_iter()
        .map(|s| {
            let mut lp = 0.0;
            for i in 0..=s.len() {
                let tok = if i < s.len() { s[i] } else { T_EOS };
                lp += log_softmax(&table_logits(&s[..i]))[tok];
            }
            Hypothesis {
                score: lp / ((s.len() + 1) as f64).powf(0.6),
                tokens: s,
                logprob: lp,
                truncated: false,
            }
        })
        .collect()
}

#[test]
fn wide_beam_matches_exhaustive_enumeration() {
    let mut all = enumerate_finished();
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    let got = beam_search(&Table { never_end: false }, &table_config(16), 7).unwrap();
    assert_eq!(got.len(), 7);
    for (g, w) in got.iter().zip(&all) {
        assert_eq!(g.tokens, w.tokens);
        assert!((g.logprob - w.logprob).abs() < 1e-12);
        assert!((g.score - w.score).abs() < 1e-12);
        assert!(!g.truncated);
    }
}

#[test]
fn beam_one_is_greedy_on_the_table() {
    let mut prefix = Vec::new();
    let mut lp_total = 0.0;
    loop {
        let lp = log_softmax(&table_logits(&prefix));
        let best = (0..3).max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a))).unwrap();
        lp_total += lp[best];
        if best == T_EOS || prefix.len() == 3 {
            break;
        }
        prefix.push(best);
    }
    let got = beam_search(&Table { never_end: false }, &table_config(1), 1).unwrap();
    assert_eq!(got[0].tokens, prefix);
    assert!((got[0].logprob - lp_total).abs() < 1e-12);
}

#[test]
fn unfinished_search_is_flagged_truncated() {
    let got = beam_search(&Table { never_end: true }, &table_config(2), 1).unwrap();
    assert!(got[0].truncated);
    assert_eq!(got[0].tokens.len(), 3);
}

fn tiny_model(seed: u64) -> Transformer<f32> {
    let cfg = ModelConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 16,
        d_ff: 32,
        src_vocab: 12,
        tgt_vocab: 12,
        max_len: 12,
        dropout: 0.0,
        label_smoothing: 0.0,
    };
    Transformer::new(cfg, seed).unwrap()
}

fn model_beam(beam: usize) -> BeamConfig {
    BeamConfig {
        beam,
        max_len: 8,
        length_penalty: 0.6,
        bos: BOS,
        eos: EOS,
    }
}

#[test]
fn beam_one_equals_greedy_with_full_recompute() {
    for seed in 0..4 {
        let m = tiny_model(seed);
        let x = vec![4, 7, 9, 5];
        let enc = m.encode(&m.embed_source(&x).unwrap(), &[true; 4]).unwrap();
        let mut toks = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..8 {
            let logits = m.decode_step(&enc, &m.embed_target(&toks).unwrap()).unwrap();
            let best = (0..logits.len())
                .filter(|&v| v != PAD && v != BOS)
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                .unwrap();
            if best == EOS {
                break;
            }
            out.push(best);
            toks.push(best);
        }
        let got = translate(&m, &x, model_beam(1), 1).unwrap();
        assert_eq!(got[0].tokens, out, "seed {seed}");
    }
}

#[test]
fn wider_beam_never_scores_worse_than_greedy() {
    let m = tiny_model(9);
    let x = vec![5, 6, 4];
    let g = translate(&m, &x, model_beam(1), 1).unwrap().remove(0);
    let b = translate(&m, &x, model_beam(4), 1).unwrap().remove(0);
    if !g.truncated && !b.truncated {
        assert!(b.score >= g.score - 1e-9);
    }
}

#[test]
fn lambda_one_reduces_to_plain_beam_search() {
    let m = tiny_model(2);
    let x = vec![4, 5, 6, 7];
    let plain = translate(&m, &x, model_beam(3), 1).unwrap().remove(0);
    let trace = LambdaTrace::constant(1.0, x.len(), 8);
    let mixed = mixup_beam_search(&m, &x, &[9, 10], &[8, 8, 8, 11, 4], &trace, model_beam(3)).unwrap();
    assert_eq!(mixed, plain);
}

#[test]
fn sentence_embedding_examples() {
    let m = tiny_model(1);
    let table = &m.params.src_embed;
    let one = sentence_embedding(&[5], table).unwrap();
    let want: Vec<f64> = table.row(5).iter().map(|&v| v as f64).collect();
    assert_eq!(one, want);
    assert_eq!(sentence_embedding(&[5, 5], table).unwrap(), one);
    assert!(sentence_embedding::<f32>(&[], table).is_err());
    let toks = [4, 9, 9, 11, 6];
    let got = sentence_embedding(&toks, table).unwrap();
    for (c, &g) in got.iter().enumerate() {
        let s: f64 = toks.iter().map(|&t| table.row(t)[c] as f64).sum();
        assert!((g - s / 5.0).abs() < 1e-6);
    }
}

#[test]
fn partner_alpha_examples() {
    // rows 0 and 1 at distance 1, row 2 far away
    let table = Tensor::<f64>::new(vec![3, 2], vec![0.0, 0.0, 0.6, 0.8, 1e9, 0.0]).unwrap();
    let (a, d) = partner_alpha(&[0], &[1], 0.3, &table).unwrap();
    assert!((d - 1.0).abs() < 1e-12);
    assert!((a - 0.6).abs() < 1e-12);
    let (a, d) = partner_alpha(&[0], &[0], 0.3, &table).unwrap();
    assert_eq!(d, DISTANCE_FLOOR);
    assert!((a - (0.3 + 0.3 / 1e-6)).abs() < 1e-3);
    let (a, _) = partner_alpha(&[0], &[2], 0.3, &table).unwrap();
    assert!((a - 0.3).abs() < 1e-9);
}

fn folded_mean(alpha: f64, seed: u64) -> f64 {
    let mut rng = SeedTree::new(seed).stream("fold");
    let n = 100_000;
    let mut s = 0.0;
    for _ in 0..n {
        let l = sample_step_lambda(alpha, &mut rng).unwrap();
        assert!((0.5..=1.0).contains(&l));
        s += l;
    }
    s / n as f64
}

#[test]
fn folded_lambda_statistics() {
    let m1 = folded_mean(1.0, 1);
    assert!((m1 - 0.75).abs() < 0.005, "alpha 1: {m1}");
    let big = folded_mean(1e4, 2);
    assert!((0.5..=0.51).contains(&big), "alpha 1e4: {big}");
    let small = folded_mean(1e-3, 3);
    assert!(small > 0.99, "alpha 1e-3: {small}");
    let means: Vec<f64> = [0.1, 0.6, 5.0].iter().map(|&a| folded_mean(a, 4)).collect();
    assert!(means[0] + 0.005 >= means[1] && means[1] + 0.005 >= means[2], "{means:?}");
}

#[test]
fn mix_rows_examples() {
    let a = Tensor::<f64>::new(vec![1, 3], vec![2.0, 0.0, 5.0]).unwrap();
    let b = Tensor::<f64>::new(vec![1, 3], vec![0.0, 2.0, 5.0]).unwrap();
    assert_eq!(mix_rows(&a, &b, &[0.5]).unwrap().data(), &[1.0, 1.0, 5.0]);
    assert_eq!(mix_rows(&a, &b, &[1.0]).unwrap(), a);
    assert!(mix_rows(&a, &b, &[0.5, 0.5]).is_err());
}

#[test]
fn mix_source_pads_or_truncates_the_partner() {
    let m = tiny_model(3);
    let x = [4, 5, 6];
    assert_eq!(mix_source(&m, &x, &[7], &[1.0; 3]).unwrap(), m.embed_source(&x).unwrap());
    assert_eq!(align_partner(&[7], 3), vec![7, PAD, PAD]);
    assert_eq!(align_partner(&[7, 8, 9, 10], 3), vec![7, 8, 9]);
    let half = mix_source(&m, &x, &[7, 8, 9, 10], &[0.5; 3]).unwrap();
    let xe = m.embed_source(&x).unwrap();
    let pe = m.embed_source(&[7, 8, 9]).unwrap();
    for i in 0..half.len() {
        let want = 0.5 * xe.data()[i] + 0.5 * pe.data()[i];
        assert!((half.data()[i] - want).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn mixed_embeddings_stay_between_operands(
        a in prop::collection::vec(-5.0f64..5.0, 8),
        b in prop::collection::vec(-5.0f64..5.0, 8),
        l in prop::collection::vec(0.5f64..=1.0, 2),
    ) {
        let ta = Tensor::new(vec![2, 4], a.clone()).unwrap();
        let tb = Tensor::new(vec![2, 4], b.clone()).unwrap();
        let m = mix_rows(&ta, &tb, &l).unwrap();
        for i in 0..8 {
            let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
            prop_assert!(m.data()[i] >= lo - 1e-12 && m.data()[i] <= hi + 1e-12);
        }
    }
}

#[test]
fn partner_targets_continue_with_end_token() {
    let y = [7, 8];
    let got: Vec<usize> = (0..5).map(|s| partner_target_token(&y, s)).collect();
    assert_eq!(got, vec![BOS, 7, 8, EOS, EOS]);
}

fn pool_corpus() -> ParallelCorpus {
    let mut text = ParallelText::default();
    for i in 0..24 {
        let len = 2 + i % 4;
        let s: Vec<String> = (0..len).map(|j| format!("a{}", (i + j) % 8)).collect();
        let t: Vec<String> = (0..len).map(|j| format!("b{}", (i * 3 + j) % 8)).collect();
        text.lines.push((s.join(" "), t.join(" ")));
    }
    ParallelCorpus::from_text(&text).unwrap()
}

fn corpus_model(corpus: &ParallelCorpus) -> Transformer<f32> {
    let cfg = ModelConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 16,
        d_ff: 32,
        src_vocab: corpus.src_vocab.len(),
        tgt_vocab: corpus.tgt_vocab.len(),
        max_len: 12,
        dropout: 0.0,
        label_smoothing: 0.0,
    };
    Transformer::new(cfg, 4).unwrap()
}

fn decode_config() -> DecodeConfig {
    DecodeConfig {
        k: 3,
        tau: 0.3,
        beam: 2,
        max_len: 8,
        seed: 77,
        ..DecodeConfig::default()
    }
}

#[test]
fn forced_lambda_one_gives_plain_translation_for_every_partner() {
    let corpus = pool_corpus();
    let m = corpus_model(&corpus);
    let pool = PartnerPool::new(&corpus).unwrap();
    let cfg = DecodeConfig {
        force_lambda: Some(1.0),
        ..decode_config()
    };
    for idx in [0, 5, 11] {
        let x = corpus.pair(idx).src.clone();
        let out = diverse_translate(&m, &pool, &x, idx, Some(idx), &cfg, Execution::Sequential).unwrap();
        let plain = translate(&m, &x, cfg.beam_config(12), 1).unwrap().remove(0);
        assert_eq!(out.hypotheses.len(), 3);
        for h in &out.hypotheses {
            assert_eq!(h.hypothesis, plain);
            assert_ne!(h.partner_id, idx);
        }
    }
}

#[test]
fn diverse_output_is_independent_of_worker_count() {
    let corpus = pool_corpus();
    let m = corpus_model(&corpus);
    let pool = PartnerPool::new(&corpus).unwrap();
    let inputs: Vec<Vec<usize>> = (0..6).map(|i| corpus.pair(i).src.clone()).collect();
    let exclude: Vec<Option<usize>> = (0..6).map(Some).collect();
    let cfg = decode_config();
    let seq = diverse_translate_all(&m, &pool, &inputs, &exclude, &cfg, Execution::Sequential).unwrap();
    let par = diverse_translate_all(&m, &pool, &inputs, &exclude, &cfg, Execution::Threads(3)).unwrap();
    assert_eq!(seq, par);
    let one = diverse_translate(&m, &pool, &inputs[2], 2, Some(2), &cfg, Execution::Threads(4)).unwrap();
    assert_eq!(one, seq[2]);
    for out in &seq {
        for h in &out.hypotheses {
            assert!(h.lambdas.encoder.iter().chain(&h.lambdas.decoder).all(|l| (0.5..=1.0).contains(l)));
        }
    }
}

#[test]
fn ablation_flags_change_partner_selection_and_alpha() {
    let corpus = pool_corpus();
    let m = corpus_model(&corpus);
    let pool = PartnerPool::new(&corpus).unwrap();
    let x = corpus.pair(3).src.clone();
    let cfg = DecodeConfig {
        sim_weight: false,
        fixed_alpha: Some(0.7),
        ..decode_config()
    };
    let out = diverse_translate(&m, &pool, &x, 0, None, &cfg, Execution::Sequential).unwrap();
    assert!(out.hypotheses.iter().all(|h| h.alpha == 0.7));
    let cfg = DecodeConfig {
        len_selection: true,
        ..decode_config()
    };
    let out = diverse_translate(&m, &pool, &x, 0, None, &cfg, Execution::Sequential).unwrap();
    for h in &out.hypotheses {
        let l = corpus.pair(h.partner_id).src.len();
        assert!(l + 1 >= x.len() && l <= x.len(), "partner length {l} for input {}", x.len());
        assert!((h.alpha - alpha_from_distance(0.3, h.distance)).abs() < 1e-12);
    }
    assert!(DecodeConfig { k: 0, ..decode_config() }.validate().is_err());
    assert!(DecodeConfig { tau: 0.0, ..decode_config() }.validate().is_err());
}
