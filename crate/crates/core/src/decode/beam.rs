//! Beam search over any next-token scorer.

use crate::error::Result;

/// Supplies next-token log-probabilities for a growing prefix.
pub trait StepScorer {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    /// Consume `prev` as the input at position `step` (0 is the begin token)
    /// and return log-probabilities over the vocabulary for the next token.
    /// Forbidden tokens get `-inf`.
    fn advance(&self, state: &mut Self::State, step: usize, prev: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum number of generated tokens, end token included.
    pub max_len: usize,
    /// Exponent of the length penalty `len^a`.
    pub length_penalty: f64,
    pub bos: usize,
    pub eos: usize,
}

/// A finished (or truncated) output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the end token.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// `logprob / len^a`, with `len` counting the end token when present.
    pub score: f64,
    /// No end token was produced within the length limit.
    pub truncated: bool,
}

pub fn length_normalized(logprob: f64, len: usize, exponent: f64) -> f64 {
    logprob / (len.max(1) as f64).powf(exponent)
}

struct Live<S> {
    tokens: Vec<usize>,
    logprob: f64,
    state: S,
}

/// Returns up to `top_n` hypotheses, best first. Finished hypotheses always
/// rank ahead of truncated ones.
pub fn beam_search<S: StepScorer>(scorer: &S, cfg: &BeamConfig, top_n: usize) -> Result<Vec<Hypothesis>> {
    let beam = cfg.beam.max(1);
    let mut live = vec![Live {
        tokens: Vec::new(),
        logprob: 0.0,
        state: scorer.start()?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        // (logprob, beam index, token)
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (b, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(cfg.bos);
            let mut st = h.state.clone();
            let lp = scorer.advance(&mut st, step, prev)?;
            states.push(st);
            for (tok, &l) in lp.iter().enumerate() {
                if l > f64::NEG_INFINITY {
                    cands.push((h.logprob + l, b, tok));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for (rank, &(lp, b, tok)) in cands.iter().enumerate() {
            if tok == cfg.eos {
                // an end token only counts while it ranks inside the beam
                if rank < beam {
                    let tokens = live[b].tokens.clone();
                    finished.push(Hypothesis {
                        score: length_normalized(lp, tokens.len() + 1, cfg.length_penalty),
                        tokens,
                        logprob: lp,
                        truncated: false,
                    });
                }
            } else if next.len() < beam {
                let mut tokens = live[b].tokens.clone();
                tokens.push(tok);
                next.push(Live {
                    tokens,
                    logprob: lp,
                    state: states[b].clone(),
                });
            }
            if next.len() == beam && rank + 1 >= beam {
                break;
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    let mut out = finished;
    sort_hyps(&mut out);
    if out.len() < top_n {
        let mut cut: Vec<Hypothesis> = live
            .into_iter()
            .map(|h| Hypothesis {
                score: length_normalized(h.logprob, h.tokens.len(), cfg.length_penalty),
                tokens: h.tokens,
                logprob: h.logprob,
                truncated: true,
            })
            .collect();
        sort_hyps(&mut cut);
        out.extend(cut);
    }
    out.truncate(top_n.max(1));
    Ok(out)
}

fn sort_hyps(h: &mut [Hypothesis]) {
    h.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
}
