use std::path::Path;

use mixdiv::corpus::ParallelCorpus;
use mixdiv::decode::{diverse_translate_all, translate, DecodeConfig, PartnerPool};
use mixdiv::error::{Error, Result};
use mixdiv::experiment::diverse_file;
use mixdiv::metrics::{HypothesesFile, HypothesisLine};
use mixdiv::par::{self, Execution};

use super::{corpus_for, load_checkpoint, read_sources, writable, Loaded};
use crate::settings::{Settings, Switch};
use crate::{DecodeArgs, DecodeOpts, Mode};

/// Resolved settings common to `decode` and `sweep`.
pub struct Common {
    pub loaded: Loaded,
    pub input: String,
    /// `tau`, `seed` and `force_lambda` are filled in by the caller.
    pub base: DecodeConfig,
    pub partners: (String, String),
    pub limit: Option<usize>,
    pub exec: Execution,
}

pub fn resolve_common(s: &mut Settings, o: DecodeOpts) -> Result<Common> {
    let checkpoint: String = s.required("checkpoint", o.checkpoint)?;
    let input: String = s.required("input", o.input)?;
    let loaded = load_checkpoint(&checkpoint)?;
    let d = DecodeConfig::default();
    let k = s.get("k", o.k, d.k)?;
    let beam = s.get("beam", o.beam, d.beam)?;
    let length_penalty = s.get("length_penalty", o.length_penalty, d.length_penalty)?;
    let max_len = s.get("max_output_len", o.max_output_len, d.max_len)?;
    let sim_weight = s.get("sim_weight", o.sim_weight, Switch(d.sim_weight))?.0;
    let len_selection = s.get("len_selection", o.len_selection, Switch(d.len_selection))?.0;
    let fixed_alpha = s.opt("alpha", o.alpha)?;
    // partners default to the corpus the model was trained on
    let trained = |key: &str| loaded.checkpoint.get(key).unwrap_or_default().to_string();
    let psrc = s.get("partners_src", o.partners_src, trained("src"))?;
    let ptgt = s.get("partners_tgt", o.partners_tgt, trained("tgt"))?;
    let limit = s.opt("limit", o.limit)?;
    let workers = s.get("workers", o.workers, 0usize)?;
    Ok(Common {
        loaded,
        input,
        base: DecodeConfig {
            k,
            beam,
            length_penalty,
            max_len,
            sim_weight,
            len_selection,
            fixed_alpha,
            ..d
        },
        partners: (psrc, ptgt),
        limit,
        exec: Execution::from_workers(workers),
    })
}

/// Resolved settings minus the ones that cannot change the content: the
/// worker count and the artifact's own path.
pub fn artifact_header(s: &Settings) -> Result<Vec<(String, String)>> {
    const OMIT: [&str; 3] = ["workers", "out", "csv"];
    Ok(s.finish()?.into_iter().filter(|(k, _)| !OMIT.contains(&k.as_str())).collect())
}

pub fn partner_corpus(c: &Common) -> Result<ParallelCorpus> {
    corpus_for(&c.loaded, &c.partners.0, &c.partners.1)
}

pub fn encode_inputs(c: &Common, lines: &[String]) -> Vec<Vec<usize>> {
    let n = c.limit.unwrap_or(usize::MAX).min(lines.len());
    lines[..n].iter().map(|l| c.loaded.src_vocab.encode(l)).collect()
}

pub fn run(config: Option<&Path>, a: DecodeArgs) -> Result<u8> {
    let mut s = super::settings(config)?;
    let out: String = s.required("out", a.out)?;
    let mode = s.get("mode", a.mode, Mode::Mixdiv)?;
    let mut c = resolve_common(&mut s, a.opts)?;
    let top_n = s.get("top_n", a.top_n, 1usize)?;
    c.base.tau = s.get("tau", a.tau, c.base.tau)?;
    c.base.seed = s.get("seed", a.seed, c.base.seed)?;
    c.base.force_lambda = s.opt("force_lambda", a.force_lambda)?;
    let header = artifact_header(&s)?;
    c.base.validate()?;
    writable(&out, "output")?;
    if top_n == 0 || top_n > c.base.beam {
        return Err(Error::config(format!("top_n must be in 1..={}", c.base.beam)));
    }
    let inputs = encode_inputs(&c, &read_sources(&c.input)?);
    let model = &c.loaded.model;
    let file = match mode {
        Mode::Beam => {
            let beam = c.base.beam_config(model.config.max_len);
            let hyps = par::try_map(c.exec, &inputs, |_, x| translate(model, x, beam, top_n))?;
            HypothesesFile {
                header,
                groups: hyps
                    .iter()
                    .enumerate()
                    .map(|(i, hs)| {
                        hs.iter()
                            .enumerate()
                            .map(|(j, h)| HypothesisLine {
                                input: i,
                                hyp: j,
                                partner: None,
                                text: c.loaded.tgt_vocab.decode(&h.tokens),
                            })
                            .collect()
                    })
                    .collect(),
            }
        }
        Mode::Mixdiv => {
            let corpus = partner_corpus(&c)?;
            let pool = PartnerPool::new(&corpus)?;
            let exclude = vec![None; inputs.len()];
            let outs = diverse_translate_all(model, &pool, &inputs, &exclude, &c.base, c.exec)?;
            let short = outs.iter().filter(|o| o.shortfall).count();
            if short > 0 {
                log::warn!("{short} input(s) got fewer than {} partners", c.base.k);
            }
            diverse_file(&outs, &c.loaded.tgt_vocab, header)
        }
    };
    super::write_atomic(Path::new(&out), |tmp| file.write(tmp))?;
    log::info!("wrote {} inputs to {out}", file.groups.len());
    Ok(0)
}
