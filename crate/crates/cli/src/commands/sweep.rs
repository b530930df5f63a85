use std::path::Path;

use mixdiv::corpus::ParallelText;
use mixdiv::decode::PartnerPool;
use mixdiv::error::{Error, Result};
use mixdiv::experiment::{baseline, run_sweep, EvalSet, SweepSpec};
use mixdiv::metrics::Aggregation;

use super::decode::{artifact_header, partner_corpus, resolve_common};
use super::{must_exist, writable};
use crate::settings::List;
use crate::SweepArgs;

pub fn run(config: Option<&Path>, a: SweepArgs) -> Result<u8> {
    let mut s = super::settings(config)?;
    let csv: String = s.required("csv", a.csv)?;
    let refs: String = s.required("refs", a.refs)?;
    let c = resolve_common(&mut s, a.opts)?;
    let taus = s.get("taus", a.taus, List(vec![0.1, 0.3, 0.5]))?.0;
    let seeds = s.get("seeds", a.seeds, List(vec![1, 2, 3, 4, 5]))?.0;
    let r = s.opt("r", a.r)?;
    let aggregation = s.get("aggregation", a.aggregation, Aggregation::Corpus)?;
    s.finish()?;
    must_exist(&c.input, "input")?;
    must_exist(&refs, "references")?;
    writable(&csv, "CSV")?;
    if taus.is_empty() || seeds.is_empty() {
        return Err(Error::config("need at least one tau and one seed"));
    }
    for &tau in &taus {
        mixdiv::decode::DecodeConfig { tau, ..c.base.clone() }.validate()?;
    }

    let text = ParallelText::read(Path::new(&c.input), Path::new(&refs))?;
    let eval = EvalSet::from_text(&text, &c.loaded.src_vocab, c.limit);
    let model = &c.loaded.model;
    let r = match r {
        Some(r) => r,
        None => {
            let beam = c.base.beam_config(model.config.max_len);
            let (r, _) = baseline(model, &eval, &c.loaded.tgt_vocab, beam, c.exec)?;
            log::info!("baseline BLEU R = {r:.4} over {} inputs", eval.len());
            r
        }
    };
    s.get("r", Some(r), r)?;
    let header = artifact_header(&s)?;

    let corpus = partner_corpus(&c)?;
    let pool = PartnerPool::new(&corpus)?;
    let spec = SweepSpec {
        taus,
        seeds,
        base: c.base.clone(),
        r,
        aggregation,
    };
    let rows = run_sweep(model, &pool, &eval, &spec, &header, Path::new(&csv), c.exec)?;
    log::info!("{} new row(s) in {csv}", rows.len());
    Ok(0)
}
