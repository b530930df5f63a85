use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use mixdiv::error::{Error, Result};
use mixdiv::metrics::{bleu, eda, read_references, Aggregation, HypothesesFile, MetricsReport};

use super::{must_exist, writable};
use crate::EvaluateArgs;

const P: f64 = 100.0;

/// Top-1 BLEU of a hypotheses file.
fn top1_bleu(file: &HypothesesFile, refs: &[String], agg: Aggregation) -> Result<f64> {
    let top: Vec<&str> = file.groups.iter().map(|g| g[0].text.as_str()).collect();
    bleu(&top, refs, agg)
}

pub fn run(config: Option<&Path>, a: EvaluateArgs) -> Result<u8> {
    let mut s = super::settings(config)?;
    let agg = s.get("aggregation", a.aggregation, Aggregation::Corpus)?;
    let r = s.opt("r", a.r)?;
    if let (Some(rfb), Some(pwb)) = (a.rfb, a.pwb) {
        s.finish()?;
        let r = r.ok_or_else(|| Error::config("scoring an (rfb, pwb) point needs --r"))?;
        println!("eda {:.4}", eda(rfb, pwb, r, P)?);
        return Ok(0);
    }
    let hyps_path: String = s.required("hyps", a.hyps)?;
    let refs_path: String = s.required("refs", a.refs)?;
    let baseline: Option<String> = s.opt("baseline", a.baseline)?;
    let csv: Option<String> = s.opt("csv", a.csv)?;
    s.finish()?;
    must_exist(&hyps_path, "hypotheses")?;
    must_exist(&refs_path, "references")?;
    if let Some(b) = &baseline {
        must_exist(b, "baseline hypotheses")?;
    }
    if let Some(c) = &csv {
        writable(c, "CSV")?;
    }

    let hyps = HypothesesFile::read(Path::new(&hyps_path))?;
    let refs = read_references(Path::new(&refs_path))?;
    if hyps.inputs() != refs.len() {
        return Err(Error::contract(format!(
            "{hyps_path} has {} inputs but {refs_path} has {} references",
            hyps.inputs(),
            refs.len()
        )));
    }
    if hyps.k() < 2 {
        println!("bleu {:.2}", top1_bleu(&hyps, &refs, agg)?);
        return Ok(0);
    }
    let r = match (r, &baseline) {
        (Some(r), _) => r,
        (None, Some(b)) => {
            let base = HypothesesFile::read(Path::new(b))?;
            if base.inputs() != refs.len() {
                return Err(Error::contract(format!("{b} does not cover the same inputs")));
            }
            top1_bleu(&base, &refs, agg)?
        }
        (None, None) => return Err(Error::config("diversity scores need --r or --baseline")),
    };
    let report = MetricsReport::new(&hyps.systems(), &refs, r, agg)?;
    print!("{}", report.table());
    if report.rfb_above_r {
        log::warn!("rfb {:.2} exceeds the baseline R {:.2}", report.rfb, r);
    }
    if let Some(c) = csv {
        let field = |k: &str| hyps.get(k).unwrap_or("nan").to_string();
        let tau: f64 = field("tau").parse().unwrap_or(f64::NAN);
        let seed: u64 = field("seed").parse().unwrap_or(0);
        let fresh = !Path::new(&c).exists();
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&c)
            .map_err(|e| Error::io(&c, e))?;
        if fresh {
            writeln!(f, "{}", MetricsReport::CSV_HEADER).map_err(|e| Error::io(&c, e))?;
        }
        writeln!(f, "{}", report.csv_row(tau, seed)).map_err(|e| Error::io(&c, e))?;
    }
    Ok(0)
}
