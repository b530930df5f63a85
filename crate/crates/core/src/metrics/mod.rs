//! Corpus BLEU and the diversity suite: reference BLEU (rfb), pairwise BLEU
//! (pwb) and the distance of an (rfb, pwb) point from the ideal `(R, 0)`.

mod files;

pub use files::{read_references, HypothesesFile, HypothesisLine};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for BLEU; adds up across sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub cand_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], u64> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

impl BleuStats {
    /// Statistics of one tokenized candidate against one reference.
    pub fn sentence(cand: &[&str], reference: &[&str]) -> Self {
        let mut s = BleuStats {
            cand_len: cand.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            if cand.len() < n {
                break;
            }
            let r = ngram_counts(reference, n);
            for (g, c) in ngram_counts(cand, n) {
                s.matches[n - 1] += c.min(r.get(g).copied().unwrap_or(0));
            }
            s.totals[n - 1] = (cand.len() + 1 - n) as u64;
        }
        s
    }

    pub fn from_text(cand: &str, reference: &str) -> Self {
        let c: Vec<&str> = cand.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        Self::sentence(&c, &r)
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU in percent; zero when any order has no matches (no smoothing).
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..MAX_ORDER {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_p += (self.matches[n] as f64).ln() - (self.totals[n] as f64).ln();
        }
        let bp = (1.0 - self.ref_len as f64 / self.cand_len as f64).min(0.0);
        100.0 * (bp + log_p / MAX_ORDER as f64).exp()
    }
}

/// How per-system scores are formed from sentence statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// One BLEU over statistics summed across the corpus.
    #[default]
    Corpus,
    /// Mean of unsmoothed sentence BLEU scores.
    Sentence,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "corpus" => Ok(Aggregation::Corpus),
            "sentence" => Ok(Aggregation::Sentence),
            _ => Err(format!("expected `corpus` or `sentence`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Corpus => "corpus",
            Aggregation::Sentence => "sentence",
        })
    }
}

fn check_parallel<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::contract("BLEU over an empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R], agg: Aggregation) -> Result<f64> {
    check_parallel(hyps, refs)?;
    let stats = hyps.iter().zip(refs).map(|(h, r)| BleuStats::from_text(h.as_ref(), r.as_ref()));
    Ok(match agg {
        Aggregation::Corpus => {
            let mut total = BleuStats::default();
            stats.for_each(|s| total.add(&s));
            total.score()
        }
        Aggregation::Sentence => stats.map(|s| s.score()).sum::<f64>() / hyps.len() as f64,
    })
}

/// Corpus-level 4-gram BLEU in percent.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R]) -> Result<f64> {
    bleu(hyps, refs, Aggregation::Corpus)
}

fn check_systems<S>(systems: &[Vec<S>]) -> Result<usize> {
    let n = systems.first().map(Vec::len).unwrap_or(0);
    if systems.iter().any(|s| s.len() != n) {
        return Err(Error::contract("every input needs the same number of hypotheses"));
    }
    Ok(n)
}

/// Mean over the K systems of each system's BLEU against the references.
/// `systems[k][i]` is the k-th hypothesis of input i.
pub fn rfb<S: AsRef<str>, R: AsRef<str>>(systems: &[Vec<S>], refs: &[R], agg: Aggregation) -> Result<f64> {
    if systems.is_empty() {
        return Err(Error::contract("reference BLEU needs at least one system"));
    }
    check_systems(systems)?;
    let mut sum = 0.0;
    for s in systems {
        sum += bleu(s, refs, agg)?;
    }
    Ok(sum / systems.len() as f64)
}

/// Mean over ordered system pairs `(a, b)`, `a ≠ b`, of BLEU of system a
/// scored against system b.
pub fn pwb<S: AsRef<str>>(systems: &[Vec<S>], agg: Aggregation) -> Result<f64> {
    let k = systems.len();
    if k < 2 {
        return Err(Error::contract(format!("pairwise BLEU needs K >= 2, got {k}")));
    }
    check_systems(systems)?;
    let mut sum = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                sum += bleu(&systems[a], &systems[b], agg)?;
            }
        }
    }
    Ok(sum / (k * (k - 1)) as f64)
}

/// Distance (percent) of `(rfb, pwb)` from `(R, 0)`, with pwb weighted by `R/P`.
pub fn eda(rfb: f64, pwb: f64, r: f64, p: f64) -> Result<f64> {
    if !(r > 0.0 && p > 0.0) {
        return Err(Error::contract(format!("baseline BLEU R and P must be positive, got R={r}, P={p}")));
    }
    let omega = r / p;
    let a = (r - rfb) / r;
    let b = omega * (0.0 - pwb) / p;
    Ok(100.0 * (a * a + b * b).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rfb: f64,
    pub pwb: f64,
    pub eda: f64,
    pub r: f64,
    pub p: f64,
    pub omega: f64,
    pub k: usize,
    pub inputs: usize,
    /// rfb above the baseline R, which the distance formula tolerates but is unusual.
    pub rfb_above_r: bool,
}

impl MetricsReport {
    pub fn new(systems: &[Vec<String>], refs: &[String], r: f64, agg: Aggregation) -> Result<Self> {
        let rfb = rfb(systems, refs, agg)?;
        let pwb = pwb(systems, agg)?;
        let p = 100.0;
        let eda = eda(rfb, pwb, r, p)?;
        Ok(MetricsReport {
            rfb,
            pwb,
            eda,
            r,
            p,
            omega: r / p,
            k: systems.len(),
            inputs: refs.len(),
            rfb_above_r: rfb > r,
        })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "inputs  {}", self.inputs);
        let _ = writeln!(s, "K       {}", self.k);
        let _ = writeln!(s, "rfb     {:.2}", self.rfb);
        let _ = writeln!(s, "pwb     {:.2}", self.pwb);
        let _ = writeln!(s, "eda     {:.2}", self.eda);
        let _ = writeln!(s, "R       {:.2}", self.r);
        let _ = writeln!(s, "omega   {:.4}", self.omega);
        if self.rfb_above_r {
            let _ = writeln!(s, "note    rfb exceeds R");
        }
        s
    }

    pub const CSV_HEADER: &'static str = "tau,seed,K,rfb,pwb,eda,R";

    pub fn csv_row(&self, tau: f64, seed: u64) -> String {
        format!(
            "{tau},{seed},{},{:.4},{:.4},{:.4},{:.4}",
            self.k, self.rfb, self.pwb, self.eda, self.r
        )
    }
}

/// Scores a hypotheses file against a reference file with baseline `r`.
pub fn evaluate_run(hyp_path: &Path, ref_path: &Path, r: f64, agg: Aggregation) -> Result<MetricsReport> {
    let hyps = HypothesesFile::read(hyp_path)?;
    let refs = read_references(ref_path)?;
    if refs.len() != hyps.inputs() {
        return Err(Error::contract(format!(
            "{} has {} inputs but {} has {} references",
            hyp_path.display(),
            hyps.inputs(),
            ref_path.display(),
            refs.len()
        )));
    }
    MetricsReport::new(&hyps.systems(), &refs, r, agg)
}

#[cfg(test)]
mod tests;
