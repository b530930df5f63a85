//! Baseline BLEU, diverse-decoding evaluation and resumable τ × seed sweeps.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::corpus::{ParallelCorpus, ParallelText, Vocab};
use crate::decode::{diverse_translate_all, translate_all, BeamConfig, DecodeConfig, DiverseOutput, PartnerPool};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, Aggregation, HypothesesFile, HypothesisLine, MetricsReport};
use crate::model::Transformer;
use crate::par::Execution;

/// Inputs to translate with their references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub inputs: Vec<Vec<usize>>,
    pub refs: Vec<String>,
    /// Pair id of each input inside the partner corpus, if it is there.
    pub exclude: Vec<Option<usize>>,
}

impl EvalSet {
    /// Held-out text encoded with the training vocabularies; at most `limit` lines.
    pub fn from_text(text: &ParallelText, src_vocab: &Vocab, limit: Option<usize>) -> Self {
        let n = limit.unwrap_or(usize::MAX).min(text.lines.len());
        let lines = &text.lines[..n];
        EvalSet {
            inputs: lines.iter().map(|(s, _)| src_vocab.encode(s)).collect(),
            refs: lines.iter().map(|(_, t)| t.clone()).collect(),
            exclude: vec![None; n],
        }
    }

    /// Inputs drawn from the partner corpus itself; each excludes its own pair.
    pub fn from_corpus(corpus: &ParallelCorpus, limit: Option<usize>) -> Self {
        let n = limit.unwrap_or(usize::MAX).min(corpus.len());
        EvalSet {
            inputs: (0..n).map(|i| corpus.pair(i).src.clone()).collect(),
            refs: (0..n).map(|i| corpus.tgt_vocab.decode(&corpus.pair(i).tgt)).collect(),
            exclude: (0..n).map(Some).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Plain beam search top-1 outputs and their corpus BLEU (the baseline R).
pub fn baseline(model: &Transformer<f32>, eval: &EvalSet, tgt_vocab: &Vocab, beam: BeamConfig, exec: Execution) -> Result<(f64, Vec<String>)> {
    let hyps = translate_all(model, &eval.inputs, beam, exec)?;
    let text: Vec<String> = hyps.iter().map(|h| tgt_vocab.decode(&h.tokens)).collect();
    Ok((corpus_bleu(&text, &eval.refs)?, text))
}

pub fn beam_file(outputs: &[String], header: Vec<(String, String)>) -> HypothesesFile {
    HypothesesFile {
        header,
        groups: outputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                vec![HypothesisLine {
                    input: i,
                    hyp: 0,
                    partner: None,
                    text: t.clone(),
                }]
            })
            .collect(),
    }
}

pub fn diverse_file(outputs: &[DiverseOutput], tgt_vocab: &Vocab, header: Vec<(String, String)>) -> HypothesesFile {
    HypothesesFile {
        header,
        groups: outputs
            .iter()
            .enumerate()
            .map(|(i, o)| {
                o.hypotheses
                    .iter()
                    .enumerate()
                    .map(|(k, h)| HypothesisLine {
                        input: i,
                        hyp: k,
                        partner: Some(h.partner_id),
                        text: tgt_vocab.decode(&h.hypothesis.tokens),
                    })
                    .collect()
            })
            .collect(),
    }
}

pub fn report_for(file: &HypothesesFile, refs: &[String], r: f64, agg: Aggregation) -> Result<MetricsReport> {
    if file.groups.iter().any(|g| g.len() != file.k()) {
        return Err(Error::contract("partner shortfall left inputs with fewer than K translations"));
    }
    MetricsReport::new(&file.systems(), refs, r, agg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: DecodeConfig,
    pub r: f64,
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub seed: u64,
    pub report: MetricsReport,
}

/// One (τ, seed) cell: decode every input K ways and score it.
pub fn run_cell(
    model: &Transformer<f32>,
    pool: &PartnerPool<'_>,
    eval: &EvalSet,
    cfg: &DecodeConfig,
    r: f64,
    agg: Aggregation,
    exec: Execution,
) -> Result<(MetricsReport, Vec<DiverseOutput>)> {
    let outputs = diverse_translate_all(model, pool, &eval.inputs, &eval.exclude, cfg, exec)?;
    let file = diverse_file(&outputs, &pool.corpus.tgt_vocab, Vec::new());
    Ok((report_for(&file, &eval.refs, r, agg)?, outputs))
}

fn header_text(header: &[(String, String)]) -> String {
    let mut s: String = header.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect();
    s.push_str(MetricsReport::CSV_HEADER);
    s.push('\n');
    s
}

/// Completed rows of an existing sweep file. A torn final line is dropped
/// and the file rewritten without it.
fn resume_rows(path: &Path, header: &str) -> Result<Vec<(String, String)>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if !complete.starts_with(header) {
        return Err(Error::config(format!(
            "{} was written by a different sweep configuration; refusing to resume",
            path.display()
        )));
    }
    if complete.len() != text.len() {
        fs::write(path, complete).map_err(|e| Error::io(path, e))?;
    }
    Ok(complete[header.len()..]
        .lines()
        .filter_map(|l| {
            let mut f = l.split(',');
            Some((f.next()?.to_string(), f.next()?.to_string()))
        })
        .collect())
}

/// Runs every (τ, seed) cell in order, appending one flushed CSV row per
/// cell. Cells already present in `csv` are skipped. No training happens
/// between cells; only the decoding weights change.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    model: &Transformer<f32>,
    pool: &PartnerPool<'_>,
    eval: &EvalSet,
    spec: &SweepSpec,
    header: &[(String, String)],
    csv: &Path,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    let head = header_text(header);
    let done = resume_rows(csv, &head)?;
    if done.is_empty() {
        fs::write(csv, &head).map_err(|e| Error::io(csv, e))?;
    }
    let mut file = OpenOptions::new().append(true).open(csv).map_err(|e| Error::io(csv, e))?;
    let mut rows = Vec::new();
    for &tau in &spec.taus {
        for &seed in &spec.seeds {
            if done.contains(&(tau.to_string(), seed.to_string())) {
                log::info!("tau {tau} seed {seed}: already in {}", csv.display());
                continue;
            }
            let cfg = DecodeConfig {
                tau,
                seed,
                ..spec.base.clone()
            };
            let (report, _) = run_cell(model, pool, eval, &cfg, spec.r, spec.aggregation, exec)?;
            let line = report.csv_row(tau, seed);
            log::info!("{line}");
            writeln!(file, "{line}").and_then(|_| file.flush()).map_err(|e| Error::io(csv, e))?;
            rows.push(SweepRow { tau, seed, report });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn corpus() -> ParallelCorpus {
        let mut text = ParallelText::default();
        for i in 0..30 {
            let len = 2 + i % 4;
            let s: Vec<String> = (0..len).map(|j| format!("a{}", (i * 7 + j) % 9)).collect();
            let t: Vec<String> = (0..len).map(|j| format!("b{}", (i * 5 + j) % 9)).collect();
            text.lines.push((s.join(" "), t.join(" ")));
        }
        ParallelCorpus::from_text(&text).unwrap()
    }

    fn model(c: &ParallelCorpus) -> Transformer<f32> {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 16,
            d_ff: 32,
            src_vocab: c.src_vocab.len(),
            tgt_vocab: c.tgt_vocab.len(),
            max_len: 10,
            dropout: 0.0,
            label_smoothing: 0.0,
        };
        Transformer::new(cfg, 2).unwrap()
    }

    fn spec() -> SweepSpec {
        SweepSpec {
            taus: vec![0.1, 0.5],
            seeds: vec![1, 2],
            base: DecodeConfig {
                k: 3,
                beam: 2,
                max_len: 8,
                ..DecodeConfig::default()
            },
            r: 10.0,
            aggregation: Aggregation::Corpus,
        }
    }

    #[test]
    fn sweep_is_resumable_and_worker_independent() {
        let c = corpus();
        let m = model(&c);
        let pool = PartnerPool::new(&c).unwrap();
        let eval = EvalSet::from_corpus(&c, Some(8));
        let header = vec![("model".to_string(), "test".to_string())];
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let rows = run_sweep(&m, &pool, &eval, &spec(), &header, &a, Execution::Sequential).unwrap();
        assert_eq!(rows.len(), 4);
        run_sweep(&m, &pool, &eval, &spec(), &header, &b, Execution::Threads(3)).unwrap();
        let full = fs::read_to_string(&a).unwrap();
        assert_eq!(full, fs::read_to_string(&b).unwrap());
        assert_eq!(full.lines().count(), 2 + 4);

        // interrupted after two rows plus a torn third line
        let keep: Vec<&str> = full.lines().take(4).collect();
        fs::write(&b, keep.join("\n") + "\n0.5,1,3,12.3").unwrap();
        let resumed = run_sweep(&m, &pool, &eval, &spec(), &header, &b, Execution::Parallel).unwrap();
        assert_eq!(resumed.len(), 2);
        assert_eq!(fs::read_to_string(&b).unwrap(), full);

        // a rerun of a finished sweep does nothing
        assert!(run_sweep(&m, &pool, &eval, &spec(), &header, &b, Execution::Parallel).unwrap().is_empty());
        let other = vec![("model".to_string(), "other".to_string())];
        assert!(run_sweep(&m, &pool, &eval, &spec(), &other, &b, Execution::Parallel).is_err());
    }

    #[test]
    fn baseline_and_files() {
        let c = corpus();
        let m = model(&c);
        let eval = EvalSet::from_corpus(&c, Some(5));
        let beam = BeamConfig {
            beam: 2,
            max_len: 8,
            length_penalty: 0.6,
            bos: crate::corpus::BOS,
            eos: crate::corpus::EOS,
        };
        let (r, out) = baseline(&m, &eval, &c.tgt_vocab, beam, Execution::Sequential).unwrap();
        assert_eq!(out.len(), 5);
        assert!((0.0..=100.0).contains(&r));
        let f = beam_file(&out, vec![("mode".into(), "beam".into())]);
        assert_eq!(f.k(), 1);
        let back = HypothesesFile::parse(Path::new("x"), &f.render()).unwrap();
        assert_eq!(back, f);
    }
}
