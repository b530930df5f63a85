//! Parallel corpora, vocabularies, length buckets and the synthetic generator.

mod buckets;
mod synth;
mod vocab;

pub use buckets::{sample_partners, sample_uniform, LengthBuckets, PartnerSample};
pub use synth::{generate_synthetic_corpus, SynthCorpus, SynthSpec};
pub use vocab::{detokenize, tokenize, Vocab, BOS, EOS, PAD, UNK};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One aligned training example; token ids exclude `<s>` and `</s>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub id: usize,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Sentence pairs with their vocabularies. Pair ids are `0..len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

/// Raw aligned sentences plus the number of skipped empty lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelText {
    pub lines: Vec<(String, String)>,
    pub skipped: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(raw
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .skip_while(|l| l.is_empty())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect())
}

impl ParallelText {
    /// Read two line-aligned UTF-8 files. Pairs with an empty side are skipped.
    pub fn read(src_path: &Path, tgt_path: &Path) -> Result<Self> {
        let src = read_lines(src_path)?;
        let tgt = read_lines(tgt_path)?;
        if src.len() != tgt.len() {
            return Err(Error::Alignment {
                src_lines: src.len(),
                tgt_lines: tgt.len(),
            });
        }
        let mut out = ParallelText::default();
        for (s, t) in src.into_iter().zip(tgt) {
            let s = detokenize(&tokenize(&s).collect::<Vec<_>>());
            let t = detokenize(&tokenize(&t).collect::<Vec<_>>());
            if s.is_empty() || t.is_empty() {
                out.skipped += 1;
                continue;
            }
            out.lines.push((s, t));
        }
        if out.skipped > 0 {
            log::warn!(
                "skipped {} empty line(s) in {} / {}",
                out.skipped,
                src_path.display(),
                tgt_path.display()
            );
        }
        Ok(out)
    }

    pub fn write(&self, src_path: &Path, tgt_path: &Path) -> Result<()> {
        let mut s = String::new();
        let mut t = String::new();
        for (a, b) in &self.lines {
            s.push_str(a);
            s.push('\n');
            t.push_str(b);
            t.push('\n');
        }
        fs::write(src_path, s).map_err(|e| Error::io(src_path, e))?;
        fs::write(tgt_path, t).map_err(|e| Error::io(tgt_path, e))
    }

    pub fn sources(&self) -> Vec<&str> {
        self.lines.iter().map(|(s, _)| s.as_str()).collect()
    }

    pub fn targets(&self) -> Vec<&str> {
        self.lines.iter().map(|(_, t)| t.as_str()).collect()
    }
}

impl ParallelCorpus {
    /// Build vocabularies from the given (training) text and encode it.
    pub fn from_text(text: &ParallelText) -> Result<Self> {
        let src_vocab = Vocab::build(text.lines.iter().flat_map(|(s, _)| tokenize(s)));
        let tgt_vocab = Vocab::build(text.lines.iter().flat_map(|(_, t)| tokenize(t)));
        Self::with_vocabs(text, src_vocab, tgt_vocab)
    }

    /// Encode text with existing vocabularies; unseen tokens become `<unk>`.
    pub fn with_vocabs(text: &ParallelText, src_vocab: Vocab, tgt_vocab: Vocab) -> Result<Self> {
        let pairs = text
            .lines
            .iter()
            .enumerate()
            .map(|(id, (s, t))| SentencePair {
                id,
                src: src_vocab.encode(s),
                tgt: tgt_vocab.encode(t),
            })
            .collect::<Vec<_>>();
        if let Some(p) = pairs.iter().find(|p| p.src.is_empty() || p.tgt.is_empty()) {
            return Err(Error::contract(format!("pair {} has an empty side", p.id)));
        }
        Ok(ParallelCorpus {
            pairs,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, id: usize) -> &SentencePair {
        &self.pairs[id]
    }

    pub fn max_src_len(&self) -> usize {
        self.pairs.iter().map(|p| p.src.len()).max().unwrap_or(0)
    }

    pub fn max_tgt_len(&self) -> usize {
        self.pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(0)
    }
}

/// Load a training corpus from `*.src` / `*.tgt` files, building vocabularies.
pub fn load_parallel(src_path: &Path, tgt_path: &Path) -> Result<ParallelCorpus> {
    ParallelCorpus::from_text(&ParallelText::read(src_path, tgt_path)?)
}
