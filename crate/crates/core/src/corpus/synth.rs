//! Toy one-to-many translation task.
//!
//! Source sentences are random strings over `vocab_size` concept symbols
//! `s0..s{n-1}`. Each source concept maps through a fixed random permutation to
//! a target concept, which surfaces as one of `synonyms` tokens chosen
//! uniformly per occurrence. With one synonym the task is a token-level
//! cipher; with more it has genuine one-to-many structure.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::ParallelText;
use crate::error::{Error, Result};
use crate::rng::{hash_index, SeedTree};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub num_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub synonyms: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self, model_max_len: usize) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("synthetic vocab size must be positive"));
        }
        if self.synonyms == 0 {
            return Err(Error::config("synonym count must be at least 1"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        // targets gain a begin/end marker inside the model
        if self.max_len + 1 > model_max_len {
            return Err(Error::config(format!(
                "max length {} does not fit model max length {model_max_len}",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("num_pairs".into(), self.num_pairs.to_string()),
            ("min_len".into(), self.min_len.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("synonyms".into(), self.synonyms.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

pub fn source_token(concept: usize) -> String {
    format!("s{concept}")
}

pub fn target_token(concept: usize, synonym: usize, synonyms: usize) -> String {
    if synonyms == 1 {
        format!("t{concept}")
    } else {
        format!("t{concept}_{synonym}")
    }
}

/// Generated corpus with its 90/10 train/held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    /// `mapping[c]` is the target concept of source concept `c`.
    pub mapping: Vec<usize>,
    pub train: ParallelText,
    pub heldout: ParallelText,
}

/// Pair `index` goes to the held-out split when its seeded hash is 0 mod 10.
pub fn is_heldout(seed: u64, index: usize) -> bool {
    hash_index(seed ^ 0x4845_4c44, index as u64).is_multiple_of(10)
}

pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate(usize::MAX)?;
    let tree = SeedTree::new(spec.seed).child("synth");
    let mut mapping: Vec<usize> = (0..spec.vocab_size).collect();
    mapping.shuffle(&mut tree.stream("mapping"));
    let mut train = ParallelText::default();
    let mut heldout = ParallelText::default();
    for i in 0..spec.num_pairs {
        let mut rng = tree.indexed_stream("pair", i as u64);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut src = Vec::with_capacity(len);
        let mut tgt = Vec::with_capacity(len);
        for _ in 0..len {
            let c = rng.random_range(0..spec.vocab_size);
            let syn = rng.random_range(0..spec.synonyms);
            src.push(source_token(c));
            tgt.push(target_token(mapping[c], syn, spec.synonyms));
        }
        let line = (src.join(" "), tgt.join(" "));
        if is_heldout(spec.seed, i) {
            heldout.lines.push(line);
        } else {
            train.lines.push(line);
        }
    }
    Ok(SynthCorpus {
        spec: spec.clone(),
        mapping,
        train,
        heldout,
    })
}

impl SynthCorpus {
    /// Write `train.src`, `train.tgt`, `test.src`, `test.tgt` and `spec.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write(&dir.join("train.src"), &dir.join("train.tgt"))?;
        self.heldout.write(&dir.join("test.src"), &dir.join("test.tgt"))?;
        let mut spec = String::new();
        for (k, v) in self.spec.to_pairs() {
            let _ = writeln!(spec, "{k} = {v}");
        }
        let path = dir.join("spec.txt");
        fs::write(&path, spec).map_err(|e| Error::io(&path, e))
    }
}
