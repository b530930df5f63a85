use std::path::Path;

use mixdiv::corpus::{generate_synthetic_corpus, SynthSpec};
use mixdiv::error::Result;

use crate::SynthArgs;

pub fn run(config: Option<&Path>, a: SynthArgs) -> Result<u8> {
    let mut s = super::settings(config)?;
    let out: String = s.required("out", a.out)?;
    let spec = SynthSpec {
        vocab_size: s.get("vocab_size", a.vocab_size, 50)?,
        num_pairs: s.get("num_pairs", a.num_pairs, 2000)?,
        min_len: s.get("min_len", a.min_len, 3)?,
        max_len: s.get("max_len", a.max_len, 12)?,
        synonyms: s.get("synonyms", a.synonyms, 1)?,
        seed: s.get("seed", a.seed, 7)?,
    };
    s.finish()?;
    let corpus = generate_synthetic_corpus(&spec)?;
    corpus.write(Path::new(&out))?;
    log::info!(
        "wrote {} training and {} held-out pairs to {out}",
        corpus.train.lines.len(),
        corpus.heldout.lines.len()
    );
    Ok(0)
}
