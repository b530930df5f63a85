pub mod decode;
pub mod evaluate;
pub mod gradcheck;
pub mod sweep;
pub mod synth;
pub mod train;

use std::fs;
use std::path::Path;

use mixdiv::corpus::{ParallelCorpus, ParallelText, Vocab};
use mixdiv::error::{Error, Result};
use mixdiv::model::Checkpoint;
use mixdiv::model::Transformer;

use crate::settings::Settings;

/// Settings with the `--config` layer applied.
pub fn settings(config: Option<&Path>) -> Result<Settings> {
    let mut s = Settings::new();
    if let Some(p) = config {
        s.layer_file(p)?;
    }
    Ok(s)
}

pub fn must_exist(path: &str, what: &str) -> Result<()> {
    if Path::new(path).is_file() {
        Ok(())
    } else {
        Err(Error::config(format!("{what} `{path}` does not exist")))
    }
}

/// The directory an output file goes into must already exist.
pub fn writable(path: &str, what: &str) -> Result<()> {
    let parent = Path::new(path).parent().filter(|p| !p.as_os_str().is_empty());
    match parent {
        Some(dir) if !dir.is_dir() => Err(Error::config(format!(
            "directory of {what} `{path}` does not exist"
        ))),
        _ => Ok(()),
    }
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    write(tmp)?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub const SRC_TOKENS: &str = "src_tokens";
pub const TGT_TOKENS: &str = "tgt_tokens";

/// Vocabulary entries after the reserved ids, space separated.
pub fn vocab_entry(v: &Vocab) -> String {
    v.tokens()[4..].join(" ")
}

/// A trained model with the vocabularies it was trained on.
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub model: Transformer<f32>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

pub fn load_checkpoint(path: &str) -> Result<Loaded> {
    must_exist(path, "checkpoint")?;
    let checkpoint = Checkpoint::load(Path::new(path))?;
    let model = checkpoint.model()?;
    let vocab = |key: &str| -> Result<Vocab> {
        let v = checkpoint
            .get(key)
            .ok_or_else(|| Error::format(path, 0, format!("checkpoint header lacks `{key}`")))?;
        Ok(Vocab::from_tokens(v.split_whitespace()))
    };
    let src_vocab = vocab(SRC_TOKENS)?;
    let tgt_vocab = vocab(TGT_TOKENS)?;
    if src_vocab.len() != model.config.src_vocab || tgt_vocab.len() != model.config.tgt_vocab {
        return Err(Error::format(path, 0, "vocabulary sizes disagree with the model"));
    }
    Ok(Loaded {
        checkpoint,
        model,
        src_vocab,
        tgt_vocab,
    })
}

/// Parallel text encoded with a checkpoint's vocabularies.
pub fn corpus_for(loaded: &Loaded, src: &str, tgt: &str) -> Result<ParallelCorpus> {
    must_exist(src, "source file")?;
    must_exist(tgt, "target file")?;
    let text = ParallelText::read(Path::new(src), Path::new(tgt))?;
    ParallelCorpus::with_vocabs(&text, loaded.src_vocab.clone(), loaded.tgt_vocab.clone())
}

/// Non-empty source lines of `path`.
pub fn read_sources(path: &str) -> Result<Vec<String>> {
    must_exist(path, "input")?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    if let Some(i) = lines.iter().position(|l| l.is_empty()) {
        return Err(Error::format(path, i + 1, "empty input line"));
    }
    Ok(lines)
}
