use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use mixdiv::corpus::{ParallelCorpus, ParallelText};
use mixdiv::error::{Error, Result};
use mixdiv::model::{Checkpoint, ModelConfig, Transformer};
use mixdiv::tensor::{AdamConfig, LrSchedule};
use mixdiv::train::{MixupConfig, TrainConfig, Trainer};

use super::{corpus_for, load_checkpoint, must_exist, vocab_entry, writable, write_atomic, SRC_TOKENS, TGT_TOKENS};
use crate::settings::Switch;
use crate::TrainArgs;

pub fn run(config: Option<&Path>, a: TrainArgs) -> Result<u8> {
    let mut s = super::settings(config)?;
    let resume: Option<String> = s.opt("resume", a.resume)?;
    let loaded = resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(l) = &loaded {
        // the checkpoint's own settings sit below the config file and flags
        let pairs = l.checkpoint.header.iter().map(|(k, v)| (k.clone(), v.clone(), false));
        s.layer_under("checkpoint", pairs);
    }
    let src: String = s.required("src", a.src)?;
    let tgt: String = s.required("tgt", a.tgt)?;
    let out: String = s.required("out", a.out)?;
    let steps = s.get("steps", a.steps, 2000u64)?;
    let batch_tokens = s.get("batch_tokens", a.batch_tokens, 1024usize)?;
    let mixup = s.get("mixup", a.mixup, Switch(true))?;
    let alpha = s.get("alpha", a.alpha, 1.0f64)?;
    let arch = (
        s.get("num_layers", a.num_layers, 2usize)?,
        s.get("num_heads", a.num_heads, 4usize)?,
        s.get("d_model", a.d_model, 64usize)?,
        s.get("d_ff", a.d_ff, 256usize)?,
        s.get("max_len", a.max_len, 64usize)?,
        s.get("dropout", a.dropout, 0.1f64)?,
        s.get("label_smoothing", a.label_smoothing, 0.1f64)?,
    );
    let adam = AdamConfig {
        schedule: LrSchedule {
            peak_lr: s.get("lr_peak", a.lr_peak, 2e-3)?,
            init_lr: s.get("lr_init", a.lr_init, 1e-7)?,
            warmup_steps: s.get("lr_warmup", a.lr_warmup, 200)?,
        },
        beta1: s.get("adam_beta1", a.adam_beta1, 0.9)?,
        beta2: s.get("adam_beta2", a.adam_beta2, 0.98)?,
        eps: s.get("adam_eps", a.adam_eps, 1e-9)?,
    };
    let seed = s.get("seed", a.seed, 1u64)?;
    let log_every = s.get("log_every", a.log_every, 50u64)?;
    let log_path = s.get("log", a.log, format!("{out}.log"))?;
    let save_every = s.get("save_every", a.save_every, 0u64)?;
    let header = s.finish()?;

    must_exist(&src, "source file")?;
    must_exist(&tgt, "target file")?;
    writable(&out, "checkpoint")?;
    writable(&log_path, "training log")?;

    let corpus = match &loaded {
        Some(l) => corpus_for(l, &src, &tgt)?,
        None => ParallelCorpus::from_text(&ParallelText::read(Path::new(&src), Path::new(&tgt))?)?,
    };
    let (num_layers, num_heads, d_model, d_ff, max_len, dropout, label_smoothing) = arch;
    let model_cfg = ModelConfig {
        num_layers,
        num_heads,
        d_model,
        d_ff,
        src_vocab: corpus.src_vocab.len(),
        tgt_vocab: corpus.tgt_vocab.len(),
        max_len,
        dropout,
        label_smoothing,
    };
    let train_cfg = TrainConfig {
        batch_tokens,
        mixup: if mixup.0 {
            MixupConfig::with_alpha(alpha)
        } else {
            MixupConfig::disabled()
        },
        adam,
        seed,
        log_every,
    };

    let (mut trainer, mut log) = match loaded {
        Some(l) => {
            if l.model.config != model_cfg {
                return Err(Error::config(
                    "model settings differ from the checkpoint being resumed",
                ));
            }
            let mut state = l
                .checkpoint
                .adam(&l.model)?
                .ok_or_else(|| Error::config("checkpoint has no optimizer state to resume"))?;
            state.config = adam;
            let t = Trainer::resume(l.model, state, train_cfg, &corpus)?;
            let mut log = OpenOptions::new()
                .append(true)
                .create(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            writeln!(log, "# resumed at step {}", t.step_count()).map_err(|e| Error::io(&log_path, e))?;
            (t, BufWriter::new(log))
        }
        None => {
            model_cfg.validate()?;
            let model = Transformer::new(model_cfg, seed)?;
            let t = Trainer::new(model, train_cfg, &corpus)?;
            let f = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = BufWriter::new(f);
            for (k, v) in &header {
                writeln!(log, "# {k} = {v}").map_err(|e| Error::io(&log_path, e))?;
            }
            writeln!(log, "# step loss lr tokens").map_err(|e| Error::io(&log_path, e))?;
            (t, log)
        }
    };

    let mut extra: Vec<(String, String)> = header;
    extra.push((SRC_TOKENS.into(), vocab_entry(&corpus.src_vocab)));
    extra.push((TGT_TOKENS.into(), vocab_entry(&corpus.tgt_vocab)));
    let save = |t: &Trainer| -> Result<()> {
        let mut ck = Checkpoint::from_model(&t.model, Some(&t.adam), &[]);
        let extra = extra.iter().filter(|(k, _)| ck.get(k).is_none()).cloned().collect::<Vec<_>>();
        ck.header.extend(extra);
        write_atomic(Path::new(&out), |tmp| ck.save(tmp))
    };

    log::info!(
        "training on {} pairs from step {} to {steps} ({} mixup)",
        corpus.len(),
        trainer.step_count(),
        if mixup.0 { "with" } else { "without" }
    );
    while trainer.step_count() < steps {
        let left = steps - trainer.step_count();
        let chunk = if save_every == 0 { left } else { save_every.min(left) };
        let stats = trainer.train_steps(&corpus, chunk, Some(&mut log as &mut dyn Write));
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let stats = stats?;
        log::info!("step {}: mean loss {:.4}", trainer.step_count(), stats.mean_loss);
        save(&trainer)?;
    }
    if !Path::new(&out).exists() {
        save(&trainer)?;
    }
    log::info!("wrote {out}");
    Ok(0)
}
