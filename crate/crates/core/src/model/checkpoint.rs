//! `MIXDIV1` checkpoint files.
//!
//! Layout: the ASCII line `MIXDIV1`, then `key = value` lines, a blank line,
//! then for each tensor a text line `name dim0 dim1 ...` immediately followed
//! by `product(dims)` little-endian `f32` values in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ModelConfig, Parameters, Transformer};
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::{AdamConfig, AdamState, LrSchedule, Tensor};

pub const CHECKPOINT_MAGIC: &str = "MIXDIV1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::format("<checkpoint>", line, msg)
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        for (k, v) in &self.header {
            writeln!(w, "{k} = {v}")?;
        }
        writeln!(w)?;
        for (name, t) in &self.tensors {
            write!(w, "{name}")?;
            for d in t.shape() {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut lineno = 0usize;
        let mut next_line = |r: &mut R, line: &mut String| -> Result<bool> {
            line.clear();
            let n = r
                .read_line(line)
                .map_err(|e| Error::io("<checkpoint>", e))?;
            lineno += 1;
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(n > 0)
        };
        if !next_line(&mut r, &mut line)? || line != CHECKPOINT_MAGIC {
            return Err(bad(1, format!("expected `{CHECKPOINT_MAGIC}` header")));
        }
        let mut header = Vec::new();
        let mut n = 1;
        loop {
            n += 1;
            if !next_line(&mut r, &mut line)? {
                return Err(bad(n, "unexpected end of header"));
            }
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(n, format!("malformed header line `{line}`")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let mut tensors = Vec::new();
        loop {
            n += 1;
            if !next_line(&mut r, &mut line)? {
                break;
            }
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            if name.is_empty() {
                return Err(bad(n, "empty tensor name"));
            }
            let dims = parts
                .map(|p| p.parse::<usize>().map_err(|_| bad(n, format!("bad dimension `{p}`"))))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let mut bytes = vec![0u8; count * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(n, format!("truncated data for tensor `{name}`")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| match e {
            Error::Format { line, msg, .. } => Error::format(path, line, msg),
            other => other,
        })
    }

    /// Snapshot of a model, optionally with optimizer state, plus extra header entries.
    pub fn from_model(
        model: &Transformer<f32>,
        adam: Option<&AdamState<f32>>,
        extra: &[(String, String)],
    ) -> Self {
        let mut header = model.config.to_pairs();
        if let Some(st) = adam {
            let c = &st.config;
            header.extend([
                ("adam_step".to_string(), st.step.to_string()),
                ("adam_beta1".to_string(), c.beta1.to_string()),
                ("adam_beta2".to_string(), c.beta2.to_string()),
                ("adam_eps".to_string(), c.eps.to_string()),
                ("lr_peak".to_string(), c.schedule.peak_lr.to_string()),
                ("lr_init".to_string(), c.schedule.init_lr.to_string()),
                ("lr_warmup".to_string(), c.schedule.warmup_steps.to_string()),
            ]);
        }
        header.extend(extra.iter().cloned());
        let named = model.params.named();
        let mut tensors: Vec<(String, Tensor<f32>)> =
            named.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
        if let Some(st) = adam {
            for ((n, _), m) in named.iter().zip(&st.m) {
                tensors.push((format!("adam.m.{n}"), m.clone()));
            }
            for ((n, _), v) in named.iter().zip(&st.v) {
                tensors.push((format!("adam.v.{n}"), v.clone()));
            }
        }
        Checkpoint { header, tensors }
    }

    pub fn model(&self) -> Result<Transformer<f32>> {
        let config = ModelConfig::from_pairs(&self.header)?;
        let template = Parameters::<f32>::init(&config, &mut SeedTree::new(0).stream("template"));
        let params = template.try_map(|name, t| {
            let found = self
                .tensor(name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks tensor `{name}`")))?;
            if found.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    left: found.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            Ok(found.clone())
        })?;
        Ok(Transformer { config, params })
    }

    /// Optimizer state, if the checkpoint carries one.
    pub fn adam(&self, model: &Transformer<f32>) -> Result<Option<AdamState<f32>>> {
        let Some(step) = self.get("adam_step") else {
            return Ok(None);
        };
        let num = |k: &str| -> Result<f64> {
            self.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::config(format!("checkpoint lacks numeric `{k}`")))
        };
        let config = AdamConfig {
            beta1: num("adam_beta1")?,
            beta2: num("adam_beta2")?,
            eps: num("adam_eps")?,
            schedule: LrSchedule {
                peak_lr: num("lr_peak")?,
                init_lr: num("lr_init")?,
                warmup_steps: num("lr_warmup")? as u64,
            },
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, _) in model.params.named() {
            let get = |pre: &str| {
                self.tensor(&format!("{pre}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::config(format!("checkpoint lacks `{pre}.{name}`")))
            };
            m.push(get("adam.m")?);
            v.push(get("adam.v")?);
        }
        Ok(Some(AdamState {
            config,
            step: step
                .parse()
                .map_err(|_| Error::config("bad adam_step"))?,
            m,
            v,
        }))
    }
}
