//! Finite-difference verification of the full training loss.
//!
//! Builds a tiny model in 64-bit mode, evaluates the mixup training loss on a
//! handful of tokens, and compares every analytic parameter gradient with a
//! Richardson-extrapolated central difference.

use std::fmt::Write as _;

use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::rng::SeedTree;
use crate::tensor::Graph;
use crate::train::BatchPlan;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub step: f64,
    pub tolerance: f64,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Negative control: corrupt one backward rule.
    pub fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab: 10,
            step: 1e-3,
            tolerance: 1e-5,
            dropout: 0.1,
            label_smoothing: 0.1,
            seed: 3,
            fault: false,
        }
    }
}

/// Worst agreement within one parameter group (tensors sharing a name suffix).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub elements: usize,
    pub worst_rel_err: f64,
    /// Parameter and element index of the worst entry.
    pub worst_at: (String, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
    pub elements: usize,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{:<24} {:>6} worst {:.3e} at {}[{}] {}",
                g.group,
                g.elements,
                g.worst_rel_err,
                g.worst_at.0,
                g.worst_at.1,
                if g.worst_rel_err < self.tolerance { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{} elements, worst {:.3e}, tolerance {:.1e}: {}",
            self.elements,
            self.worst(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

// "decoder.1.cross_attn.wq" -> "cross_attn.wq"
fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        [_, idx, rest @ ..] if idx.parse::<usize>().is_ok() => format!("{}.{}", parts[0], rest.join(".")),
        _ => name.to_string(),
    }
}

fn batch(vocab: usize) -> (Vec<SentencePair>, Vec<SentencePair>, Vec<f64>) {
    let t = |x: usize| 4 + x % (vocab - 4);
    let pair = |id, s: &[usize], g: &[usize]| SentencePair {
        id,
        src: s.iter().map(|&x| t(x)).collect(),
        tgt: g.iter().map(|&x| t(x)).collect(),
    };
    // two mixed examples, five target positions each side, unequal lengths
    let pi = vec![pair(0, &[0, 1, 2], &[3, 4]), pair(1, &[5], &[0])];
    let pj = vec![pair(2, &[2, 3], &[1]), pair(3, &[4, 1, 0], &[2, 5])];
    (pi, pj, vec![0.37, 0.81])
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.vocab < 6 {
        return Err(Error::config("gradcheck vocabulary needs at least 6 tokens"));
    }
    let mcfg = ModelConfig {
        num_layers: cfg.num_layers,
        num_heads: cfg.num_heads,
        d_model: cfg.d_model,
        d_ff: cfg.d_ff,
        src_vocab: cfg.vocab,
        tgt_vocab: cfg.vocab,
        max_len: 8,
        dropout: cfg.dropout,
        label_smoothing: cfg.label_smoothing,
    };
    let model: Transformer<f64> = Transformer::<f32>::new(mcfg.clone(), cfg.seed)?.cast();
    let (pi, pj, lambdas) = batch(cfg.vocab);
    let ri: Vec<&SentencePair> = pi.iter().collect();
    let rj: Vec<&SentencePair> = pj.iter().collect();
    let plan = BatchPlan::<f64>::mixed(&ri, &rj, &lambdas, cfg.vocab, cfg.label_smoothing)?;
    let tree = SeedTree::new(cfg.seed).child("gradcheck");

    // one dropout stream per evaluation, identical across evaluations
    let loss_at = |params: &crate::model::Parameters<f64>, analytic: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        g.inject_fault(cfg.fault);
        let p = params.map(|_, t| g.param(t.clone()));
        let mut rng = tree.stream("dropout");
        let loss = plan.loss(&mut g, &p, &mcfg, Some(&mut rng))?;
        let value = g.value(loss).data()[0];
        if !analytic {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = p.slots().into_iter().map(|v| g.grad(*v).expect("gradient").to_vec()).collect();
        Ok((value, grads))
    };

    let (_, analytic) = loss_at(&model.params, true)?;
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut params = model.params.clone();
    let mut groups: Vec<GroupResult> = Vec::new();
    let mut elements = 0;
    for (slot, name) in names.iter().enumerate() {
        for (e, &a) in analytic[slot].iter().enumerate() {
            let orig = params.slots()[slot].data()[e];
            let mut central = |h: f64| -> Result<f64> {
                params.slots_mut()[slot].data_mut()[e] = orig + h;
                let (up, _) = loss_at(&params, false)?;
                params.slots_mut()[slot].data_mut()[e] = orig - h;
                let (down, _) = loss_at(&params, false)?;
                params.slots_mut()[slot].data_mut()[e] = orig;
                Ok((up - down) / (2.0 * h))
            };
            // Richardson step on top of the central difference: the h^2 term
            // cancels, which the smooth activation otherwise leaves near 1e-4.
            let coarse = central(cfg.step)?;
            let fine = central(cfg.step / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let err = relative_error(a, numeric);
            elements += 1;
            let group = group_of(name);
            let entry = match groups.iter_mut().find(|g| g.group == group) {
                Some(g) => g,
                None => {
                    groups.push(GroupResult {
                        group,
                        elements: 0,
                        worst_rel_err: 0.0,
                        worst_at: (name.clone(), 0),
                    });
                    groups.last_mut().expect("just pushed")
                }
            };
            entry.elements += 1;
            if err > entry.worst_rel_err || err.is_nan() {
                entry.worst_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                entry.worst_at = (name.clone(), e);
            }
        }
    }
    Ok(GradcheckReport {
        groups,
        tolerance: cfg.tolerance,
        elements,
    })
}
