use std::path::Path;

use mixdiv::error::Result;
use mixdiv::gradcheck::{run_gradcheck, GradcheckConfig};

use crate::settings::Switch;
use crate::GradcheckArgs;

/// Prints the per-group report; exit code 3 when any group exceeds the tolerance.
pub fn run(config: Option<&Path>, a: GradcheckArgs) -> Result<u8> {
    let mut s = super::settings(config)?;
    let d = GradcheckConfig::default();
    let cfg = GradcheckConfig {
        num_layers: s.get("num_layers", a.num_layers, d.num_layers)?,
        num_heads: s.get("num_heads", a.num_heads, d.num_heads)?,
        d_model: s.get("d_model", a.d_model, d.d_model)?,
        d_ff: s.get("d_ff", a.d_ff, d.d_ff)?,
        vocab: s.get("vocab", a.vocab, d.vocab)?,
        step: s.get("step", a.step, d.step)?,
        tolerance: s.get("tolerance", a.tolerance, d.tolerance)?,
        dropout: s.get("dropout", a.dropout, d.dropout)?,
        label_smoothing: s.get("label_smoothing", a.label_smoothing, d.label_smoothing)?,
        seed: s.get("seed", a.seed, d.seed)?,
        fault: s.get("fault", a.fault, Switch(false))?.0,
    };
    for (k, v) in s.finish()? {
        println!("# {k} = {v}");
    }
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.render());
    Ok(if report.passed() { 0 } else { 3 })
}
