//! Hypotheses and reference files.
//!
//! A hypotheses file starts with `# key = value` header lines, followed by
//! one line per translation: `input_idx TAB hyp_idx TAB partner_id TAB text`.
//! `partner_id` is `-` for plain beam output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HypothesisLine {
    pub input: usize,
    pub hyp: usize,
    pub partner: Option<usize>,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HypothesesFile {
    pub header: Vec<(String, String)>,
    /// `groups[i][k]` is hypothesis k of input i.
    pub groups: Vec<Vec<HypothesisLine>>,
}

impl HypothesesFile {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn inputs(&self) -> usize {
        self.groups.len()
    }

    /// Hypotheses per input (all inputs share it).
    pub fn k(&self) -> usize {
        self.groups.first().map(Vec::len).unwrap_or(0)
    }

    /// Transposed view: `systems[k][i]`.
    pub fn systems(&self) -> Vec<Vec<String>> {
        (0..self.k())
            .map(|k| self.groups.iter().map(|g| g[k].text.clone()).collect())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(s, "# {k} = {v}");
        }
        for g in &self.groups {
            for h in g {
                let p = h.partner.map_or_else(|| "-".to_string(), |p| p.to_string());
                let _ = writeln!(s, "{}\t{}\t{}\t{}", h.input, h.hyp, p, h.text);
            }
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::format(path, line, msg);
        let mut out = HypothesesFile::default();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            if let Some(h) = raw.strip_prefix('#') {
                if !out.groups.is_empty() {
                    return Err(bad(line_no, "header line after hypotheses".into()));
                }
                let (k, v) = h
                    .split_once('=')
                    .ok_or_else(|| bad(line_no, "header line without '='".into()))?;
                out.header.push((k.trim().to_string(), v.trim().to_string()));
                continue;
            }
            if raw.is_empty() {
                continue;
            }
            let f: Vec<&str> = raw.splitn(4, '\t').collect();
            if f.len() != 4 {
                return Err(bad(line_no, format!("expected 4 tab-separated fields, found {}", f.len())));
            }
            let num = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| bad(line_no, format!("{what} '{s}' is not a non-negative integer")))
            };
            let input = num(f[0], "input index")?;
            let hyp = num(f[1], "hypothesis index")?;
            let partner = match f[2] {
                "-" => None,
                p => Some(num(p, "partner id")?),
            };
            let line = HypothesisLine {
                input,
                hyp,
                partner,
                text: f[3].to_string(),
            };
            if hyp == 0 {
                if input != out.groups.len() {
                    return Err(bad(line_no, format!("expected input {}, found {input}", out.groups.len())));
                }
                out.groups.push(vec![line]);
            } else {
                let g = out
                    .groups
                    .last_mut()
                    .filter(|g| g[0].input == input && g.len() == hyp)
                    .ok_or_else(|| bad(line_no, format!("hypothesis {hyp} of input {input} is out of order")))?;
                g.push(line);
            }
        }
        if out.groups.is_empty() {
            return Err(bad(text.lines().count(), "no hypotheses".into()));
        }
        let k = out.k();
        if let Some(g) = out.groups.iter().find(|g| g.len() != k) {
            return Err(Error::format(
                path,
                0,
                format!("input {} has {} hypotheses, expected {k}", g[0].input, g.len()),
            ));
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }
}

/// One reference sentence per line; a trailing empty line is ignored.
pub fn read_references(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<String> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}
