//! Layered `key = value` settings.
//!
//! Later layers win: built-in defaults, then configuration sources (a
//! checkpoint header, a `--config` file), then command-line flags. Every value
//! a command resolves is recorded so it can be echoed into the artifact the
//! command writes; feeding that artifact back through `--config` reproduces
//! the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mixdiv::error::{Error, Result};

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    /// Keys from artifact headers may belong to other commands; they are not
    /// reported as unknown.
    strict: bool,
    origin: String,
}

#[derive(Debug, Default)]
pub struct Settings {
    entries: BTreeMap<String, Entry>,
    used: BTreeSet<String>,
    resolved: Vec<(String, String)>,
}

/// Parses `key = value` lines. `#` lines are comments unless they have the
/// same `# key = value` shape, which is how artifact headers echo settings.
/// In a file that opens with such a header, the first other line ends it, so
/// hypotheses files and sweep CSVs can be passed as configuration.
pub fn parse_pairs(path: &Path, text: &str) -> Result<Vec<(String, String, bool)>> {
    let mut out = Vec::new();
    let mut header_only = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (body, strict) = match line.strip_prefix('#') {
            Some(rest) => (rest.trim(), false),
            None => (line, true),
        };
        match body.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() && !k.trim().contains(' ') => {
                header_only &= !strict;
                out.push((k.trim().replace('-', "_"), v.trim().to_string(), strict));
            }
            _ if !strict => {}
            _ if header_only && !out.is_empty() => break,
            _ => return Err(Error::format(path, i + 1, format!("expected `key = value`, got `{raw}`"))),
        }
    }
    Ok(out)
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn layer(&mut self, origin: &str, pairs: impl IntoIterator<Item = (String, String, bool)>) {
        for (key, value, strict) in pairs {
            self.entries.insert(
                key,
                Entry {
                    value,
                    strict,
                    origin: origin.to_string(),
                },
            );
        }
    }

    /// Adds entries only where no layer has set the key yet.
    pub fn layer_under(&mut self, origin: &str, pairs: impl IntoIterator<Item = (String, String, bool)>) {
        let fresh: Vec<_> = pairs.into_iter().filter(|(k, _, _)| !self.entries.contains_key(k)).collect();
        self.layer(origin, fresh);
    }

    /// Adds a `--config` file. A missing file is a usage error.
    pub fn layer_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let pairs = parse_pairs(path, &text)?;
        self.layer(&path.display().to_string(), pairs);
        Ok(())
    }

    fn lookup<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        e.value
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("bad value `{}` for `{key}` in {}", e.value, e.origin)))
    }

    fn record(&mut self, key: &str, value: String) {
        self.used.insert(key.to_string());
        self.resolved.retain(|(k, _)| k != key);
        self.resolved.push((key.to_string(), value));
    }

    /// Flag, else configured value, else `default`.
    pub fn get<T: FromStr + fmt::Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.lookup(key)?.unwrap_or(default),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Like [`get`](Self::get) without a default; absent values are recorded as `none`.
    pub fn opt<T: FromStr + fmt::Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.entries.get(key) {
                Some(e) if e.value == "none" => {
                    self.used.insert(key.to_string());
                    None
                }
                _ => self.lookup(key)?,
            },
        };
        self.record(key, v.as_ref().map_or_else(|| "none".to_string(), T::to_string));
        Ok(v)
    }

    pub fn required<T: FromStr + fmt::Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.lookup(key)?.ok_or_else(|| {
                Error::config(format!("missing required setting `{key}` (flag --{})", key.replace('_', "-")))
            })?,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Every resolved value in resolution order. Errors on unknown keys from
    /// plain configuration lines.
    pub fn finish(&self) -> Result<Vec<(String, String)>> {
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, e)| e.strict && !self.used.contains(*k))
            .map(|(k, e)| format!("`{k}` ({})", e.origin))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown settings: {}", unknown.join(", "))));
        }
        Ok(self.resolved.clone())
    }
}

/// `on`/`off` switch, also accepting `true`/`false`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switch(pub bool);

impl FromStr for Switch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on" | "true" => Ok(Switch(true)),
            "off" | "false" => Ok(Switch(false)),
            _ => Err(format!("expected `on` or `off`, got `{s}`")),
        }
    }
}

impl fmt::Display for Switch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0 { "on" } else { "off" })
    }
}

/// Comma-separated list.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("bad list item `{p}`")))
            .collect::<std::result::Result<Vec<T>, String>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(T::to_string).collect();
        f.write_str(&parts.join(","))
    }
}
