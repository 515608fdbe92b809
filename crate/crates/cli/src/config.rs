//! Flat `key = value` configuration files with `[section]` headers.
//!
//! Keys before the first header are global. `[run NAME]` headers open a named
//! run whose keys are `section.key` overrides of the base configuration (plus a
//! few run-only keys). `#` and `;` start comments.

use std::collections::BTreeMap;
use std::fmt;

/// Where a value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => f.write_str("--set"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Value {
    pub text: String,
    pub origin: Origin,
}

/// A syntax or validation error anchored to a config line.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{origin}: {message}")]
pub struct ConfigError {
    pub origin: Origin,
    pub message: String,
}

impl ConfigError {
    pub fn new(origin: Origin, message: impl Into<String>) -> Self {
        Self {
            origin,
            message: message.into(),
        }
    }
}

/// `section -> key -> value`; globals live under the empty section name.
pub type Sections = BTreeMap<String, BTreeMap<String, Value>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRun {
    pub name: String,
    pub line: usize,
    pub entries: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    pub sections: Sections,
    pub runs: Vec<RawRun>,
}

enum Target {
    Section(String),
    Run(usize),
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(i) => &line[..i],
        None => line,
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RawConfig::default();
        cfg.sections.insert(String::new(), BTreeMap::new());
        let mut target = Target::Section(String::new());
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| ConfigError::new(Origin::Line(n), m);
            if let Some(header) = line.strip_prefix('[') {
                let header = header
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header '{line}'")))?
                    .trim();
                if let Some(name) = header.strip_prefix("run ").map(str::trim) {
                    if !is_ident(name) {
                        return Err(err(format!("bad run name '{name}'")));
                    }
                    if cfg.runs.iter().any(|r| r.name == name) {
                        return Err(err(format!("duplicate run '{name}'")));
                    }
                    cfg.runs.push(RawRun {
                        name: name.to_string(),
                        line: n,
                        entries: BTreeMap::new(),
                    });
                    target = Target::Run(cfg.runs.len() - 1);
                } else {
                    if !is_ident(header) || header.contains('.') {
                        return Err(err(format!("bad section name '{header}'")));
                    }
                    if cfg.sections.contains_key(header) && !header.is_empty() {
                        return Err(err(format!("duplicate section [{header}]")));
                    }
                    cfg.sections.insert(header.to_string(), BTreeMap::new());
                    target = Target::Section(header.to_string());
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if !is_ident(key) {
                return Err(err(format!("bad key '{key}'")));
            }
            let entries = match &target {
                Target::Section(s) => cfg.sections.get_mut(s).expect("section inserted at header"),
                Target::Run(r) => &mut cfg.runs[*r].entries,
            };
            let v = Value {
                text: value.to_string(),
                origin: Origin::Line(n),
            };
            if entries.insert(key.to_string(), v).is_some() {
                return Err(err(format!("duplicate key '{key}'")));
            }
        }
        Ok(cfg)
    }

    /// Applies a `section.key=value` (or bare global `key=value`) override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let err = |m: String| ConfigError::new(Origin::Flag, m);
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| err(format!("expected section.key=value, got '{assignment}'")))?;
        let (section, key) = split_path(path.trim());
        if !is_ident(key) {
            return Err(err(format!("bad key '{path}'")));
        }
        self.sections.entry(section.to_string()).or_default().insert(
            key.to_string(),
            Value {
                text: value.trim().to_string(),
                origin: Origin::Flag,
            },
        );
        Ok(())
    }

    /// The base sections with one run's `section.key` entries laid over them.
    /// Run-only keys (no dot) are returned separately.
    pub fn overlay(&self, run: &RawRun) -> (Sections, BTreeMap<String, Value>) {
        let mut sections = self.sections.clone();
        let mut own = BTreeMap::new();
        for (path, v) in &run.entries {
            match path.split_once('.') {
                Some((s, k)) => {
                    sections
                        .entry(s.to_string())
                        .or_default()
                        .insert(k.to_string(), v.clone());
                }
                None => {
                    own.insert(path.clone(), v.clone());
                }
            }
        }
        (sections, own)
    }
}

fn split_path(path: &str) -> (&str, &str) {
    match path.split_once('.') {
        Some((s, k)) => (s, k),
        None => ("", path),
    }
}

/// Canonical `section.key=value` lines of the selected sections, sorted.
pub fn canonical(sections: &Sections, include: impl Fn(&str, &str) -> bool) -> String {
    let mut out = String::new();
    for (s, entries) in sections {
        for (k, v) in entries {
            if include(s, k) {
                if s.is_empty() {
                    out.push_str(&format!("{k}={}\n", v.text));
                } else {
                    out.push_str(&format!("{s}.{k}={}\n", v.text));
                }
            }
        }
    }
    out
}

/// Typed access to one section that remembers which keys were read.
pub struct SectionReader<'a> {
    name: &'a str,
    entries: Option<&'a BTreeMap<String, Value>>,
    fallback: Option<&'a BTreeMap<String, Value>>,
    used: std::cell::RefCell<Vec<String>>,
}

impl<'a> SectionReader<'a> {
    pub fn new(sections: &'a Sections, name: &'a str) -> Self {
        Self {
            name,
            entries: sections.get(name),
            fallback: None,
            used: Default::default(),
        }
    }

    /// Keys missing here are looked up in `fallback` (a section name).
    pub fn with_fallback(mut self, sections: &'a Sections, fallback: &str) -> Self {
        self.fallback = sections.get(fallback);
        self
    }

    pub fn raw(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().push(key.to_string());
        self.entries
            .and_then(|e| e.get(key))
            .or_else(|| self.fallback.and_then(|f| f.get(key)))
    }

    fn bad(&self, v: &Value, key: &str, expected: &str) -> ConfigError {
        ConfigError::new(
            v.origin.clone(),
            format!("[{}] {key}: expected {expected}, got '{}'", self.name, v.text),
        )
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str, expected: &str, default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.text.parse().map_err(|_| self.bad(v, key, expected)),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let x: f64 = self.parsed(key, "a number", default)?;
        if let Some(v) = self.raw(key) {
            if !x.is_finite() {
                return Err(self.bad(v, key, "a finite number"));
            }
        }
        Ok(x)
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parsed(key, "a non-negative integer", default)
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parsed(key, "a non-negative integer", default)
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => match v.text.as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(self.bad(v, key, "true or false")),
            },
        }
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.raw(key).map(|v| v.text.clone())
    }

    /// One of `choices`, mapped to its value.
    pub fn choice<T: Copy>(&self, key: &str, choices: &[(&str, T)], default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => choices
                .iter()
                .find(|(name, _)| *name == v.text)
                .map(|(_, t)| *t)
                .ok_or_else(|| {
                    let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
                    self.bad(v, key, &format!("one of {}", names.join(", ")))
                }),
        }
    }

    /// Comma-separated list; an empty value gives an empty list.
    pub fn list<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &str,
        default: Vec<T>,
    ) -> Result<Vec<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) if v.text.is_empty() => Ok(Vec::new()),
            Some(v) => v
                .text
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| self.bad(v, key, expected)))
                .collect(),
        }
    }

    pub fn error(&self, key: &str, message: impl Into<String>) -> ConfigError {
        let origin = self.raw(key).map(|v| v.origin.clone()).unwrap_or(Origin::Line(0));
        ConfigError::new(origin, format!("[{}] {key}: {}", self.name, message.into()))
    }

    /// Fails on the first key in this section that was never read.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        if let Some(entries) = self.entries {
            for (k, v) in entries {
                if !used.contains(k) {
                    return Err(ConfigError::new(
                        v.origin.clone(),
                        format!("unknown key '{k}' in [{}]", self.name),
                    ));
                }
            }
        }
        Ok(())
    }
}
