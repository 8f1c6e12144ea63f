//! Line-oriented text container shared by datasets, checkpoints and prototype files.
//!
//! Line 1 is `<kind> key=value key=value ...`; every following line is a
//! record of single-space separated tokens. Floats are written with Rust's
//! shortest round-trip formatting, so reading back is exact.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl Header {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(1, format!("header missing key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::format(1, format!("header key `{key}` has invalid value `{raw}`")))
    }

    pub fn expect_version(&self, supported: u32) -> Result<()> {
        let v: u32 = self.parse("version")?;
        if v != supported {
            return Err(Error::format(1, format!("unsupported {} version {v}", self.kind)));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = self.kind.clone();
        for (k, v) in &self.fields {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(v);
        }
        s
    }

    pub fn parse_line(line: &str, expected_kind: &str) -> Result<Self> {
        let mut tokens = line.split(' ');
        let kind = tokens.next().unwrap_or_default();
        if kind != expected_kind {
            return Err(Error::format(
                1,
                format!("expected `{expected_kind}` header, found `{kind}`"),
            ));
        }
        let mut header = Header::new(kind);
        for tok in tokens.filter(|t| !t.is_empty()) {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::format(1, format!("header token `{tok}` is not key=value")))?;
            header.fields.push((k.to_string(), v.to_string()));
        }
        Ok(header)
    }
}

pub fn join_floats(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&v.to_string());
    }
    s
}

pub fn parse_floats<'a>(tokens: impl Iterator<Item = &'a str>, line: usize) -> Result<Vec<f64>> {
    tokens
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::format(line, format!("invalid number `{t}`")))
        })
        .collect()
}

pub fn parse_token<T: FromStr>(token: Option<&str>, line: usize, what: &str) -> Result<T> {
    let t = token.ok_or_else(|| Error::format(line, format!("missing {what}")))?;
    t.parse()
        .map_err(|_| Error::format(line, format!("invalid {what} `{t}`")))
}

/// Comma-joined list, `-` when empty.
pub fn join_list<T: Display>(items: &[T]) -> String {
    if items.is_empty() {
        return "-".into();
    }
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_list<T: FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    if raw == "-" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|t| {
            t.parse()
                .map_err(|_| Error::format(1, format!("header key `{key}` has invalid item `{t}`")))
        })
        .collect()
}

/// Tokens allowed inside headers: no whitespace, `=` or `,`.
pub fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '=' || c == ',') {
        return Err(Error::Config(format!(
            "name `{name}` must be non-empty without whitespace, `=` or `,`"
        )));
    }
    Ok(())
}
