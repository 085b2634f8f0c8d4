//! Flat `key = value` settings shared by every configurable record.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A record that can be read from and written to `key = value` pairs.
pub trait KeyValue {
    /// Prefix used for this record's keys in combined files, e.g. `model`.
    const SECTION: &'static str;

    /// Assign one field from its textual value.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every field as `(key, value)` in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Render as `section.key = value` lines.
    fn to_kv(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{}.{} = {}\n", Self::SECTION, k, v))
            .collect()
    }

    /// Hex SHA-256 of the canonical rendering.
    fn config_hash(&self) -> String {
        sha256_hex(self.to_kv().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse `key = value` text: blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{}`", i + 1, raw.trim()))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Apply the pairs addressed to `T::SECTION` (as `section.key`) and return the rest.
pub fn apply_section<T: KeyValue>(target: &mut T, pairs: &[(String, String)]) -> Result<Vec<(String, String)>> {
    let mut rest = Vec::new();
    for (k, v) in pairs {
        match k.split_once('.') {
            Some((section, key)) if section == T::SECTION => target.set(key, v)?,
            _ => rest.push((k.clone(), v.clone())),
        }
    }
    Ok(rest)
}

/// Parse a record from text that addresses only its own section.
pub fn from_kv_text<T: KeyValue + Default>(text: &str) -> Result<T> {
    let mut out = T::default();
    let rest = apply_section(&mut out, &parse_kv(text)?)?;
    if let Some((k, _)) = rest.first() {
        return Err(Error::Config(format!("unknown key `{k}`")));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn unknown_key(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key `{section}.{key}`"))
}
