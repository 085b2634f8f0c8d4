//! Configuration resolution: defaults, then the config file, then `--set`
//! overrides. Every key must belong to the `model`, `synth` or `train`
//! section.

use std::fs;
use std::path::Path;

use physmamba_core::config::{apply_section, parse_kv};
use physmamba_core::{KeyValue, ModelConfig, SynthConfig, TrainConfig};

use crate::error::{CliError, CliResult};

pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct Settings {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}


impl Settings {
    pub fn resolve(config: Option<&Path>, overrides: &[String]) -> CliResult<Settings> {
        let mut pairs = match config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                parse_kv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => Vec::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not `key=value`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Settings::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> CliResult<Settings> {
        let mut s = Settings::default();
        let rest = apply_section(&mut s.model, pairs)?;
        let rest = apply_section(&mut s.synth, &rest)?;
        let rest = apply_section(&mut s.train, &rest)?;
        if let Some((k, _)) = rest.first() {
            return Err(CliError::Usage(format!("unknown key `{k}`")));
        }
        Ok(s)
    }

    pub fn to_kv(&self) -> String {
        format!("{}{}{}", self.model.to_kv(), self.synth.to_kv(), self.train.to_kv())
    }

    /// Write `resolved_config.txt` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_kv()).map_err(|e| CliError::io(path, e))
    }
}

/// Every configuration key with its default, for `--help`.
pub fn keys_help() -> String {
    let d = Settings::default();
    let mut out = String::from("Configuration keys (`key = value`, one per line, `#` comments) and defaults:\n");
    for line in d.to_kv().lines() {
        out.push_str("  ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("\nExit codes: 0 success, 1 verification or numeric failure, 2 usage, configuration or shape error, 3 i/o, format or missing-data error.");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn sections_are_routed() {
        let s = Settings::from_pairs(&kv(&[("model.channels", "16"), ("synth.clips", "3"), ("train.lr", "0.01")])).unwrap();
        assert_eq!((s.model.channels, s.synth.clips, s.train.lr), (16, 3, 0.01));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["model.nope", "other.lr", "lr"] {
            let err = Settings::from_pairs(&kv(&[(bad, "1")])).unwrap_err();
            assert_eq!(err.exit_code(), crate::error::exit::USAGE, "{bad}");
        }
    }

    #[test]
    fn snapshot_reproduces_settings() {
        let s = Settings::from_pairs(&kv(&[("model.theta", "0.25"), ("train.seed", "7")])).unwrap();
        let again = Settings::from_pairs(&parse_kv(&s.to_kv()).unwrap()).unwrap();
        assert_eq!(again, s);
    }
}
