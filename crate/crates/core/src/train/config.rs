use crate::config::{parse_value, unknown_key, KeyValue};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameter initialization, shuffling and window offsets.
    pub seed: u64,
    /// Random windows drawn from every clip per epoch.
    pub windows_per_clip: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            windows_per_clip: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.windows_per_clip == 0 {
            return Err(Error::Config("batch_size and windows_per_clip must be at least 1".into()));
        }
        Ok(())
    }
}

impl KeyValue for TrainConfig {
    const SECTION: &'static str = "train";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "windows_per_clip" => self.windows_per_clip = parse_value(key, value)?,
            _ => return Err(unknown_key(Self::SECTION, key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("windows_per_clip", self.windows_per_clip.to_string()),
        ]
    }
}
