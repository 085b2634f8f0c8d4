use crate::config::{parse_value, unknown_key, KeyValue};
use crate::error::{Error, Result};

/// Hyperparameters of the two-stream network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Slow-stream width; the fast stream uses half.
    pub channels: usize,
    /// Temporal-difference Mamba blocks per stream.
    pub blocks: usize,
    pub d_state: usize,
    pub expand: usize,
    /// Weight of the temporal difference term, in `[0, 1]`.
    pub theta: f64,
    /// Channel-attention reduction ratio.
    pub ca_ratio: usize,
    /// Hidden width of the predictor head.
    pub head_width: usize,
    /// Nominal input extent used for profiling.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Largest `tokens × channels` a block may flatten.
    pub token_budget: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            blocks: 3,
            d_state: 16,
            expand: 2,
            theta: 0.5,
            ca_ratio: 8,
            head_width: 16,
            frames: 128,
            height: 128,
            width: 128,
            token_budget: 1 << 23,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 32/16 channels, two blocks, 32×16×16 input.
    pub fn toy() -> Self {
        ModelConfig {
            channels: 32,
            blocks: 2,
            head_width: 8,
            frames: 32,
            height: 16,
            width: 16,
            ..Self::default()
        }
    }

    pub fn slow_channels(&self) -> usize {
        self.channels
    }

    pub fn fast_channels(&self) -> usize {
        self.channels / 2
    }

    /// Stem widths `(C/4, C/2, C)`.
    pub fn stem_channels(&self) -> [usize; 3] {
        [self.channels / 4, self.channels / 2, self.channels]
    }

    /// Blocks followed by spatial pooling and lateral fusion.
    pub fn fused_blocks(&self) -> usize {
        self.blocks.min(2)
    }

    /// Required divisor of H and W.
    pub fn spatial_divisor(&self) -> usize {
        4 << self.fused_blocks()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c < 4 || c % 4 != 0 {
            return Err(Error::Config(format!("channels must be a positive multiple of 4, got {c}")));
        }
        if self.blocks == 0 {
            return Err(Error::Config("at least one block per stream is required".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if self.ca_ratio == 0 || self.fast_channels() % self.ca_ratio != 0 {
            return Err(Error::Config(format!(
                "both stream widths ({}, {}) must be divisible by the attention ratio {}",
                c,
                self.fast_channels(),
                self.ca_ratio
            )));
        }
        if self.d_state == 0 || self.expand == 0 || self.head_width == 0 {
            return Err(Error::Config("d_state, expand and head_width must be positive".into()));
        }
        self.check_input(self.frames, self.height, self.width)
    }

    /// Divisibility rules for an input of `T × H × W` frames.
    pub fn check_input(&self, t: usize, h: usize, w: usize) -> Result<()> {
        let s = self.spatial_divisor();
        if t == 0 || t % 4 != 0 {
            return Err(Error::Config(format!("frame count must be a positive multiple of 4, got {t}")));
        }
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "height and width must be positive multiples of {s}, got {h}x{w}"
            )));
        }
        Ok(())
    }
}

impl KeyValue for ModelConfig {
    const SECTION: &'static str = "model";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "channels" => self.channels = parse_value(key, value)?,
            "blocks" => self.blocks = parse_value(key, value)?,
            "d_state" => self.d_state = parse_value(key, value)?,
            "expand" => self.expand = parse_value(key, value)?,
            "theta" => self.theta = parse_value(key, value)?,
            "ca_ratio" => self.ca_ratio = parse_value(key, value)?,
            "head_width" => self.head_width = parse_value(key, value)?,
            "frames" => self.frames = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "token_budget" => self.token_budget = parse_value(key, value)?,
            _ => return Err(unknown_key(Self::SECTION, key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("channels", self.channels.to_string()),
            ("blocks", self.blocks.to_string()),
            ("d_state", self.d_state.to_string()),
            ("expand", self.expand.to_string()),
            ("theta", self.theta.to_string()),
            ("ca_ratio", self.ca_ratio.to_string()),
            ("head_width", self.head_width.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("token_budget", self.token_budget.to_string()),
        ]
    }
}
