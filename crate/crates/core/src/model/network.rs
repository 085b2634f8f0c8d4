use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{register_conv, TdMambaBlock};
use super::config::ModelConfig;
use crate::autodiff::{NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{insert_affine, ParamStore, Session};
use crate::tensor::Tensor;

const POOL: [usize; 3] = [1, 2, 2];

/// Two-stream network: stem, slow/fast temporal-difference Mamba stacks with
/// lateral fusion, and the signal head.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysMamba {
    pub config: ModelConfig,
    pub slow: Vec<TdMambaBlock>,
    pub fast: Vec<TdMambaBlock>,
}

impl PhysMamba {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let block = |stream: &str, i: usize, c: usize| {
            TdMambaBlock::new(
                format!("{stream}.{i}"),
                c,
                config.d_state,
                config.expand,
                config.theta,
                config.ca_ratio,
                config.token_budget,
            )
        };
        let slow = (0..config.blocks).map(|i| block("slow", i, config.slow_channels())).collect();
        let fast = (0..config.blocks).map(|i| block("fast", i, config.fast_channels())).collect();
        Ok(PhysMamba { config, slow, fast })
    }

    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &self.config;
        let [c1, c2, c3] = cfg.stem_channels();
        let (c, cf) = (cfg.slow_channels(), cfg.fast_channels());
        let stem = [[c1, 3, 1, 5, 5], [c2, c1, 3, 3, 3], [c3, c2, 3, 3, 3]];
        for (i, shape) in stem.into_iter().enumerate() {
            register_conv(&mut store, &format!("stem.{i}.conv"), shape, &mut rng)?;
            insert_affine(&mut store, &format!("stem.{i}.bn"), shape[0])?;
            store.insert_norm(format!("stem.{i}.bn"), shape[0])?;
        }
        for (name, out) in [("slow_down", c), ("fast_down", cf)] {
            register_conv(&mut store, &format!("{name}.conv"), [out, c, 3, 1, 1], &mut rng)?;
            insert_affine(&mut store, &format!("{name}.bn"), out)?;
            store.insert_norm(format!("{name}.bn"), out)?;
        }
        for i in 0..cfg.blocks {
            self.slow[i].register(&mut store, &mut rng)?;
            self.fast[i].register(&mut store, &mut rng)?;
            if i < cfg.fused_blocks() {
                register_conv(&mut store, &format!("lateral.{i}"), [c, cf, 3, 1, 1], &mut rng)?;
            }
        }
        let hw = cfg.head_width;
        register_conv(&mut store, "head.conv", [hw, c + cf, 3, 1, 1], &mut rng)?;
        insert_affine(&mut store, "head.bn", hw)?;
        store.insert_norm("head.bn", hw)?;
        register_conv(&mut store, "head.proj", [1, hw, 1, 1, 1], &mut rng)?;
        store.insert("head.proj.bias", Tensor::zeros([1]))?;
        Ok(store)
    }

    fn conv_bn_relu(
        s: &mut Session,
        name: &str,
        x: &Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let w = s.p(&format!("{name}.conv.weight"))?;
        let y = s.tape.conv3d(x, &w, None, stride, padding)?;
        let y = s.batch_norm(&format!("{name}.bn"), &y)?;
        s.tape.relu(&y)
    }

    /// Stem and temporal downsampling into `(slow, fast)` streams.
    pub fn stem_and_split(&self, s: &mut Session, x: &Var) -> Result<(Var, Var)> {
        let xs = x.shape().to_vec();
        if xs.len() != 5 || xs[1] != 3 {
            return Err(Error::dim(format!("expected input (B, 3, T, H, W), got {xs:?}")));
        }
        if xs[2] % 4 != 0 || xs[3] % 4 != 0 || xs[4] % 4 != 0 {
            return Err(Error::Config(format!(
                "stem needs T, H and W divisible by 4, got {}x{}x{}",
                xs[2], xs[3], xs[4]
            )));
        }
        let t = s.tape;
        let y = Self::conv_bn_relu(s, "stem.0", x, [1, 1, 1], [0, 2, 2])?;
        let y = t.maxpool3d(&y, POOL, POOL)?;
        let y = Self::conv_bn_relu(s, "stem.1", &y, [1, 1, 1], [1, 1, 1])?;
        let y = Self::conv_bn_relu(s, "stem.2", &y, [1, 1, 1], [1, 1, 1])?;
        let y = t.maxpool3d(&y, POOL, POOL)?;
        let slow = Self::conv_bn_relu(s, "slow_down", &y, [4, 1, 1], [1, 0, 0])?;
        let fast = Self::conv_bn_relu(s, "fast_down", &y, [2, 1, 1], [1, 0, 0])?;
        Ok((slow, fast))
    }

    /// Temporal stride-2 convolution of the fast stream, shaped like the slow stream.
    pub fn lateral(&self, s: &Session, index: usize, fast: &Var) -> Result<Var> {
        let w = s.p(&format!("lateral.{index}.weight"))?;
        s.tape.conv3d(fast, &w, None, [2, 1, 1], [1, 0, 0])
    }

    /// Lateral fusion by addition.
    pub fn fuse(&self, s: &Session, index: usize, slow: &Var, fast: &Var) -> Result<Var> {
        let l = self.lateral(s, index, fast)?;
        if l.shape() != slow.shape() {
            return Err(Error::dim(format!(
                "lateral output {:?} does not match slow stream {:?}",
                l.shape(),
                slow.shape()
            )));
        }
        s.tape.add(slow, &l)
    }

    /// Signal head: `(B, C, T/4, h, w)` and `(B, C/2, T/2, h, w)` → `(B, T)`.
    pub fn head(&self, s: &mut Session, slow: &Var, fast: &Var) -> Result<Var> {
        let t = s.tape;
        let up = t.repeat_interleave(slow, 2, 2)?;
        if up.shape()[2] != fast.shape()[2] {
            return Err(Error::dim(format!(
                "upsampled slow stream has {} steps, fast stream {}",
                up.shape()[2],
                fast.shape()[2]
            )));
        }
        let cat = t.concat(&[&up, fast], 1)?;
        let pooled = t.mean(&cat, &[3, 4], true)?;
        let up = t.repeat_interleave(&pooled, 2, 2)?;
        let padded = t.pad_replicate(&up, 2, 1, 1)?;
        let w = s.p("head.conv.weight")?;
        let y = t.conv3d(&padded, &w, None, [1, 1, 1], [0, 0, 0])?;
        let y = s.batch_norm("head.bn", &y)?;
        let y = t.relu(&y)?;
        let pw = s.p("head.proj.weight")?;
        let pb = s.p("head.proj.bias")?;
        let y = t.conv3d(&y, &pw, Some(&pb), [1, 1, 1], [0, 0, 0])?;
        let (b, len) = (y.shape()[0], y.shape()[2]);
        t.reshape(&y, &[b, len])
    }

    /// Full forward pass `(B, 3, T, H, W) → (B, T)`.
    pub fn forward(&self, s: &mut Session, x: &Var) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != 5 {
            return Err(Error::dim(format!("expected input (B, 3, T, H, W), got {xs:?}")));
        }
        self.config.check_input(xs[2], xs[3], xs[4])?;
        let (mut slow, mut fast) = self.stem_and_split(s, x)?;
        for i in 0..self.config.blocks {
            slow = self.slow[i].forward(s, &slow)?;
            fast = self.fast[i].forward(s, &fast)?;
            if i < self.config.fused_blocks() {
                slow = s.tape.maxpool3d(&slow, POOL, POOL)?;
                fast = s.tape.maxpool3d(&fast, POOL, POOL)?;
                slow = self.fuse(s, i, &slow, &fast)?;
            }
        }
        self.head(s, &slow, &fast)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, store: &mut ParamStore, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let mut s = store.bind(&tape, mode, false)?;
        let xv = tape.constant(x.clone())?;
        Ok(self.forward(&mut s, &xv)?.to_tensor())
    }
}
