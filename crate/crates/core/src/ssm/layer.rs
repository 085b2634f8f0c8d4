//! Bidirectional Mamba layer built on the fused selective scan.

use rand::Rng;

use super::selective::SsmParams;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{insert_affine, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// Width of the depthwise causal convolution ahead of the scan.
pub const CONV_KERNEL: usize = 4;

/// Shape description of one layer; parameters live in a [`ParamStore`]
/// under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaLayer {
    pub prefix: String,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

impl MambaLayer {
    pub fn new(prefix: impl Into<String>, d_model: usize, expand: usize, d_state: usize) -> Self {
        MambaLayer {
            prefix: prefix.into(),
            d_model,
            d_inner: expand * d_model,
            d_state,
            dt_rank: d_model.div_ceil(16),
        }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    fn dir_name(&self, dir: Direction, suffix: &str) -> String {
        format!("{}.{}.{}", self.prefix, dir.tag(), suffix)
    }

    /// Number of scalar parameters registered by [`MambaLayer::register`].
    pub fn param_count(&self) -> usize {
        let (c, d, n, r) = (self.d_model, self.d_inner, self.d_state, self.dt_rank);
        let per_dir = d * n + 2 * n * d + r * d + d * r + d;
        2 * c + 2 * d * c + d * CONV_KERNEL + d + 2 * per_dir + c * d
    }

    /// Multiply-accumulates for one sequence of `len` tokens (both directions).
    pub fn macs(&self, len: usize) -> u64 {
        let (c, d, n, r) = (
            self.d_model as u64,
            self.d_inner as u64,
            self.d_state as u64,
            self.dt_rank as u64,
        );
        let l = len as u64;
        let per_dir = l * d * CONV_KERNEL as u64 + 2 * l * d * n + 2 * l * d * r + 3 * l * d * n;
        l * c * 2 * d + 2 * per_dir + l * d * c
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let (c, d) = (self.d_model, self.d_inner);
        insert_affine(store, &self.name("norm"), c)?;
        let s = 1.0 / (c as f64).sqrt();
        store.insert(self.name("in_proj.weight"), Tensor::uniform([2 * d, c], -s, s, rng))?;
        let k = 1.0 / (CONV_KERNEL as f64).sqrt();
        store.insert(self.name("conv.weight"), Tensor::uniform([d, CONV_KERNEL], -k, k, rng))?;
        store.insert(self.name("conv.bias"), Tensor::uniform([d], -k, k, rng))?;
        for dir in [Direction::Forward, Direction::Backward] {
            let p = SsmParams::init(d, self.d_state, self.dt_rank, rng);
            self.store_ssm(store, dir, p, true)?;
        }
        let o = 1.0 / (d as f64).sqrt();
        store.insert(self.name("out_proj.weight"), Tensor::uniform([c, d], -o, o, rng))
    }

    fn store_ssm(&self, store: &mut ParamStore, dir: Direction, p: SsmParams, fresh: bool) -> Result<()> {
        let entries = [
            ("a_log", p.a_log),
            ("b_proj.weight", p.b_proj),
            ("c_proj.weight", p.c_proj),
            ("dt_down.weight", p.dt_down),
            ("dt_up.weight", p.dt_up),
            ("dt_up.bias", p.dt_bias),
        ];
        for (suffix, t) in entries {
            let name = self.dir_name(dir, suffix);
            if fresh {
                store.insert(name, t)?;
            } else {
                let slot = store
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::dim(format!("`{name}` expects shape {:?}", slot.shape())));
                }
                *slot = t.with_requires_grad(true);
            }
        }
        Ok(())
    }

    /// Copy of the scan parameters of one direction.
    pub fn ssm_params(&self, store: &ParamStore, dir: Direction) -> Result<SsmParams> {
        let get = |suffix: &str| {
            let name = self.dir_name(dir, suffix);
            store
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
        };
        Ok(SsmParams {
            a_log: get("a_log")?,
            b_proj: get("b_proj.weight")?,
            c_proj: get("c_proj.weight")?,
            dt_down: get("dt_down.weight")?,
            dt_up: get("dt_up.weight")?,
            dt_bias: get("dt_up.bias")?,
        })
    }

    pub fn set_ssm_params(&self, store: &mut ParamStore, dir: Direction, p: SsmParams) -> Result<()> {
        self.store_ssm(store, dir, p, false)
    }

    /// Accept `(L, C)` or `(B, L, C)`; returns the batched view and whether it was unbatched.
    fn batched(&self, s: &Session, h: &Var) -> Result<(Var, bool)> {
        match h.shape() {
            &[l, c] if c == self.d_model => Ok((s.tape.reshape(h, &[1, l, c])?, true)),
            &[_, _, c] if c == self.d_model => Ok((h.clone(), false)),
            other => Err(Error::dim(format!(
                "layer expects (B, L, {}) input, got {:?}",
                self.d_model, other
            ))),
        }
    }

    fn unbatch(&self, s: &Session, y: Var, was_unbatched: bool) -> Result<Var> {
        if was_unbatched {
            let shape = y.shape()[1..].to_vec();
            s.tape.reshape(&y, &shape)
        } else {
            Ok(y)
        }
    }

    /// Normalize and project to the `(x, z)` streams.
    fn project(&self, s: &Session, h: &Var) -> Result<(Var, Var)> {
        let hn = s.layer_norm(&self.name("norm"), h)?;
        let xz = s.linear(&self.name("in_proj"), &hn, false)?;
        let x = s.tape.narrow(&xz, 2, 0, self.d_inner)?;
        let z = s.tape.narrow(&xz, 2, self.d_inner, self.d_inner)?;
        Ok((x, z))
    }

    /// Convolution, activation and selective scan of one direction on `x: (B, L, D_inner)`.
    /// The backward direction runs on the sequence reversed and returns its
    /// output restored to forward order.
    fn scan_direction(&self, s: &Session, x: &Var, dir: Direction) -> Result<Var> {
        let t = s.tape;
        let x = match dir {
            Direction::Forward => x.clone(),
            Direction::Backward => t.flip(x, 1)?,
        };
        let conv = t.causal_depthwise_conv1d(
            &x,
            &s.p(&self.name("conv.weight"))?,
            &s.p(&self.name("conv.bias"))?,
        )?;
        let u = t.silu(&conv)?;
        let bm = s.linear(&self.dir_name(dir, "b_proj"), &u, false)?;
        let cm = s.linear(&self.dir_name(dir, "c_proj"), &u, false)?;
        let low = s.linear(&self.dir_name(dir, "dt_down"), &u, false)?;
        let dt = t.softplus(&s.linear(&self.dir_name(dir, "dt_up"), &low, true)?)?;
        let a = t.neg(&t.exp(&s.p(&self.dir_name(dir, "a_log"))?)?)?;
        let y = t.selective_scan(&u, &dt, &a, &bm, &cm)?;
        match dir {
            Direction::Forward => Ok(y),
            Direction::Backward => t.flip(&y, 1),
        }
    }

    /// Ungated output of one direction, `(…, L, E·C)`.
    pub fn forward_direction(&self, s: &Session, h: &Var, dir: Direction) -> Result<Var> {
        let (hb, unb) = self.batched(s, h)?;
        let (x, _) = self.project(s, &hb)?;
        let y = self.scan_direction(s, &x, dir)?;
        self.unbatch(s, y, unb)
    }

    /// `out_proj((y_fwd + y_bwd) ⊙ silu(z)) + h`.
    pub fn forward(&self, s: &Session, h: &Var) -> Result<Var> {
        let (hb, unb) = self.batched(s, h)?;
        let t = s.tape;
        let (x, z) = self.project(s, &hb)?;
        let yf = self.scan_direction(s, &x, Direction::Forward)?;
        let yb = self.scan_direction(s, &x, Direction::Backward)?;
        let gated = t.mul(&t.add(&yf, &yb)?, &t.silu(&z)?)?;
        let out = s.linear(&self.name("out_proj"), &gated, false)?;
        let y = t.add(&out, &hb)?;
        self.unbatch(s, y, unb)
    }
}
