use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{insert_affine, ParamStore, Session};
use crate::ssm::MambaLayer;
use crate::tensor::Tensor;

/// Uniform `±1/sqrt(fan_in)` initialization.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -s, s, rng)
}

pub(crate) fn register_conv(
    store: &mut ParamStore,
    name: &str,
    shape: [usize; 5],
    rng: &mut impl Rng,
) -> Result<()> {
    let fan_in = shape[1] * shape[2] * shape[3] * shape[4];
    store.insert(format!("{name}.weight"), fan_in_uniform(&shape, fan_in, rng))
}

pub(crate) fn register_linear(
    store: &mut ParamStore,
    name: &str,
    dout: usize,
    din: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(format!("{name}.weight"), fan_in_uniform(&[dout, din], din, rng))?;
    store.insert(format!("{name}.bias"), fan_in_uniform(&[dout], din, rng))
}

/// Temporal difference convolution with a `3×3×3` kernel, stride 1, padding 1:
/// `conv(x, w) - θ · Σ_ci x_ci · S[co, ci]` where `S` sums the kernel over
/// its first and last temporal planes.
pub fn tdc_forward(tape: &Tape, x: &Var, w: &Var, theta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("theta must lie in [0, 1], got {theta}")));
    }
    if w.shape().len() != 5 || w.shape()[2..] != [3, 3, 3] {
        return Err(Error::dim(format!("temporal difference kernel must be 3x3x3, got {:?}", w.shape())));
    }
    let vanilla = tape.conv3d(x, w, None, [1, 1, 1], [1, 1, 1])?;
    if theta == 0.0 {
        return Ok(vanilla);
    }
    let outer = tape.index_select(w, 2, &[0, 2])?;
    let s = tape.sum(&outer, &[2, 3, 4], true)?;
    let diff = tape.conv3d(x, &s, None, [1, 1, 1], [0, 0, 0])?;
    tape.sub(&vanilla, &tape.scale(&diff, theta)?)
}

/// Squeeze-and-excitation gate over the channel axis of a 5-D tensor.
pub fn channel_attention(s: &Session, name: &str, x: &Var) -> Result<Var> {
    let t = s.tape;
    let xs = x.shape().to_vec();
    if xs.len() != 5 {
        return Err(Error::dim(format!("channel attention expects 5-D input, got {xs:?}")));
    }
    let squeezed = t.mean(x, &[2, 3, 4], false)?;
    let hidden = t.relu(&s.linear(&format!("{name}.fc1"), &squeezed, true)?)?;
    let gate = t.sigmoid(&s.linear(&format!("{name}.fc2"), &hidden, true)?)?;
    let gate = t.reshape(&gate, &[xs[0], xs[1], 1, 1, 1])?;
    let gate = t.broadcast_to(&gate, &xs)?;
    t.mul(x, &gate)
}

pub(crate) fn register_channel_attention(
    store: &mut ParamStore,
    name: &str,
    channels: usize,
    ratio: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let hidden = channels / ratio;
    register_linear(store, &format!("{name}.fc1"), hidden, channels, rng)?;
    register_linear(store, &format!("{name}.fc2"), channels, hidden, rng)
}

/// `(B, C, T, H, W) → (B, T·H·W, C)`.
pub fn flatten_tokens(tape: &Tape, x: &Var) -> Result<Var> {
    let s = x.shape().to_vec();
    let p = tape.permute(x, &[0, 2, 3, 4, 1])?;
    tape.reshape(&p, &[s[0], s[2] * s[3] * s[4], s[1]])
}

/// Inverse of [`flatten_tokens`] for the given `(B, C, T, H, W)` shape.
pub fn unflatten_tokens(tape: &Tape, h: &Var, shape: &[usize]) -> Result<Var> {
    let r = tape.reshape(h, &[shape[0], shape[2], shape[3], shape[4], shape[1]])?;
    tape.permute(&r, &[0, 4, 1, 2, 3])
}

/// One temporal-difference Mamba block.
#[derive(Debug, Clone, PartialEq)]
pub struct TdMambaBlock {
    pub prefix: String,
    pub channels: usize,
    pub theta: f64,
    pub ca_ratio: usize,
    pub token_budget: usize,
    pub mamba: MambaLayer,
}

impl TdMambaBlock {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        d_state: usize,
        expand: usize,
        theta: f64,
        ca_ratio: usize,
        token_budget: usize,
    ) -> Self {
        let prefix = prefix.into();
        TdMambaBlock {
            mamba: MambaLayer::new(format!("{prefix}.mamba"), channels, expand, d_state),
            prefix,
            channels,
            theta,
            ca_ratio,
            token_budget,
        }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let h = c / self.ca_ratio;
        c * c * 27 + 2 * c + self.mamba.param_count() + 2 * c + (h * c + h) + (c * h + c)
    }

    /// Multiply-accumulates at spatio-temporal extent `(t, h, w)`, batch 1.
    pub fn macs(&self, t: usize, h: usize, w: usize) -> u64 {
        let c = self.channels as u64;
        let l = (t * h * w) as u64;
        let hid = (self.channels / self.ca_ratio) as u64;
        let tdc = l * c * c * 27 + if self.theta != 0.0 { l * c * c } else { 0 };
        tdc + self.mamba.macs(t * h * w) + 2 * c * hid
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = self.channels;
        register_conv(store, &self.name("tdc"), [c, c, 3, 3, 3], rng)?;
        insert_affine(store, &self.name("bn"), c)?;
        store.insert_norm(self.name("bn"), c)?;
        self.mamba.register(store, rng)?;
        insert_affine(store, &self.name("norm_out"), c)?;
        register_channel_attention(store, &self.name("ca"), c, self.ca_ratio, rng)
    }

    pub fn forward(&self, s: &mut Session, f: &Var) -> Result<Var> {
        let shape = f.shape().to_vec();
        if shape.len() != 5 || shape[1] != self.channels {
            return Err(Error::dim(format!(
                "block `{}` expects (B, {}, T, H, W), got {:?}",
                self.prefix, self.channels, shape
            )));
        }
        let tokens = shape[2] * shape[3] * shape[4];
        if tokens * self.channels > self.token_budget {
            return Err(Error::Capacity(format!(
                "block `{}` would flatten {} tokens × {} channels, above the budget of {}",
                self.prefix, tokens, self.channels, self.token_budget
            )));
        }
        let t = s.tape;
        let w = s.p(&self.name("tdc.weight"))?;
        let x = tdc_forward(t, f, &w, self.theta)?;
        let x = s.batch_norm(&self.name("bn"), &x)?;
        let x = t.relu(&x)?;
        let h = flatten_tokens(t, &x)?;
        let h = self.mamba.forward(s, &h)?;
        let h = s.layer_norm(&self.name("norm_out"), &h)?;
        let g = unflatten_tokens(t, &h, &shape)?;
        channel_attention(s, &self.name("ca"), &g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NormMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn theta_zero_is_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::randn([1, 2, 4, 3, 3], &mut rng)).unwrap();
        let w = tape.constant(Tensor::randn([3, 2, 3, 3, 3], &mut rng)).unwrap();
        let a = tdc_forward(&tape, &x, &w, 0.0).unwrap();
        let b = tape.conv3d(&x, &w, None, [1, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(matches!(tdc_forward(&tape, &x, &w, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_impulse_cancels_at_center() {
        // kernel is one at the centre column of every temporal plane
        let mut w = vec![0.0; 27];
        for kt in 0..3 {
            w[kt * 9 + 4] = 1.0;
        }
        let tape = Tape::no_grad();
        let x = tape
            .constant(Tensor::new([1, 1, 5, 1, 1], vec![0., 0., 1., 0., 0.]).unwrap())
            .unwrap();
        let w = tape.constant(Tensor::new([1, 1, 3, 3, 3], w).unwrap()).unwrap();
        let y = tdc_forward(&tape, &x, &w, 0.5).unwrap();
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(y.data()[1], 1.0);
    }

    #[test]
    fn zero_attention_weights_halve_input() {
        let mut store = ParamStore::new();
        store.insert("ca.fc1.weight", Tensor::zeros([1, 8])).unwrap();
        store.insert("ca.fc1.bias", Tensor::zeros([1])).unwrap();
        store.insert("ca.fc2.weight", Tensor::zeros([8, 1])).unwrap();
        store.insert("ca.fc2.bias", Tensor::zeros([8])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::no_grad();
        let s = store.bind(&tape, NormMode::Eval, false).unwrap();
        let x = tape.constant(Tensor::randn([2, 8, 2, 2, 2], &mut rng)).unwrap();
        let y = channel_attention(&s, "ca", &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn block_preserves_shape_and_counts_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = TdMambaBlock::new("b", 8, 16, 2, 0.5, 8, 1 << 20);
        let mut store = ParamStore::new();
        block.register(&mut store, &mut rng).unwrap();
        assert_eq!(store.num_scalars(), block.param_count());
        let tape = Tape::no_grad();
        let mut s = store.bind(&tape, NormMode::Train, false).unwrap();
        let x = tape.constant(Tensor::randn([1, 8, 4, 4, 4], &mut rng)).unwrap();
        let y = block.forward(&mut s, &x).unwrap();
        assert_eq!(y.shape(), &[1, 8, 4, 4, 4]);
        assert!(y.value().all_finite());
    }

    #[test]
    fn token_budget_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = TdMambaBlock::new("b", 8, 4, 2, 0.5, 8, 100);
        let mut store = ParamStore::new();
        block.register(&mut store, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let mut s = store.bind(&tape, NormMode::Eval, false).unwrap();
        let x = tape.constant(Tensor::zeros([1, 8, 4, 4, 4])).unwrap();
        assert!(matches!(block.forward(&mut s, &x), Err(Error::Capacity(_))));
    }
}
