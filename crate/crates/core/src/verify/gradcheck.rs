//! Central finite-difference checks of reverse-mode gradients.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormStats, NormMode, Tape, Var};
use crate::error::Result;
use crate::model::{tdc_forward, ModelConfig, PhysMamba, TdMambaBlock};
use crate::params::{ParamStore, Session};
use crate::signal::neg_pearson_loss;
use crate::ssm::MambaLayer;
use crate::tensor::Tensor;

/// Primary finite-difference step.
pub const STEP: f64 = 1e-5;
/// Steps retried, in order, for a coordinate that disagrees at [`STEP`]:
/// larger ones escape rounding noise on small gradients, the smaller one
/// escapes activation kinks falling inside the stencil.
pub const FALLBACK_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-6];
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude below which gradients are compared in absolute terms.
pub const FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates that only agreed at a fallback step.
    pub fallbacks: usize,
    /// Coordinates sitting on a kink, checked against the one-sided slopes.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub elapsed: Duration,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// Which coordinates to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    All,
    /// At least one coordinate per tensor, then random ones up to the count.
    Count(usize),
}

fn pick(sizes: &[usize], sampling: Sampling, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..n).map(move |k| (i, k)))
        .collect();
    match sampling {
        Sampling::All => all,
        Sampling::Count(n) if n >= all.len() => all,
        Sampling::Count(n) => {
            let mut chosen: Vec<(usize, usize)> = sizes
                .iter()
                .enumerate()
                .filter(|(_, &s)| s > 0)
                .map(|(i, &s)| (i, rng.gen_range(0..s)))
                .collect();
            let mut rest: Vec<(usize, usize)> = all.into_iter().filter(|c| !chosen.contains(c)).collect();
            rest.shuffle(rng);
            let extra = n.saturating_sub(chosen.len());
            chosen.extend(rest.into_iter().take(extra));
            chosen.sort_unstable();
            chosen
        }
    }
}

/// How a single coordinate was confirmed.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Agreement {
    Primary,
    Fallback,
    /// The loss has a kink at the current point: the one-sided slopes differ
    /// at every step and the analytic value lies between them.
    Kink,
}

/// Smallest relative error over the primary and fallback steps, stopping at
/// the first that meets the tolerance. When none does, the coordinate still
/// passes if the one-sided slopes at the smallest step bracket the analytic
/// value and are clearly distinct.
fn coordinate_error(analytic: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<(f64, Agreement)> {
    let mut best = f64::INFINITY;
    for (i, h) in std::iter::once(STEP).chain(FALLBACK_STEPS).enumerate() {
        let numeric = (at(h)? - at(-h)?) / (2.0 * h);
        best = best.min(relative_error(analytic, numeric));
        if best <= TOLERANCE {
            let how = if i == 0 { Agreement::Primary } else { Agreement::Fallback };
            return Ok((best, how));
        }
    }
    let h = FALLBACK_STEPS[FALLBACK_STEPS.len() - 1];
    let centre = at(0.0)?;
    let right = (at(h)? - centre) / h;
    let left = (centre - at(-h)?) / h;
    let (lo, hi) = (left.min(right), left.max(right));
    let slack = TOLERANCE * hi.abs().max(lo.abs()).max(FLOOR);
    if relative_error(left, right) > 10.0 * TOLERANCE && analytic >= lo - slack && analytic <= hi + slack {
        return Ok((0.0, Agreement::Kink));
    }
    Ok((best, Agreement::Primary))
}

/// `Σ out ⊙ weights`, or `out` itself when it is already a scalar.
fn reduce(tape: &Tape, out: &Var, weights: &Option<Tensor>) -> Result<Var> {
    match weights {
        None => Ok(out.clone()),
        Some(w) => {
            let w = tape.constant(w.clone())?;
            tape.sum_all(&tape.mul(out, &w)?)
        }
    }
}

fn projection(shape: &[usize], rng: &mut impl Rng) -> Option<Tensor> {
    (shape.iter().product::<usize>() != 1).then(|| Tensor::randn(shape.to_vec(), rng))
}

/// Check the gradient of `f` with respect to every input tensor.
pub fn check_op<F>(name: &str, inputs: Vec<Tensor>, sampling: Sampling, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value = |xs: &[Tensor], w: &Option<Tensor>| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars = xs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        Ok(reduce(&tape, &f(&tape, &vars)?, w)?.data()[0])
    };
    let weights = {
        let tape = Tape::no_grad();
        let vars = inputs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        projection(f(&tape, &vars)?.shape(), &mut rng)
    };
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let loss = reduce(&tape, &f(&tape, &vars)?, &weights)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
    let coords = pick(&sizes, sampling, &mut rng);
    let mut worst = 0.0f64;
    let (mut fallbacks, mut kinks) = (0, 0);
    let mut xs = inputs;
    for &(i, k) in &coords {
        let orig = xs[i].data()[k];
        let (err, how) = coordinate_error(analytic[i].data()[k], |h| {
            xs[i].data_mut()[k] = orig + h;
            let v = value(&xs, &weights);
            xs[i].data_mut()[k] = orig;
            v
        })?;
        fallbacks += (how == Agreement::Fallback) as usize;
        kinks += (how == Agreement::Kink) as usize;
        worst = worst.max(err);
    }
    Ok(GradReport {
        name: name.to_string(),
        checked: coords.len(),
        fallbacks,
        kinks,
        max_rel_error: worst,
        elapsed: start.elapsed(),
    })
}

/// Check the gradient of a parameterized forward pass with respect to the
/// parameters in `store`. Batch-norm layers run in `mode`.
pub fn check_params<F>(
    name: &str,
    store: &ParamStore,
    input: &Tensor,
    mode: NormMode,
    sampling: Sampling,
    seed: u64,
    forward: F,
) -> Result<GradReport>
where
    F: Fn(&mut Session, &Var) -> Result<Var>,
{
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value = |store: &ParamStore, w: &Option<Tensor>| -> Result<f64> {
        let mut st = store.clone();
        let tape = Tape::no_grad();
        let mut s = st.bind(&tape, mode, false)?;
        let x = tape.constant(input.clone())?;
        let out = forward(&mut s, &x)?;
        Ok(reduce(&tape, &out, w)?.data()[0])
    };
    let weights = {
        let mut st = store.clone();
        let tape = Tape::no_grad();
        let mut s = st.bind(&tape, mode, false)?;
        let x = tape.constant(input.clone())?;
        projection(forward(&mut s, &x)?.shape(), &mut rng)
    };
    let analytic = {
        let mut st = store.clone();
        let tape = Tape::new();
        let mut s = st.bind(&tape, mode, true)?;
        let x = tape.constant(input.clone())?;
        let loss = reduce(&tape, &forward(&mut s, &x)?, &weights)?;
        let g = tape.backward(&loss)?;
        s.gradients(&g)
    };
    let sizes: Vec<usize> = store.iter().map(|(_, t)| t.numel()).collect();
    let coords = pick(&sizes, sampling, &mut rng);
    let mut worst = 0.0f64;
    let (mut fallbacks, mut kinks) = (0, 0);
    let mut st = store.clone();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for &(i, k) in &coords {
        let pname = &names[i];
        let orig = st.get(pname).expect("present").data()[k];
        let (err, how) = coordinate_error(analytic[i].data()[k], |h| {
            st.get_mut(pname).expect("present").data_mut()[k] = orig + h;
            let v = value(&st, &weights);
            st.get_mut(pname).expect("present").data_mut()[k] = orig;
            v
        })?;
        if err > TOLERANCE {
            log::warn!("{name}: `{pname}`[{k}] relative error {err:.3e}");
        }
        fallbacks += (how == Agreement::Fallback) as usize;
        kinks += (how == Agreement::Kink) as usize;
        worst = worst.max(err);
    }
    Ok(GradReport {
        name: name.to_string(),
        checked: coords.len(),
        fallbacks,
        kinks,
        max_rel_error: worst,
        elapsed: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// input generators

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), rng)
}

/// Values with magnitude in `[0.2, 1.5]` and random sign, clear of kinks at 0.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn positive(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 0.5, 2.0, rng)
}

/// Distinct values at least 0.05 apart, so maxima are unique and stable
/// under the finite-difference step.
fn distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    v.shuffle(rng);
    Tensor::from_parts(shape.to_vec(), v)
}

// ---------------------------------------------------------------------------
// suites

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut impl Rng) -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $f:expr) => {
            cases.push(($name, vec![$($input),*], Box::new($f)))
        };
    }
    let s = [3, 4];
    case!("add", [normal(&s, rng), normal(&s, rng)], |t, v| t.add(&v[0], &v[1]));
    case!("sub", [normal(&s, rng), normal(&s, rng)], |t, v| t.sub(&v[0], &v[1]));
    case!("mul", [normal(&s, rng), normal(&s, rng)], |t, v| t.mul(&v[0], &v[1]));
    case!("div", [normal(&s, rng), away_from_zero(&s, rng)], |t, v| t.div(&v[0], &v[1]));
    case!("exp", [normal(&s, rng)], |t, v| t.exp(&v[0]));
    case!("ln", [positive(&s, rng)], |t, v| t.ln(&v[0]));
    case!("sqrt", [positive(&s, rng)], |t, v| t.sqrt(&v[0]));
    case!("square", [normal(&s, rng)], |t, v| t.square(&v[0]));
    case!("neg", [normal(&s, rng)], |t, v| t.neg(&v[0]));
    case!("relu", [away_from_zero(&s, rng)], |t, v| t.relu(&v[0]));
    case!("silu", [normal(&s, rng)], |t, v| t.silu(&v[0]));
    case!("sigmoid", [normal(&s, rng)], |t, v| t.sigmoid(&v[0]));
    case!("softplus", [normal(&s, rng)], |t, v| t.softplus(&v[0]));
    case!("tanh", [normal(&s, rng)], |t, v| t.tanh(&v[0]));
    case!("scale", [normal(&s, rng)], |t, v| t.scale(&v[0], -1.7));
    case!("add_scalar", [normal(&s, rng)], |t, v| t.add_scalar(&v[0], 0.3));
    case!(
        "linear",
        [normal(&[2, 5, 4], rng), normal(&[3, 4], rng), normal(&[3], rng)],
        |t, v| t.linear(&v[0], &v[1], Some(&v[2]))
    );
    case!(
        "conv3d",
        [normal(&[2, 3, 4, 5, 5], rng), normal(&[4, 3, 3, 3, 3], rng), normal(&[4], rng)],
        |t, v| t.conv3d(&v[0], &v[1], Some(&v[2]), [1, 2, 2], [1, 1, 0])
    );
    case!(
        "conv3d_strided_time",
        [normal(&[1, 2, 8, 3, 3], rng), normal(&[3, 2, 3, 1, 1], rng)],
        |t, v| t.conv3d(&v[0], &v[1], None, [4, 1, 1], [1, 0, 0])
    );
    case!("maxpool3d", [distinct(&[2, 2, 3, 4, 4], rng)], |t, v| t.maxpool3d(
        &v[0],
        [1, 2, 2],
        [1, 2, 2]
    ));
    case!(
        "causal_depthwise_conv1d",
        [normal(&[2, 7, 3], rng), normal(&[3, 4], rng), normal(&[3], rng)],
        |t, v| t.causal_depthwise_conv1d(&v[0], &v[1], &v[2])
    );
    case!(
        "batch_norm_train",
        [normal(&[3, 4, 2, 3], rng), positive(&[4], rng), normal(&[4], rng)],
        |t, v| {
            let mut st = BatchNormStats::new(4);
            t.batch_norm(&v[0], &v[1], &v[2], &mut st, NormMode::Train)
        }
    );
    case!(
        "batch_norm_eval",
        [normal(&[3, 4, 2, 3], rng), positive(&[4], rng), normal(&[4], rng)],
        |t, v| {
            let mut st = BatchNormStats::new(4);
            st.running_mean = vec![0.1, -0.2, 0.3, 0.0];
            st.running_var = vec![0.5, 1.5, 2.0, 0.8];
            t.batch_norm(&v[0], &v[1], &v[2], &mut st, NormMode::Eval)
        }
    );
    case!(
        "layer_norm",
        [normal(&[2, 5, 6], rng), positive(&[6], rng), normal(&[6], rng)],
        |t, v| t.layer_norm(&v[0], &v[1], &v[2], 1e-5)
    );
    let r = [2, 3, 4];
    case!("sum", [normal(&r, rng)], |t, v| t.sum(&v[0], &[0, 2], true));
    case!("sum_all", [normal(&r, rng)], |t, v| t.sum_all(&v[0]));
    case!("mean", [normal(&r, rng)], |t, v| t.mean(&v[0], &[1], false));
    case!("mean_all", [normal(&r, rng)], |t, v| t.mean_all(&v[0]));
    case!("std", [normal(&r, rng)], |t, v| t.std(&v[0], &[2], false, 1e-8));
    case!("max", [distinct(&r, rng)], |t, v| t.max(&v[0], &[1], true));
    case!("reshape", [normal(&r, rng)], |t, v| t.reshape(&v[0], &[6, 4]));
    case!("permute", [normal(&r, rng)], |t, v| t.permute(&v[0], &[2, 0, 1]));
    case!("broadcast_to", [normal(&[2, 1, 4], rng)], |t, v| t.broadcast_to(&v[0], &[2, 3, 4]));
    case!("index_select", [normal(&r, rng)], |t, v| t.index_select(&v[0], 2, &[3, 0, 3]));
    case!("narrow", [normal(&r, rng)], |t, v| t.narrow(&v[0], 1, 1, 2));
    case!("flip", [normal(&r, rng)], |t, v| t.flip(&v[0], 1));
    case!("repeat_interleave", [normal(&r, rng)], |t, v| t.repeat_interleave(&v[0], 2, 2));
    case!("pad_replicate", [normal(&r, rng)], |t, v| t.pad_replicate(&v[0], 2, 1, 2));
    case!("concat", [normal(&r, rng), normal(&[2, 2, 4], rng)], |t, v| t.concat(&[&v[0], &v[1]], 1));
    case!(
        "selective_scan",
        [
            normal(&[2, 6, 3], rng),
            Tensor::uniform([2, 6, 3], 0.05, 0.8, rng),
            Tensor::uniform([3, 4], -2.0, -0.3, rng),
            normal(&[2, 6, 4], rng),
            normal(&[2, 6, 4], rng)
        ],
        |t, v| t.selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4])
    );
    case!(
        "temporal_difference_conv",
        [normal(&[1, 2, 4, 3, 3], rng), normal(&[3, 2, 3, 3, 3], rng)],
        |t, v| tdc_forward(t, &v[0], &v[1], 0.5)
    );
    case!("neg_pearson_loss", [normal(&[2, 9], rng), normal(&[2, 9], rng)], |t, v| Ok(
        neg_pearson_loss(t, &v[0], &v[1])?.0
    ));
    cases
}

/// Gradient checks of every tape operation plus the composite layers.
pub fn op_suite(sampling: Sampling, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (i, (name, inputs, f)) in op_cases(&mut rng).into_iter().enumerate() {
        reports.push(check_op(name, inputs, sampling, seed.wrapping_add(i as u64), f)?);
    }

    let layer = MambaLayer::new("m", 4, 2, 3);
    let mut store = ParamStore::new();
    layer.register(&mut store, &mut rng)?;
    let x = normal(&[2, 5, 4], &mut rng);
    reports.push(check_params("bidirectional_mamba_layer", &store, &x, NormMode::Train, sampling, seed, |s, x| {
        layer.forward(s, x)
    })?);

    let block = TdMambaBlock::new("b", 8, 3, 2, 0.5, 4, 1 << 20);
    let mut store = ParamStore::new();
    block.register(&mut store, &mut rng)?;
    let x = normal(&[2, 8, 2, 3, 3], &mut rng);
    reports.push(check_params("td_mamba_block", &store, &x, NormMode::Train, sampling, seed, |s, x| {
        block.forward(s, x)
    })?);
    Ok(reports)
}

/// Configuration of the network used for whole-model checks.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        channels: 16,
        blocks: 2,
        d_state: 4,
        ca_ratio: 4,
        head_width: 4,
        frames: 8,
        height: 16,
        width: 16,
        ..ModelConfig::default()
    }
}

/// Whole-network check: negative-correlation loss of a two-block model on a
/// random batch, with respect to `sampling` of its parameters.
pub fn model_check(sampling: Sampling, seed: u64) -> Result<GradReport> {
    let cfg = gradcheck_model_config();
    let net = PhysMamba::new(cfg.clone())?;
    let store = net.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::randn([2, 3, cfg.frames, cfg.height, cfg.width], &mut rng);
    let target = Tensor::randn([2, cfg.frames], &mut rng);
    check_params("two_block_network", &store, &x, NormMode::Train, sampling, seed, |s, x| {
        let pred = net.forward(s, x)?;
        let y = s.tape.constant(target.clone())?;
        Ok(neg_pearson_loss(s.tape, &pred, &y)?.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detached_operand_is_caught() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let report = check_op("half_square", vec![x], Sampling::All, 1, |tape, v| {
            let frozen = tape.constant(v[0].to_tensor())?;
            tape.mul(&v[0], &frozen)
        })
        .unwrap();
        assert!(!report.passed(), "{report:?}");
    }

    #[test]
    fn relu_at_zero_is_a_kink() {
        let x = Tensor::new(vec![3], vec![0.0, 0.5, -0.5]).unwrap();
        let report = check_op("relu", vec![x], Sampling::All, 2, |tape, v| tape.relu(&v[0])).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.kinks, 1);
    }

    #[test]
    fn smooth_ops_need_no_fallback() {
        let x = Tensor::new(vec![3], vec![0.2, -0.7, 1.3]).unwrap();
        let report = check_op("tanh", vec![x], Sampling::All, 3, |tape, v| tape.tanh(&v[0])).unwrap();
        assert!(report.passed());
        assert_eq!((report.fallbacks, report.kinks), (0, 0));
    }
}
