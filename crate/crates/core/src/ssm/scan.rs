//! Discretization and the two evaluation modes of a diagonal state-space model.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this magnitude of `Δ·a` the input factor uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// `(e^u - 1) / u`, continuous through `u = 0`.
#[inline]
pub fn phi(u: f64) -> f64 {
    if u.abs() < SERIES_THRESHOLD {
        1.0 + u * (0.5 + u / 6.0)
    } else {
        u.exp_m1() / u
    }
}

/// Derivative of [`phi`].
#[inline]
pub fn phi_prime(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        0.5 + u * (1.0 / 3.0 + u * (0.125 + u / 30.0))
    } else {
        (u * u.exp() - u.exp_m1()) / (u * u)
    }
}

/// Zero-order-hold pair for one diagonal entry: `(exp(Δa), Δ·b·φ(Δa))`.
#[inline]
pub fn zoh(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let u = delta * a;
    (u.exp(), delta * b * phi(u))
}

/// Discretize a diagonal system.
///
/// * `a`: `(D, N)`, strictly negative.
/// * `b`: `(N)` shared by all tokens, or `(L, N)` per token.
/// * `delta`: a scalar, `(D)` per channel, or `(L, D)` per token.
///
/// Returns `(Ā, B̄)` of shape `(D, N)` when nothing varies per token and
/// `(L, D, N)` otherwise.
pub fn discretize_zoh(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.rank() != 2 {
        return Err(Error::dim(format!("A must be (D, N), got {:?}", a.shape())));
    }
    let (d, n) = (a.shape()[0], a.shape()[1]);
    if let Some(bad) = a.data().iter().find(|v| !(**v < 0.0)) {
        return Err(Error::Parameterization(format!(
            "state matrix entries must be negative, found {bad}"
        )));
    }
    if let Some(bad) = delta.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Parameterization(format!(
            "step sizes must be positive, found {bad}"
        )));
    }
    let b_len = match b.shape() {
        [m] if *m == n => None,
        [l, m] if *m == n => Some(*l),
        s => return Err(Error::dim(format!("B must be (N) or (L, N) with N={n}, got {s:?}"))),
    };
    let (d_len, delta_at): (Option<usize>, Box<dyn Fn(usize, usize) -> f64>) = match delta.shape() {
        [] => (None, Box::new(|_, _| delta.data()[0])),
        [m] if *m == d => (None, Box::new(|_, c| delta.data()[c])),
        [l, m] if *m == d => (Some(*l), Box::new(move |t, c| delta.data()[t * d + c])),
        s => {
            return Err(Error::dim(format!(
                "Δ must be scalar, (D) or (L, D) with D={d}, got {s:?}"
            )))
        }
    };
    let steps = match (b_len, d_len) {
        (Some(x), Some(y)) if x != y => {
            return Err(Error::dim(format!("B has {x} tokens but Δ has {y}")))
        }
        (Some(x), _) | (None, Some(x)) => Some(x),
        (None, None) => None,
    };
    let b_at = |t: usize, j: usize| if b_len.is_some() { b.data()[t * n + j] } else { b.data()[j] };
    let l = steps.unwrap_or(1);
    let mut abar = Vec::with_capacity(l * d * n);
    let mut bbar = Vec::with_capacity(l * d * n);
    for t in 0..l {
        for c in 0..d {
            let dt = delta_at(t, c);
            for j in 0..n {
                let (x, y) = zoh(a.data()[c * n + j], b_at(t, j), dt);
                abar.push(x);
                bbar.push(y);
            }
        }
    }
    let shape = match steps {
        Some(l) => vec![l, d, n],
        None => vec![d, n],
    };
    Ok((
        Tensor::from_parts(shape.clone(), abar),
        Tensor::from_parts(shape, bbar),
    ))
}

/// One recurrence step for a single channel; returns the channel output.
#[inline]
pub(crate) fn step_channel(h: &mut [f64], abar: &[f64], bbar: &[f64], c: &[f64], x: f64) -> f64 {
    let mut y = 0.0;
    for j in 0..h.len() {
        h[j] = abar[j] * h[j] + bbar[j] * x;
        y += c[j] * h[j];
    }
    y
}

fn check_state(h: &[f64], t: usize) -> Result<()> {
    if h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            step: t,
            detail: "hidden state became non-finite".into(),
        })
    }
}

/// Sequential evaluation `h_t = Ā h_{t-1} + B̄ x_t`, `y_t = C h_t`, `h_{-1} = 0`.
///
/// Time-invariant mode takes `Ā, B̄: (D, N)` with `C: (N)` or `(D, N)`;
/// per-token mode takes `Ā, B̄: (L, D, N)` with `C: (L, N)`.
pub fn scan_recurrent(abar: &Tensor, bbar: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("x must be (L, D), got {:?}", x.shape())));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    if abar.shape() != bbar.shape() {
        return Err(Error::dim(format!(
            "Ā {:?} and B̄ {:?} differ in shape",
            abar.shape(),
            bbar.shape()
        )));
    }
    let mut y = vec![0.0; l * d];
    match abar.shape() {
        &[dd, n] => {
            if dd != d {
                return Err(Error::dim(format!("Ā has {dd} channels, x has {d}")));
            }
            let per_channel = match c.shape() {
                [m] if *m == n => false,
                [m, k] if *m == d && *k == n => true,
                s => return Err(Error::dim(format!("C must be (N) or (D, N), got {s:?}"))),
            };
            let mut h = vec![0.0; d * n];
            for t in 0..l {
                for ch in 0..d {
                    let r = ch * n..(ch + 1) * n;
                    let cr = if per_channel { &c.data()[r.clone()] } else { c.data() };
                    y[t * d + ch] = step_channel(
                        &mut h[r.clone()],
                        &abar.data()[r.clone()],
                        &bbar.data()[r],
                        cr,
                        x.data()[t * d + ch],
                    );
                }
                check_state(&h, t)?;
            }
        }
        &[ll, dd, n] => {
            if ll != l || dd != d || c.shape() != [l, n] {
                return Err(Error::dim(format!(
                    "per-token scan needs Ā (L, D, N) = ({l}, {d}, N) and C (L, N); got {:?} and {:?}",
                    abar.shape(),
                    c.shape()
                )));
            }
            let mut h = vec![0.0; d * n];
            for t in 0..l {
                let cr = &c.data()[t * n..(t + 1) * n];
                for ch in 0..d {
                    let off = (t * d + ch) * n;
                    y[t * d + ch] = step_channel(
                        &mut h[ch * n..(ch + 1) * n],
                        &abar.data()[off..off + n],
                        &bbar.data()[off..off + n],
                        cr,
                        x.data()[t * d + ch],
                    );
                }
                check_state(&h, t)?;
            }
        }
        s => return Err(Error::dim(format!("Ā must be (D, N) or (L, D, N), got {s:?}"))),
    }
    Ok(Tensor::from_parts(vec![l, d], y))
}

/// Convolution kernel `K̄[d, k] = Σ_n C·Āᵏ·B̄` for a time-invariant system, `(D, L)`.
pub fn ssm_kernel(abar: &Tensor, bbar: &Tensor, c: &Tensor, len: usize) -> Result<Tensor> {
    let (d, n) = match abar.shape() {
        &[d, n] => (d, n),
        &[_, _, _] => {
            return Err(Error::Mode(
                "convolutional evaluation needs time-invariant parameters; use the recurrent scan for per-token systems".into(),
            ))
        }
        s => return Err(Error::dim(format!("Ā must be (D, N), got {s:?}"))),
    };
    if bbar.shape() != abar.shape() {
        return Err(Error::dim("Ā and B̄ differ in shape"));
    }
    let per_channel = match c.shape() {
        [m] if *m == n => false,
        [m, k] if *m == d && *k == n => true,
        s => return Err(Error::dim(format!("C must be (N) or (D, N), got {s:?}"))),
    };
    let mut k = vec![0.0; d * len];
    for ch in 0..d {
        for j in 0..n {
            let cv = if per_channel { c.data()[ch * n + j] } else { c.data()[j] };
            let a = abar.data()[ch * n + j];
            let mut p = cv * bbar.data()[ch * n + j];
            for kk in 0..len {
                k[ch * len + kk] += p;
                p *= a;
            }
        }
    }
    Ok(Tensor::from_parts(vec![d, len], k))
}

/// Causal convolution `y = x ∗ K̄` of a time-invariant system.
pub fn scan_convolutional(abar: &Tensor, bbar: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("x must be (L, D), got {:?}", x.shape())));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let kern = ssm_kernel(abar, bbar, c, l)?;
    if kern.shape()[0] != d {
        return Err(Error::dim(format!("system has {} channels, x has {d}", kern.shape()[0])));
    }
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let kr = &kern.data()[ch * l..];
            let mut acc = 0.0;
            for s in 0..=t {
                acc += kr[t - s] * x.data()[s * d + ch];
            }
            y[t * d + ch] = acc;
        }
    }
    let out = Tensor::from_parts(vec![l, d], y);
    if !out.all_finite() {
        return Err(Error::NonFinite { op: "scan_convolutional".into() });
    }
    Ok(out)
}
