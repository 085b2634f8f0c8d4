//! Frame preprocessing, correlation loss, heart-rate estimation and metrics.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added to the frame-ratio denominator. Small enough that the ratio
/// stays scale-free to 1e-6 for pixel sums down to about 1e-5.
pub const DIFF_EPS: f64 = 1e-12;
/// Guard under each square root of the correlation.
pub const PEARSON_EPS: f64 = 1e-8;
/// Heart-rate band in Hz.
pub const HR_BAND: (f64, f64) = (0.75, 2.5);

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Divide by the population standard deviation, or zero everything when it
/// is not above `DIFF_EPS`.
fn standardize_scale(v: &mut [f64]) {
    let sd = population_std(v);
    if sd > DIFF_EPS {
        v.iter_mut().for_each(|x| *x /= sd);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Normalized frame differences of `frames: (C, T, ...)`:
/// `(X[t+1] - X[t]) / (X[t] + X[t+1] + ε)` over the whole clip, divided by the
/// clip's population standard deviation. Non-finite ratios become zero.
pub fn diff_normalize(frames: &Tensor) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() < 2 || s[1] < 2 {
        return Err(Error::dim(format!(
            "frame differencing needs (C, T >= 2, ...), got {s:?}"
        )));
    }
    let (c, t) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let x = frames.data();
    let mut out = Vec::with_capacity(c * (t - 1) * plane);
    for ch in 0..c {
        for ti in 0..t - 1 {
            let a = &x[(ch * t + ti) * plane..][..plane];
            let b = &x[(ch * t + ti + 1) * plane..][..plane];
            out.extend(a.iter().zip(b).map(|(p, q)| {
                let r = (q - p) / (p + q + DIFF_EPS);
                if r.is_finite() {
                    r
                } else {
                    0.0
                }
            }));
        }
    }
    standardize_scale(&mut out);
    let mut shape = s.to_vec();
    shape[1] = t - 1;
    Tensor::new(shape, out)
}

/// First differences of a pulse label divided by their standard deviation.
pub fn diff_normalize_label(label: &[f64]) -> Result<Vec<f64>> {
    if label.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "label differencing needs at least 2 samples, got {}",
            label.len()
        )));
    }
    let mut d: Vec<f64> = label.windows(2).map(|w| w[1] - w[0]).collect();
    standardize_scale(&mut d);
    Ok(d)
}

/// `(T·Σxy - ΣxΣy) / sqrt((T·Σx² - (Σx)² + ε)(T·Σy² - (Σy)² + ε))`, computed
/// from centred sums. Returns the correlation and whether either input has
/// zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, bool)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument(format!(
            "correlation needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (p, q) = (a - mx, b - my);
        sxy += p * q;
        sxx += p * p;
        syy += q * q;
    }
    let degenerate = sxx == 0.0 || syy == 0.0;
    let rho = n * sxy / ((n * sxx + PEARSON_EPS).sqrt() * (n * syy + PEARSON_EPS).sqrt());
    Ok((rho.clamp(-1.0, 1.0), degenerate))
}

/// `1 - ρ(x, y)`, in `[0, 2]`. A constant argument yields exactly 1 and a warning.
pub fn neg_pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (rho, degenerate) = pearson(x, y)?;
    if degenerate {
        log::warn!("correlation of a constant trace; loss set to 1");
        return Ok(1.0);
    }
    Ok(1.0 - rho)
}

/// Batch-mean `1 - ρ` over rows of `pred, target: (B, T)`, recorded on `tape`.
/// The flag reports whether any row had zero variance.
pub fn neg_pearson_loss(tape: &Tape, pred: &Var, target: &Var) -> Result<(Var, bool)> {
    let s = pred.shape().to_vec();
    if s.len() != 2 || target.shape() != s.as_slice() || s[1] < 2 {
        return Err(Error::dim(format!(
            "loss expects matching (B, T >= 2) inputs, got {:?} and {:?}",
            s,
            target.shape()
        )));
    }
    let n = s[1] as f64;
    let centre = |v: &Var| -> Result<Var> {
        let m = tape.mean(v, &[1], true)?;
        tape.sub(v, &tape.broadcast_to(&m, &s)?)
    };
    let xc = centre(pred)?;
    let yc = centre(target)?;
    let sxy = tape.sum(&tape.mul(&xc, &yc)?, &[1], false)?;
    let sxx = tape.sum(&tape.square(&xc)?, &[1], false)?;
    let syy = tape.sum(&tape.square(&yc)?, &[1], false)?;
    let degenerate = sxx.data().iter().chain(syy.data()).any(|&v| v == 0.0);
    if degenerate {
        log::warn!("zero-variance trace in batch; its correlation is taken as 0");
    }
    let guard = |v: &Var| -> Result<Var> { tape.sqrt(&tape.add_scalar(&tape.scale(v, n)?, PEARSON_EPS)?) };
    let den = tape.mul(&guard(&sxx)?, &guard(&syy)?)?;
    let rho = tape.div(&tape.scale(&sxy, n)?, &den)?;
    let loss = tape.add_scalar(&tape.neg(&tape.mean_all(&rho)?)?, 1.0)?;
    Ok((loss, degenerate))
}

/// Dominant in-band frequency of a pulse trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrEstimate {
    pub bpm: f64,
    /// Set when the band holds no usable energy; `bpm` is then the lower band edge.
    pub low_snr: bool,
}

/// Heart rate from the spectral peak inside [`HR_BAND`].
///
/// The mean is removed, the trace is zero-padded to at least `60·fs`
/// samples (bins of at most 1 bpm), and ties resolve to the lower frequency.
pub fn estimate_hr(trace: &[f64], fs: f64) -> Result<HrEstimate> {
    if !(fs > 0.0) {
        return Err(Error::Argument(format!("sampling rate must be positive, got {fs}")));
    }
    if (trace.len() as f64) < 2.0 * fs || trace.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} samples at {fs} Hz is shorter than 2 s",
            trace.len()
        )));
    }
    let n = trace.len().max((60.0 * fs).ceil() as usize);
    let mean = trace.iter().sum::<f64>() / trace.len() as f64;
    let mut buf: Vec<Complex<f64>> = trace
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (lo, hi) = HR_BAND;
    let mut best: Option<(usize, f64)> = None;
    let mut band_power = 0.0;
    let mut total_power = 0.0;
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let p = c.norm_sqr();
        total_power += p;
        let f = k as f64 * fs / n as f64;
        if f < lo || f > hi {
            continue;
        }
        band_power += p;
        if best.map_or(true, |(_, bp)| p > bp) {
            best = Some((k, p));
        }
    }
    let (k, _) = best.ok_or_else(|| {
        Error::InsufficientData(format!("no frequency bin inside the band at fs={fs}"))
    })?;
    let low_snr = !(band_power > 1e-12 * total_power) || total_power == 0.0;
    if low_snr {
        log::warn!("trace has no in-band spectral content; reporting the band edge");
    }
    Ok(HrEstimate {
        bpm: 60.0 * k as f64 * fs / n as f64,
        low_snr,
    })
}

/// Heart-rate error summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mae_bpm: f64,
    pub rmse_bpm: f64,
    pub mape_percent: f64,
    pub pearson_rho: f64,
    /// Set when either list is constant, in which case `pearson_rho` is 0.
    pub rho_degenerate: bool,
}

pub fn compute_metrics(pred: &[f64], gt: &[f64]) -> Result<MetricsReport> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Argument(format!(
            "metrics need equal non-empty lists, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(bad) = gt.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Argument(format!("ground-truth rates must be positive, found {bad}")));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let rmse = (pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n).sqrt();
    let mape = 100.0 * pred.iter().zip(gt).map(|(p, g)| ((p - g) / g).abs()).sum::<f64>() / n;
    let (rho, degenerate) = if pred.len() < 2 {
        (0.0, true)
    } else {
        let (mp, mg) = (pred.iter().sum::<f64>() / n, gt.iter().sum::<f64>() / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (p, g) in pred.iter().zip(gt) {
            sxy += (p - mp) * (g - mg);
            sxx += (p - mp) * (p - mp);
            syy += (g - mg) * (g - mg);
        }
        if sxx == 0.0 || syy == 0.0 {
            (0.0, true)
        } else {
            ((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false)
        }
    };
    if degenerate {
        log::warn!("constant rate list; correlation reported as 0");
    }
    Ok(MetricsReport {
        mae_bpm: mae,
        rmse_bpm: rmse.max(mae),
        mape_percent: mape,
        pearson_rho: rho,
        rho_degenerate: degenerate,
    })
}
