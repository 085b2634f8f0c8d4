//! Equivalence suites for the scan kernels.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::reference_selective_scan;
use crate::autodiff::Tape;
use crate::error::Result;
use crate::ssm::{discretize_zoh, scan_convolutional, scan_recurrent, selective_scan, SsmParams};
use crate::tensor::Tensor;

/// Result of one verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

pub const LTI_TOLERANCE: f64 = 1e-8;
pub const SELECTIVE_TOLERANCE: f64 = 1e-10;
pub const LTI_LENGTHS: [usize; 4] = [1, 2, 17, 64];

/// `max |y - reference| / max |reference|`.
pub fn normwise_error(y: &Tensor, reference: &Tensor) -> f64 {
    let scale = reference.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = y.max_abs_diff(reference);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

/// Recurrent against convolutional evaluation on random stable diagonal
/// systems with `D <= 8`, `N = 16`.
pub fn lti_equivalence(cases: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    let mut worst = 0.0f64;
    for case in 0..cases {
        let d = rng.gen_range(1..=8);
        let l = LTI_LENGTHS[case % LTI_LENGTHS.len()];
        let a = Tensor::new([d, n], (0..d * n).map(|_| -log_uniform(&mut rng, 0.05, 5.0)).collect())?;
        let b = Tensor::randn([n], &mut rng);
        let c = Tensor::randn([d, n], &mut rng);
        let delta = Tensor::new([d], (0..d).map(|_| log_uniform(&mut rng, 1e-3, 1.0)).collect())?;
        let x = Tensor::randn([l, d], &mut rng);
        let (abar, bbar) = discretize_zoh(&a, &b, &delta)?;
        let rec = scan_recurrent(&abar, &bbar, &c, &x)?;
        let conv = scan_convolutional(&abar, &bbar, &c, &x)?;
        worst = worst.max(normwise_error(&conv, &rec));
    }
    Ok(CheckReport {
        name: "recurrent vs convolutional scan".into(),
        cases,
        max_error: worst,
        tolerance: LTI_TOLERANCE,
        elapsed: start.elapsed(),
    })
}

/// Production selective scan against the straight-line interpreter.
pub fn selective_oracle(cases: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let d = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=16);
        let rank = rng.gen_range(1..=3);
        let l = rng.gen_range(1..=40);
        let params = SsmParams::init(d, n, rank, &mut rng);
        let x = Tensor::randn([l, d], &mut rng);
        let fast = selective_scan(&params, &x)?;
        let slow = reference_selective_scan(&params, &x)?;
        worst = worst.max(normwise_error(&fast, &slow));
    }
    Ok(CheckReport {
        name: "selective scan vs reference interpreter".into(),
        cases,
        max_error: worst,
        tolerance: SELECTIVE_TOLERANCE,
        elapsed: start.elapsed(),
    })
}

/// Token-independent `B`, `C` and `Δ` must reproduce the time-invariant
/// recurrence bit for bit.
pub fn constant_projection(cases: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let tape = Tape::no_grad();
    for _ in 0..cases {
        let d = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=16);
        let l = rng.gen_range(1..=40);
        let a = Tensor::new([d, n], (0..d * n).map(|_| -log_uniform(&mut rng, 0.05, 5.0)).collect())?;
        let b = Tensor::randn([n], &mut rng);
        let c = Tensor::randn([n], &mut rng);
        let delta: Vec<f64> = (0..d).map(|_| log_uniform(&mut rng, 1e-3, 1.0)).collect();
        let x = Tensor::randn([l, d], &mut rng);
        let tile = |v: &[f64]| -> Vec<f64> { (0..l).flat_map(|_| v.iter().copied()).collect() };
        let y = tape.selective_scan(
            &tape.constant(x.reshape([1, l, d])?)?,
            &tape.constant(Tensor::new([1, l, d], tile(&delta))?)?,
            &tape.constant(a.clone())?,
            &tape.constant(Tensor::new([1, l, n], tile(b.data()))?)?,
            &tape.constant(Tensor::new([1, l, n], tile(c.data()))?)?,
        )?;
        let (abar, bbar) = discretize_zoh(&a, &b, &Tensor::from_vec(delta))?;
        let lti = scan_recurrent(&abar, &bbar, &c, &x)?;
        worst = worst.max(y.value().max_abs_diff(&lti.reshape([1, l, d])?));
    }
    Ok(CheckReport {
        name: "constant projections vs time-invariant scan (bitwise)".into(),
        cases,
        max_error: worst,
        tolerance: 0.0,
        elapsed: start.elapsed(),
    })
}

/// All scan suites with their standard case counts.
pub fn scancheck(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        lti_equivalence(100, seed)?,
        selective_oracle(20, seed.wrapping_add(1))?,
        constant_projection(20, seed.wrapping_add(2))?,
    ])
}
