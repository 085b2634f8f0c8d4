//! Input-dependent (selective) scan.

use rand::Rng;
use rayon::prelude::*;

use super::scan::{phi, phi_prime, step_channel, zoh};
use crate::autodiff::{BackwardFn, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of one selective state-space core over `D` channels and `N` states.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// `ln(-a)`, shape `(D, N)`.
    pub a_log: Tensor,
    /// Token → input matrix row, `(N, D)`.
    pub b_proj: Tensor,
    /// Token → output matrix row, `(N, D)`.
    pub c_proj: Tensor,
    /// Low-rank step projection, `(R, D)` then `(D, R)`.
    pub dt_down: Tensor,
    pub dt_up: Tensor,
    /// Per-channel step offset before softplus, `(D)`.
    pub dt_bias: Tensor,
}

/// Inverse of softplus for positive `y`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    /// Standard initialization: `a[d, n] = -(n + 1)`, step offsets chosen so
    /// that the initial step is log-uniform in `[1e-3, 1e-1]`.
    pub fn init(d: usize, n: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let a_log = Tensor::from_parts(
            vec![d, n],
            (0..d).flat_map(|_| (0..n).map(|j| ((j + 1) as f64).ln())).collect(),
        );
        let s = 1.0 / (d as f64).sqrt();
        let r = 1.0 / (rank as f64).sqrt();
        let dt_bias = (0..d)
            .map(|_| {
                let lo = 1e-3f64.ln();
                let hi = 1e-1f64.ln();
                inverse_softplus(rng.gen_range(lo..hi).exp())
            })
            .collect();
        SsmParams {
            a_log,
            b_proj: Tensor::uniform([n, d], -s, s, rng),
            c_proj: Tensor::uniform([n, d], -s, s, rng),
            dt_down: Tensor::uniform([rank, d], -s, s, rng),
            dt_up: Tensor::uniform([d, rank], -r, r, rng),
            dt_bias: Tensor::from_parts(vec![d], dt_bias),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn states(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Effective state matrix `a = -exp(a_log)`.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    /// Per-token `(B, C, Δ)` for `x: (L, D)`.
    pub fn project(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (d, n) = (self.channels(), self.states());
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(Error::dim(format!(
                "selective scan over {d} channels got input {:?}",
                x.shape()
            )));
        }
        let l = x.shape()[0];
        let rank = self.dt_down.shape()[0];
        let matvec = |w: &[f64], rows: usize, cols: usize, v: &[f64]| -> Vec<f64> {
            (0..rows)
                .map(|i| w[i * cols..(i + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        let mut bm = Vec::with_capacity(l * n);
        let mut cm = Vec::with_capacity(l * n);
        let mut dt = Vec::with_capacity(l * d);
        for t in 0..l {
            let row = &x.data()[t * d..(t + 1) * d];
            bm.extend(matvec(self.b_proj.data(), n, d, row));
            cm.extend(matvec(self.c_proj.data(), n, d, row));
            let low = matvec(self.dt_down.data(), rank, d, row);
            let up = matvec(self.dt_up.data(), d, rank, &low);
            for (u, b) in up.iter().zip(self.dt_bias.data()) {
                dt.push(crate::autodiff::softplus(u + b));
            }
        }
        Ok((
            Tensor::from_parts(vec![l, n], bm),
            Tensor::from_parts(vec![l, n], cm),
            Tensor::from_parts(vec![l, d], dt),
        ))
    }
}

/// Dimensions of one sequence passed to the scan kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScanDims {
    pub l: usize,
    pub d: usize,
    pub n: usize,
}

/// Forward kernel for one sequence. Returns the outputs and, when requested,
/// the `L + 1` hidden states (the first being zero).
pub(crate) fn selective_forward(
    dims: ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    keep_states: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let ScanDims { l, d, n } = dims;
    let mut h = vec![0.0; d * n];
    let mut states = keep_states.then(|| {
        let mut s = Vec::with_capacity((l + 1) * d * n);
        s.extend_from_slice(&h);
        s
    });
    let mut y = vec![0.0; l * d];
    let mut abar = vec![0.0; n];
    let mut bbar = vec![0.0; n];
    for t in 0..l {
        let brow = &bm[t * n..(t + 1) * n];
        let crow = &cm[t * n..(t + 1) * n];
        for ch in 0..d {
            let dt = delta[t * d + ch];
            if !(dt > 0.0) {
                return Err(Error::Parameterization(format!(
                    "step size {dt} at token {t}, channel {ch} is not positive"
                )));
            }
            let arow = &a[ch * n..(ch + 1) * n];
            for j in 0..n {
                let (x, y) = zoh(arow[j], brow[j], dt);
                abar[j] = x;
                bbar[j] = y;
            }
            y[t * d + ch] = step_channel(
                &mut h[ch * n..(ch + 1) * n],
                &abar,
                &bbar,
                crow,
                u[t * d + ch],
            );
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                step: t,
                detail: "hidden state became non-finite".into(),
            });
        }
        if let Some(s) = states.as_mut() {
            s.extend_from_slice(&h);
        }
    }
    Ok((y, states))
}

/// Gradients of one sequence: `(du, ddelta, da, dB, dC)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn selective_backward(
    dims: ScanDims,
    gy: &[f64],
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    states: &[f64],
) -> [Vec<f64>; 5] {
    let ScanDims { l, d, n } = dims;
    let mut du = vec![0.0; l * d];
    let mut ddelta = vec![0.0; l * d];
    let mut da = vec![0.0; d * n];
    let mut db = vec![0.0; l * n];
    let mut dc = vec![0.0; l * n];
    let mut dh = vec![0.0; d * n];
    for t in (0..l).rev() {
        let cur = &states[(t + 1) * d * n..(t + 2) * d * n];
        let prev = &states[t * d * n..(t + 1) * d * n];
        for ch in 0..d {
            let dt = delta[t * d + ch];
            let xv = u[t * d + ch];
            let g = gy[t * d + ch];
            let mut acc_du = 0.0;
            let mut acc_dt = 0.0;
            for j in 0..n {
                let k = ch * n + j;
                let av = a[k];
                let bv = bm[t * n + j];
                let z = dt * av;
                let abar = z.exp();
                let ph = phi(z);
                let dp = phi_prime(z);
                dc[t * n + j] += g * cur[k];
                let dhv = dh[k] + g * cm[t * n + j];
                let d_abar = dhv * prev[k];
                let d_bbar = dhv * xv;
                acc_du += dhv * dt * bv * ph;
                acc_dt += d_abar * abar * av + d_bbar * bv * (ph + z * dp);
                da[k] += d_abar * abar * dt + d_bbar * dt * dt * bv * dp;
                db[t * n + j] += d_bbar * dt * ph;
                dh[k] = dhv * abar;
            }
            du[t * d + ch] = acc_du;
            ddelta[t * d + ch] = acc_dt;
        }
    }
    [du, ddelta, da, db, dc]
}

/// Run the selective core of `params` on one sequence `x: (L, D)`.
pub fn selective_scan(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let (bm, cm, dt) = params.project(x)?;
    let dims = ScanDims {
        l: x.shape()[0],
        d: params.channels(),
        n: params.states(),
    };
    let a = params.a();
    let (y, _) = selective_forward(dims, x.data(), dt.data(), a.data(), bm.data(), cm.data(), false)?;
    Ok(Tensor::from_parts(vec![dims.l, dims.d], y))
}

impl Tape {
    /// Fused selective scan over a batch.
    ///
    /// `u, delta: (B, L, D)`, `a: (D, N)`, `b, c: (B, L, N)`; returns `(B, L, D)`.
    pub fn selective_scan(&self, u: &Var, delta: &Var, a: &Var, b: &Var, c: &Var) -> Result<Var> {
        let us = u.shape();
        if us.len() != 3 || delta.shape() != us || a.shape().len() != 2 || a.shape()[0] != us[2] {
            return Err(Error::dim(format!(
                "selective scan: u {:?}, delta {:?}, a {:?}",
                us,
                delta.shape(),
                a.shape()
            )));
        }
        let (batch, l, d) = (us[0], us[1], us[2]);
        let n = a.shape()[1];
        if b.shape() != [batch, l, n] || c.shape() != [batch, l, n] {
            return Err(Error::dim(format!(
                "selective scan: B {:?} and C {:?} must be ({batch}, {l}, {n})",
                b.shape(),
                c.shape()
            )));
        }
        let dims = ScanDims { l, d, n };
        let keep = self.needs_grad(&[u, delta, a, b, c]);
        let (ud, dd, ad, bd, cd) = (u.data(), delta.data(), a.data(), b.data(), c.data());
        let per_seq: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let sd = bi * l * d..(bi + 1) * l * d;
                let sn = bi * l * n..(bi + 1) * l * n;
                selective_forward(
                    dims,
                    &ud[sd.clone()],
                    &dd[sd],
                    ad,
                    &bd[sn.clone()],
                    &cd[sn],
                    keep,
                )
            })
            .collect();
        let mut y = Vec::with_capacity(batch * l * d);
        let mut states = Vec::with_capacity(batch);
        for r in per_seq {
            let (ys, hs) = r?;
            y.extend(ys);
            states.push(hs);
        }
        let bw: Option<BackwardFn> = if keep {
            let (ur, dr, ar, br, cr) = (u.rc(), delta.rc(), a.rc(), b.rc(), c.rc());
            let tracked = [u, delta, a, b, c].map(|v| v.is_tracked());
            Some(Box::new(move |g: &[f64]| {
                let (ud, dd, ad, bd, cd) = (ur.data(), dr.data(), ar.data(), br.data(), cr.data());
                let parts: Vec<[Vec<f64>; 5]> = (0..batch)
                    .into_par_iter()
                    .map(|bi| {
                        let sd = bi * l * d..(bi + 1) * l * d;
                        let sn = bi * l * n..(bi + 1) * l * n;
                        selective_backward(
                            dims,
                            &g[sd.clone()],
                            &ud[sd.clone()],
                            &dd[sd],
                            ad,
                            &bd[sn.clone()],
                            &cd[sn],
                            states[bi].as_deref().expect("states kept for tracked scan"),
                        )
                    })
                    .collect();
                let mut du = Vec::with_capacity(batch * l * d);
                let mut ddt = Vec::with_capacity(batch * l * d);
                let mut da = vec![0.0; d * n];
                let mut db = Vec::with_capacity(batch * l * n);
                let mut dc = Vec::with_capacity(batch * l * n);
                for [pu, pdt, pa, pb, pc] in parts {
                    du.extend(pu);
                    ddt.extend(pdt);
                    for (x, y) in da.iter_mut().zip(pa) {
                        *x += y;
                    }
                    db.extend(pb);
                    dc.extend(pc);
                }
                let mut out = [du, ddt, da, db, dc].map(Some).to_vec();
                for (slot, t) in out.iter_mut().zip(tracked) {
                    if !t {
                        *slot = None;
                    }
                }
                out
            }))
        } else {
            None
        };
        self.record(
            "selective_scan",
            &[u, delta, a, b, c],
            Tensor::from_parts(vec![batch, l, d], y),
            bw,
        )
    }
}
