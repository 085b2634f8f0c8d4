use rayon::prelude::*;

use super::{BackwardFn, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn linear_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, din: usize, dout: usize) -> Vec<f64> {
    let rows = x.len() / din;
    let mut out = vec![0.0; rows * dout];
    out.par_chunks_mut(dout)
        .zip(x.par_chunks(din))
        .for_each(|(o, xr)| {
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(xr, &w[j * din..(j + 1) * din]) + bias.map_or(0.0, |b| b[j]);
            }
        });
    out
}

impl Tape {
    /// Affine map over the last axis: `x (..., din) · wᵀ (din, dout) + bias`.
    pub fn linear(&self, x: &Var, w: &Var, bias: Option<&Var>) -> Result<Var> {
        let ws = w.shape();
        if ws.len() != 2 {
            return Err(Error::dim(format!("linear weight must be 2-D, got {:?}", ws)));
        }
        let (dout, din) = (ws[0], ws[1]);
        if x.shape().last() != Some(&din) {
            return Err(Error::dim(format!(
                "linear expects last extent {} but input has shape {:?}",
                din,
                x.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::dim(format!(
                    "linear bias shape {:?}, expected [{}]",
                    b.shape(),
                    dout
                )));
            }
        }
        let out = linear_forward(x.data(), w.data(), bias.map(|b| b.data()), din, dout);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;

        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let bw: Option<BackwardFn> = if self.needs_grad(&inputs) {
            let (xr, wr) = (x.rc(), w.rc());
            let (tx, tw, tb) = (
                x.is_tracked(),
                w.is_tracked(),
                bias.is_some_and(|b| b.is_tracked()),
            );
            let has_bias = bias.is_some();
            Some(Box::new(move |g: &[f64]| {
                let (xd, wd) = (xr.data(), wr.data());
                let rows = xd.len() / din;
                let dx = tx.then(|| {
                    let mut dx = vec![0.0; xd.len()];
                    dx.par_chunks_mut(din)
                        .zip(g.par_chunks(dout))
                        .for_each(|(dxr, gr)| {
                            for (j, &gj) in gr.iter().enumerate() {
                                if gj == 0.0 {
                                    continue;
                                }
                                let wrow = &wd[j * din..(j + 1) * din];
                                for (d, w) in dxr.iter_mut().zip(wrow) {
                                    *d += gj * w;
                                }
                            }
                        });
                    dx
                });
                let dw = tw.then(|| {
                    let mut dw = vec![0.0; dout * din];
                    dw.par_chunks_mut(din).enumerate().for_each(|(j, dwr)| {
                        for r in 0..rows {
                            let gj = g[r * dout + j];
                            if gj == 0.0 {
                                continue;
                            }
                            for (d, x) in dwr.iter_mut().zip(&xd[r * din..(r + 1) * din]) {
                                *d += gj * x;
                            }
                        }
                    });
                    dw
                });
                let db = tb.then(|| {
                    let mut db = vec![0.0; dout];
                    for gr in g.chunks(dout) {
                        for (d, v) in db.iter_mut().zip(gr) {
                            *d += v;
                        }
                    }
                    db
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(db);
                }
                grads
            }))
        } else {
            None
        };
        self.record("linear", &inputs, Tensor::from_parts(shape, out), bw)
    }
}
