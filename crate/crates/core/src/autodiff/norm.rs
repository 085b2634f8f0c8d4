use super::{BackwardFn, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running statistics carried by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

impl Tape {
    /// Batch normalization over every axis except axis 1 of `x: (B, C, ...)`.
    pub fn batch_norm(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        stats: &mut BatchNormStats,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("batch_norm on shape {:?}", shape)));
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if gamma.shape() != [c] || beta.shape() != [c] || stats.running_mean.len() != c {
            return Err(Error::dim(format!(
                "batch_norm over {} channels with gamma {:?}, beta {:?}",
                c,
                gamma.shape(),
                beta.shape()
            )));
        }
        let m = b * s;
        let xd = x.data();
        let (mean, var) = match mode {
            NormMode::Train => {
                if m < 2 {
                    return Err(Error::DegenerateReduction(
                        "batch_norm in train mode needs more than one value per channel".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * s;
                        acc += xd[base..base + s].iter().sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * s;
                        sq += xd[base..base + s].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                let mom = stats.momentum;
                let unbias = m as f64 / (m as f64 - 1.0);
                for ch in 0..c {
                    stats.running_mean[ch] = (1.0 - mom) * stats.running_mean[ch] + mom * mean[ch];
                    stats.running_var[ch] =
                        (1.0 - mom) * stats.running_var[ch] + mom * var[ch] * unbias;
                }
                (mean, var)
            }
            NormMode::Eval => (stats.running_mean.clone(), stats.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                for i in base..base + s {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let bw: Option<BackwardFn> = if self.needs_grad(&[x, gamma, beta]) {
            let gam = gamma.rc();
            let tracked = [x.is_tracked(), gamma.is_tracked(), beta.is_tracked()];
            Some(Box::new(move |g: &[f64]| {
                let gd = gam.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * s;
                        for i in base..base + s {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for ch in 0..c {
                    let k = gd[ch] * inv_std[ch];
                    match mode {
                        NormMode::Eval => {
                            for bi in 0..b {
                                let base = (bi * c + ch) * s;
                                for i in base..base + s {
                                    dx[i] = g[i] * k;
                                }
                            }
                        }
                        NormMode::Train => {
                            let mf = m as f64;
                            for bi in 0..b {
                                let base = (bi * c + ch) * s;
                                for i in base..base + s {
                                    dx[i] = k / mf
                                        * (mf * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                                }
                            }
                        }
                    }
                }
                vec![
                    tracked[0].then_some(dx),
                    tracked[1].then_some(dgamma),
                    tracked[2].then_some(dbeta),
                ]
            }))
        } else {
            None
        };
        self.record("batch_norm", &[x, gamma, beta], Tensor::from_parts(shape, out), bw)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let shape = x.shape().to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm over {} features with gamma {:?}, beta {:?}",
                d,
                gamma.shape(),
                beta.shape()
            )));
        }
        if d == 0 || (d == 1 && eps <= 0.0) {
            return Err(Error::DegenerateReduction(
                "layer_norm needs an eps guard for single-feature rows".into(),
            ));
        }
        let rows = x.numel() / d;
        let xd = x.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let bw: Option<BackwardFn> = if self.needs_grad(&[x, gamma, beta]) {
            let gam = gamma.rc();
            let tracked = [x.is_tracked(), gamma.is_tracked(), beta.is_tracked()];
            Some(Box::new(move |g: &[f64]| {
                let gd = gam.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                let df = d as f64;
                for r in 0..rows {
                    let mut sum_gh = 0.0;
                    let mut sum_gh_h = 0.0;
                    for j in 0..d {
                        let i = r * d + j;
                        let gh = g[i] * gd[j];
                        sum_gh += gh;
                        sum_gh_h += gh * xhat[i];
                        dgamma[j] += g[i] * xhat[i];
                        dbeta[j] += g[i];
                    }
                    for j in 0..d {
                        let i = r * d + j;
                        let gh = g[i] * gd[j];
                        dx[i] = inv_std[r] / df * (df * gh - sum_gh - xhat[i] * sum_gh_h);
                    }
                }
                vec![
                    tracked[0].then_some(dx),
                    tracked[1].then_some(dgamma),
                    tracked[2].then_some(dbeta),
                ]
            }))
        } else {
            None
        };
        self.record("layer_norm", &[x, gamma, beta], Tensor::from_parts(shape, out), bw)
    }
}
