use rayon::prelude::*;

use super::{BackwardFn, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a strided window over `n` inputs with symmetric padding.
pub fn conv_out_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || n + 2 * pad < kernel {
        return None;
    }
    Some((n + 2 * pad - kernel) / stride + 1)
}

/// Half-open range of output positions whose tap `k` lands inside `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (n, k, s, p) = (n as i64, k as i64, stride as i64, pad as i64);
    let lo = if k >= p { 0 } else { (p - k + s - 1) / s };
    let last = n - 1 + p - k;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out as i64) };
    (lo as usize, (hi.max(lo)) as usize)
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    b: usize,
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    o: [usize; 3],
}

impl Geom {
    fn in_plane(&self) -> usize {
        self.t * self.h * self.w
    }
    fn out_plane(&self) -> usize {
        self.o[0] * self.o[1] * self.o[2]
    }
    fn ksize(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }
    fn in_t(&self, to: usize, kt: usize) -> Option<usize> {
        let v = (to * self.s[0] + kt) as i64 - self.p[0] as i64;
        (v >= 0 && (v as usize) < self.t).then_some(v as usize)
    }
    fn in_h(&self, ho: usize, kh: usize) -> Option<usize> {
        let v = (ho * self.s[1] + kh) as i64 - self.p[1] as i64;
        (v >= 0 && (v as usize) < self.h).then_some(v as usize)
    }
}

fn conv3d_forward(g: &Geom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (op, ip, ks) = (g.out_plane(), g.in_plane(), g.ksize());
    let [kt, kh, kw] = g.k;
    let [_, _, sw] = g.s;
    let [to_n, ho_n, wo_n] = g.o;
    let ranges: Vec<(usize, usize)> = (0..kw)
        .map(|k| valid_range(g.w, wo_n, k, sw, g.p[2]))
        .collect();
    let mut out = vec![0.0; g.b * g.cout * op];
    out.par_chunks_mut(op).enumerate().for_each(|(bc, plane)| {
        let (bi, co) = (bc / g.cout, bc % g.cout);
        let b0 = bias.map_or(0.0, |b| b[co]);
        plane.iter_mut().for_each(|v| *v = b0);
        for to in 0..to_n {
            for ho in 0..ho_n {
                let row = &mut plane[(to * ho_n + ho) * wo_n..][..wo_n];
                for ci in 0..g.cin {
                    let xbase = (bi * g.cin + ci) * ip;
                    let wbase = (co * g.cin + ci) * ks;
                    for a in 0..kt {
                        let Some(ti) = g.in_t(to, a) else { continue };
                        for c in 0..kh {
                            let Some(hi) = g.in_h(ho, c) else { continue };
                            let xrow = &x[xbase + (ti * g.h + hi) * g.w..][..g.w];
                            for (d, &(lo, hi_)) in ranges.iter().enumerate() {
                                let wv = w[wbase + (a * kh + c) * kw + d];
                                if sw == 1 {
                                    let off = d as i64 - g.p[2] as i64;
                                    let src = &xrow[(lo as i64 + off) as usize..(hi_ as i64 + off) as usize];
                                    for (o, v) in row[lo..hi_].iter_mut().zip(src) {
                                        *o += wv * v;
                                    }
                                } else {
                                    for wo in lo..hi_ {
                                        row[wo] += wv * xrow[wo * sw + d - g.p[2]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv3d_grad_input(g: &Geom, grad: &[f64], w: &[f64]) -> Vec<f64> {
    let (op, ip, ks) = (g.out_plane(), g.in_plane(), g.ksize());
    let [kt, kh, kw] = g.k;
    let sw = g.s[2];
    let [to_n, ho_n, wo_n] = g.o;
    let ranges: Vec<(usize, usize)> = (0..kw)
        .map(|k| valid_range(g.w, wo_n, k, sw, g.p[2]))
        .collect();
    let mut dx = vec![0.0; g.b * g.cin * ip];
    dx.par_chunks_mut(ip).enumerate().for_each(|(bc, plane)| {
        let (bi, ci) = (bc / g.cin, bc % g.cin);
        for co in 0..g.cout {
            let gbase = (bi * g.cout + co) * op;
            let wbase = (co * g.cin + ci) * ks;
            for to in 0..to_n {
                for ho in 0..ho_n {
                    let grow = &grad[gbase + (to * ho_n + ho) * wo_n..][..wo_n];
                    for a in 0..kt {
                        let Some(ti) = g.in_t(to, a) else { continue };
                        for c in 0..kh {
                            let Some(hi) = g.in_h(ho, c) else { continue };
                            let xrow = &mut plane[(ti * g.h + hi) * g.w..][..g.w];
                            for (d, &(lo, hi_)) in ranges.iter().enumerate() {
                                let wv = w[wbase + (a * kh + c) * kw + d];
                                for wo in lo..hi_ {
                                    xrow[wo * sw + d - g.p[2]] += wv * grow[wo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn conv3d_grad_weight(g: &Geom, grad: &[f64], x: &[f64]) -> Vec<f64> {
    let (op, ip, ks) = (g.out_plane(), g.in_plane(), g.ksize());
    let [kt, kh, kw] = g.k;
    let sw = g.s[2];
    let [to_n, ho_n, wo_n] = g.o;
    let ranges: Vec<(usize, usize)> = (0..kw)
        .map(|k| valid_range(g.w, wo_n, k, sw, g.p[2]))
        .collect();
    let mut dw = vec![0.0; g.cout * g.cin * ks];
    dw.par_chunks_mut(g.cin * ks).enumerate().for_each(|(co, dwc)| {
        for bi in 0..g.b {
            let gbase = (bi * g.cout + co) * op;
            for to in 0..to_n {
                for ho in 0..ho_n {
                    let grow = &grad[gbase + (to * ho_n + ho) * wo_n..][..wo_n];
                    for ci in 0..g.cin {
                        let xbase = (bi * g.cin + ci) * ip;
                        for a in 0..kt {
                            let Some(ti) = g.in_t(to, a) else { continue };
                            for c in 0..kh {
                                let Some(hi) = g.in_h(ho, c) else { continue };
                                let xrow = &x[xbase + (ti * g.h + hi) * g.w..][..g.w];
                                for (d, &(lo, hi_)) in ranges.iter().enumerate() {
                                    let mut acc = 0.0;
                                    for wo in lo..hi_ {
                                        acc += grow[wo] * xrow[wo * sw + d - g.p[2]];
                                    }
                                    dwc[ci * ks + (a * kh + c) * kw + d] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dw
}

impl Tape {
    /// 3-D convolution of `x (B, Cin, T, H, W)` with `w (Cout, Cin, kt, kh, kw)`.
    pub fn conv3d(
        &self,
        x: &Var,
        w: &Var,
        bias: Option<&Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::dim(format!(
                "conv3d expects 5-D input and weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(format!(
                "conv3d input has {} channels but weight expects {}",
                xs[1], ws[1]
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::dim(format!("conv3d bias shape {:?}", b.shape())));
            }
        }
        let mut o = [0; 3];
        for i in 0..3 {
            o[i] = conv_out_len(xs[2 + i], ws[2 + i], stride[i], padding[i]).ok_or_else(|| {
                Error::dim(format!(
                    "conv3d kernel {:?} stride {:?} padding {:?} does not fit input {:?}",
                    &ws[2..],
                    stride,
                    padding,
                    xs
                ))
            })?;
        }
        let geom = Geom {
            b: xs[0],
            cin: xs[1],
            t: xs[2],
            h: xs[3],
            w: xs[4],
            cout: ws[0],
            k: [ws[2], ws[3], ws[4]],
            s: stride,
            p: padding,
            o,
        };
        let out = conv3d_forward(&geom, x.data(), w.data(), bias.map(|b| b.data()));
        let shape = vec![geom.b, geom.cout, o[0], o[1], o[2]];

        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let bw: Option<BackwardFn> = if self.needs_grad(&inputs) {
            let (xr, wr) = (x.rc(), w.rc());
            let (tx, tw) = (x.is_tracked(), w.is_tracked());
            let tb = bias.map(|b| b.is_tracked());
            Some(Box::new(move |g: &[f64]| {
                let dx = tx.then(|| conv3d_grad_input(&geom, g, wr.data()));
                let dw = tw.then(|| conv3d_grad_weight(&geom, g, xr.data()));
                let mut grads = vec![dx, dw];
                if let Some(tb) = tb {
                    grads.push(tb.then(|| {
                        let op = geom.out_plane();
                        let mut db = vec![0.0; geom.cout];
                        for (bc, plane) in g.chunks(op).enumerate() {
                            db[bc % geom.cout] += plane.iter().sum::<f64>();
                        }
                        db
                    }));
                }
                grads
            }))
        } else {
            None
        };
        self.record("conv3d", &inputs, Tensor::from_parts(shape, out), bw)
    }

    /// Max pooling over (T, H, W) of a 5-D input, no padding.
    pub fn maxpool3d(&self, x: &Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != 5 {
            return Err(Error::dim(format!("maxpool3d expects 5-D input, got {:?}", xs)));
        }
        let mut o = [0; 3];
        for i in 0..3 {
            o[i] = conv_out_len(xs[2 + i], kernel[i], stride[i], 0).ok_or_else(|| {
                Error::dim(format!(
                    "maxpool3d kernel {:?} stride {:?} does not fit input {:?}",
                    kernel, stride, xs
                ))
            })?;
        }
        let (t, h, w) = (xs[2], xs[3], xs[4]);
        let planes = xs[0] * xs[1];
        let ip = t * h * w;
        let op = o[0] * o[1] * o[2];
        let xd = x.data();
        let mut out = vec![0.0; planes * op];
        let mut arg = vec![0usize; planes * op];
        out.par_chunks_mut(op)
            .zip(arg.par_chunks_mut(op))
            .enumerate()
            .for_each(|(pl, (oplane, aplane))| {
                let base = pl * ip;
                for a in 0..o[0] {
                    for b in 0..o[1] {
                        for c in 0..o[2] {
                            let mut best = f64::NEG_INFINITY;
                            let mut bi = usize::MAX;
                            for dt in 0..kernel[0] {
                                for dh in 0..kernel[1] {
                                    for dw in 0..kernel[2] {
                                        let ti = a * stride[0] + dt;
                                        let hi = b * stride[1] + dh;
                                        let wi = c * stride[2] + dw;
                                        let idx = base + (ti * h + hi) * w + wi;
                                        if bi == usize::MAX || xd[idx] > best {
                                            best = xd[idx];
                                            bi = idx;
                                        }
                                    }
                                }
                            }
                            let oi = (a * o[1] + b) * o[2] + c;
                            oplane[oi] = best;
                            aplane[oi] = bi;
                        }
                    }
                }
            });
        let shape = vec![xs[0], xs[1], o[0], o[1], o[2]];
        let bw: Option<BackwardFn> = if self.needs_grad(&[x]) {
            let n = x.numel();
            Some(Box::new(move |g: &[f64]| {
                let mut dx = vec![0.0; n];
                for (gi, &i) in g.iter().zip(&arg) {
                    dx[i] += gi;
                }
                vec![Some(dx)]
            }))
        } else {
            None
        };
        self.record("maxpool3d", &[x], Tensor::from_parts(shape, out), bw)
    }

    /// Depthwise causal 1-D convolution along axis 1 of `x (B, L, D)`.
    ///
    /// `y[b, t, d] = bias[d] + Σ_k w[d, k] · x[b, t + k - (K - 1), d]`,
    /// positions before the sequence start read as zero.
    pub fn causal_depthwise_conv1d(&self, x: &Var, w: &Var, bias: &Var) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::dim(format!("conv1d expects (B, L, D), got {:?}", xs)));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        if w.shape().len() != 2 || w.shape()[0] != d || bias.shape() != [d] {
            return Err(Error::dim(format!(
                "conv1d over {} channels with weight {:?} and bias {:?}",
                d,
                w.shape(),
                bias.shape()
            )));
        }
        let k = w.shape()[1];
        let (xd, wd, bd) = (x.data(), w.data(), bias.data());
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for t in 0..l {
                let orow = &mut out[(bi * l + t) * d..][..d];
                orow.copy_from_slice(bd);
                for j in 0..k {
                    let src = t as i64 + j as i64 - (k as i64 - 1);
                    if src < 0 {
                        continue;
                    }
                    let xrow = &xd[(bi * l + src as usize) * d..][..d];
                    for c in 0..d {
                        orow[c] += wd[c * k + j] * xrow[c];
                    }
                }
            }
        }
        let bw: Option<BackwardFn> = if self.needs_grad(&[x, w, bias]) {
            let (xr, wr) = (x.rc(), w.rc());
            let tracked = [x.is_tracked(), w.is_tracked(), bias.is_tracked()];
            Some(Box::new(move |g: &[f64]| {
                let (xd, wd) = (xr.data(), wr.data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; d * k];
                let mut db = vec![0.0; d];
                for bi in 0..b {
                    for t in 0..l {
                        let grow = &g[(bi * l + t) * d..][..d];
                        for c in 0..d {
                            db[c] += grow[c];
                        }
                        for j in 0..k {
                            let src = t as i64 + j as i64 - (k as i64 - 1);
                            if src < 0 {
                                continue;
                            }
                            let off = (bi * l + src as usize) * d;
                            for c in 0..d {
                                dx[off + c] += wd[c * k + j] * grow[c];
                                dw[c * k + j] += grow[c] * xd[off + c];
                            }
                        }
                    }
                }
                vec![
                    tracked[0].then_some(dx),
                    tracked[1].then_some(dw),
                    tracked[2].then_some(db),
                ]
            }))
        } else {
            None
        };
        self.record(
            "causal_depthwise_conv1d",
            &[x, w, bias],
            Tensor::from_parts(xs.to_vec(), out),
            bw,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(tape: &Tape, t: Tensor) -> Var {
        tape.constant(t).unwrap()
    }

    #[test]
    fn all_ones_summation() {
        let tape = Tape::no_grad();
        let x = c(&tape, Tensor::ones([1, 1, 3, 1, 1]));
        let w = c(&tape, Tensor::ones([1, 1, 3, 1, 1]));
        let y = tape.conv3d(&x, &w, None, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let tape = Tape::no_grad();
        let mut rng = rand::thread_rng();
        let x = c(&tape, Tensor::randn([2, 1, 3, 4, 5], &mut rng));
        let w = c(&tape, Tensor::ones([1, 1, 1, 1, 1]));
        let y = tape.conv3d(&x, &w, None, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let tape = Tape::no_grad();
        let x = c(&tape, Tensor::zeros([1, 2, 3, 3, 3]));
        let w = c(&tape, Tensor::zeros([1, 3, 1, 1, 1]));
        assert!(matches!(
            tape.conv3d(&x, &w, None, [1, 1, 1], [0, 0, 0]),
            Err(Error::Dimension(_))
        ));
        assert!(tape.conv3d(&x, &x, None, [0, 1, 1], [0, 0, 0]).is_err());
    }

    #[test]
    fn valid_range_covers_exact_taps() {
        // n=5, k=3, pad 1, stride 2 -> out 3; tap 0 valid for wo >= 1
        assert_eq!(valid_range(5, 3, 0, 2, 1), (1, 3));
        assert_eq!(valid_range(5, 3, 1, 2, 1), (0, 3));
        assert_eq!(valid_range(5, 3, 2, 2, 1), (0, 2));
    }

    #[test]
    fn maxpool_extent_and_values() {
        let tape = Tape::no_grad();
        let x = c(
            &tape,
            Tensor::new([1, 1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 8., 7.]).unwrap(),
        );
        let y = tape.maxpool3d(&x, [1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 2]);
        assert_eq!(y.data(), &[5., 8.]);
    }

    #[test]
    fn causal_conv_short_sequence_is_zero_padded() {
        let tape = Tape::no_grad();
        let x = c(&tape, Tensor::new([1, 2, 1], vec![1., 2.]).unwrap());
        let w = c(&tape, Tensor::new([1, 4], vec![1., 10., 100., 1000.]).unwrap());
        let b = c(&tape, Tensor::zeros([1]));
        let y = tape.causal_depthwise_conv1d(&x, &w, &b).unwrap();
        // y0 = 1000*x0, y1 = 100*x0 + 1000*x1
        assert_eq!(y.data(), &[1000., 2100.]);
    }
}
