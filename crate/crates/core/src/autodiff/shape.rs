use super::{BackwardFn, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Split `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    Ok(())
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // Stride in the input for each output axis.
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    while out.len() < n {
        // innermost axis as a tight loop
        let stride = src[last];
        for k in 0..out_shape[last] {
            out.push(data[offset + k * stride]);
        }
        // advance the odometer over the remaining axes
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

impl Tape {
    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != x.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                x.shape(),
                shape
            )));
        }
        let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        let bw: Option<BackwardFn> = Some(Box::new(|g: &[f64]| vec![Some(g.to_vec())]));
        self.record("reshape", &[x], out, bw)
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: &Var, perm: &[usize]) -> Result<Var> {
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "invalid permutation {:?} for rank {}",
                perm, rank
            )));
        }
        let (out_shape, data) = permute_data(x.data(), x.shape(), perm);
        let bw: Option<BackwardFn> = if self.needs_grad(&[x]) {
            let mut inverse = vec![0; rank];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let os = out_shape.clone();
            Some(Box::new(move |g: &[f64]| {
                vec![Some(permute_data(g, &os, &inverse).1)]
            }))
        } else {
            None
        };
        self.record("permute", &[x], Tensor::from_parts(out_shape, data), bw)
    }

    /// Explicit expansion of size-1 axes to `shape` (same rank).
    pub fn broadcast_to(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let xs = x.shape().to_vec();
        if xs.len() != shape.len()
            || xs.iter().zip(shape).any(|(&a, &b)| a != b && a != 1)
        {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} to {:?}",
                xs, shape
            )));
        }
        let in_strides = strides(&xs);
        let src: Vec<usize> = xs
            .iter()
            .zip(&in_strides)
            .map(|(&e, &s)| if e == 1 { 0 } else { s })
            .collect();
        let out_strides = strides(shape);
        let n = numel(shape);
        let map: Vec<usize> = (0..n)
            .map(|flat| {
                let mut rem = flat;
                let mut off = 0;
                for (os, ss) in out_strides.iter().zip(&src) {
                    off += (rem / os) * ss;
                    rem %= os;
                }
                off
            })
            .collect();
        let xd = x.data();
        let data = map.iter().map(|&i| xd[i]).collect();
        let bw: Option<BackwardFn> = if self.needs_grad(&[x]) {
            let m = x.numel();
            Some(Box::new(move |g: &[f64]| {
                let mut gx = vec![0.0; m];
                for (gi, &i) in g.iter().zip(&map) {
                    gx[i] += gi;
                }
                vec![Some(gx)]
            }))
        } else {
            None
        };
        self.record("broadcast_to", &[x], Tensor::from_parts(shape.to_vec(), data), bw)
    }

    /// Gather positions `indices` along `axis`; repeats are allowed.
    pub fn index_select(&self, x: &Var, axis: usize, indices: &[usize]) -> Result<Var> {
        check_axis(x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::dim(format!(
                "index {} out of range for axis {} of extent {}",
                bad, axis, len
            )));
        }
        let k = indices.len();
        let xd = x.data();
        let mut data = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                data.extend_from_slice(&xd[base..base + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = k;
        let bw: Option<BackwardFn> = if self.needs_grad(&[x]) {
            let idx = indices.to_vec();
            let m = x.numel();
            Some(Box::new(move |g: &[f64]| {
                let mut gx = vec![0.0; m];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = (o * k + j) * inner;
                        let dst = (o * len + i) * inner;
                        for t in 0..inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                }
                vec![Some(gx)]
            }))
        } else {
            None
        };
        self.record("index_select", &[x], Tensor::from_parts(shape, data), bw)
    }

    pub fn narrow(&self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(x, axis, &idx)
    }

    /// Reverse the order of `axis`.
    pub fn flip(&self, x: &Var, axis: usize) -> Result<Var> {
        check_axis(x.shape(), axis)?;
        let n = x.shape()[axis];
        let idx: Vec<usize> = (0..n).rev().collect();
        self.index_select(x, axis, &idx)
    }

    /// Nearest-neighbour upsampling of `axis` by an integer factor.
    pub fn repeat_interleave(&self, x: &Var, axis: usize, factor: usize) -> Result<Var> {
        check_axis(x.shape(), axis)?;
        let n = x.shape()[axis];
        let idx: Vec<usize> = (0..n * factor).map(|i| i / factor).collect();
        self.index_select(x, axis, &idx)
    }

    /// Edge-replicating padding of `axis`.
    pub fn pad_replicate(&self, x: &Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        check_axis(x.shape(), axis)?;
        let n = x.shape()[axis];
        if n == 0 {
            return Err(Error::dim("cannot replicate-pad an empty axis"));
        }
        let idx: Vec<usize> = std::iter::repeat(0)
            .take(before)
            .chain(0..n)
            .chain(std::iter::repeat(n - 1).take(after))
            .collect();
        self.index_select(x, axis, &idx)
    }

    pub fn concat(&self, xs: &[&Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        check_axis(first.shape(), axis)?;
        let rank = first.shape().len();
        for v in xs {
            let ok = v.shape().len() == rank
                && v
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat along axis {} of {:?} and {:?}",
                    axis,
                    first.shape(),
                    v.shape()
                )));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let sizes: Vec<usize> = xs.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in xs.iter().zip(&sizes) {
                let base = o * s * inner;
                data.extend_from_slice(&v.data()[base..base + s * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let bw: Option<BackwardFn> = if self.needs_grad(xs) {
            let tracked: Vec<bool> = xs.iter().map(|v| v.is_tracked()).collect();
            Some(Box::new(move |g: &[f64]| {
                let mut parts: Vec<Vec<f64>> =
                    sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, &s) in parts.iter_mut().zip(&sizes) {
                        p.extend_from_slice(&g[off..off + s * inner]);
                        off += s * inner;
                    }
                }
                parts
                    .into_iter()
                    .zip(tracked)
                    .map(|(p, t)| t.then_some(p))
                    .collect()
            }))
        } else {
            None
        };
        self.record("concat", xs, Tensor::from_parts(shape, data), bw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let tape = Tape::no_grad();
        let x = tape
            .constant(t(&[2, 3, 4], (0..24).map(f64::from).collect()))
            .unwrap();
        let y = tape.permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(y.value().at(&[a, b, c]), x.value().at(&[b, c, a]));
                }
            }
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let tape = Tape::no_grad();
        let x = tape
            .constant(t(&[2, 3, 4], (0..24).map(|v| v as f64 * 0.5).collect()))
            .unwrap();
        let y = tape.flip(&tape.flip(&x, 2).unwrap(), 2).unwrap();
        assert_eq!(y.data(), x.data());
        let z = tape.flip(&x, 1).unwrap();
        assert_eq!(z.value().at(&[1, 0, 2]), x.value().at(&[1, 2, 2]));
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let tape = Tape::no_grad();
        let a = tape.constant(t(&[2, 1, 2], vec![1., 2., 3., 4.])).unwrap();
        let b = tape.constant(t(&[2, 2, 2], vec![5., 6., 7., 8., 9., 10., 11., 12.])).unwrap();
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        assert_eq!(tape.narrow(&c, 1, 1, 2).unwrap().data(), b.data());
    }

    #[test]
    fn replicate_pad_and_upsample() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::from_vec(vec![1., 2., 3.])).unwrap();
        let p = tape.pad_replicate(&x, 0, 2, 1).unwrap();
        assert_eq!(p.data(), &[1., 1., 1., 2., 3., 3.]);
        let u = tape.repeat_interleave(&x, 0, 2).unwrap();
        assert_eq!(u.data(), &[1., 1., 2., 2., 3., 3.]);
    }

    #[test]
    fn broadcast_gradient_sums_expanded_axes() {
        let tape = Tape::new();
        let x = tape
            .leaf(t(&[2, 1], vec![1., 2.]).with_requires_grad(true))
            .unwrap();
        let y = tape.broadcast_to(&x, &[2, 3]).unwrap();
        assert_eq!(y.data(), &[1., 1., 1., 2., 2., 2.]);
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[3., 3.]);
    }

    #[test]
    fn bad_arguments_are_dimension_errors() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros([2, 3])).unwrap();
        assert!(tape.reshape(&x, &[4]).is_err());
        assert!(tape.permute(&x, &[0, 0]).is_err());
        assert!(tape.broadcast_to(&x, &[4, 3]).is_err());
        assert!(tape.index_select(&x, 1, &[3]).is_err());
        assert!(tape.flip(&x, 2).is_err());
    }
}
