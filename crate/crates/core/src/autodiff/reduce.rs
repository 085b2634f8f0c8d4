use super::{BackwardFn, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

/// Output shape (with or without reduced axes) plus, for each input element,
/// the flat index of the output element it reduces into.
fn reduction_map(shape: &[usize], axes: &[usize], keepdim: bool) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank || reduced[a] {
            return Err(Error::dim(format!(
                "invalid reduction axes {:?} for shape {:?}",
                axes, shape
            )));
        }
        reduced[a] = true;
    }
    let kept: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .map(|(&e, &r)| if r { 1 } else { e })
        .collect();
    let count: usize = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| r)
        .map(|(&e, _)| e)
        .product();
    let in_strides = strides(shape);
    let kept_strides = strides(&kept);
    let n: usize = shape.iter().product();
    let map = (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut off = 0;
            for ax in 0..rank {
                let i = rem / in_strides[ax];
                rem %= in_strides[ax];
                if !reduced[ax] {
                    off += i * kept_strides[ax];
                }
            }
            off
        })
        .collect();
    let out_shape = if keepdim {
        kept
    } else {
        shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect()
    };
    Ok((out_shape, map, count))
}

impl Tape {
    pub fn sum(&self, x: &Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let (shape, map, _) = reduction_map(x.shape(), axes, keepdim)?;
        let m: usize = shape.iter().product();
        let mut out = vec![0.0; m];
        for (v, &i) in x.data().iter().zip(&map) {
            out[i] += v;
        }
        let bw: Option<BackwardFn> = if self.needs_grad(&[x]) {
            Some(Box::new(move |g: &[f64]| {
                vec![Some(map.iter().map(|&i| g[i]).collect())]
            }))
        } else {
            None
        };
        self.record("sum", &[x], Tensor::from_parts(shape, out), bw)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self, x: &Var) -> Result<Var> {
        let axes: Vec<usize> = (0..x.shape().len()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean(&self, x: &Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let (_, _, count) = reduction_map(x.shape(), axes, keepdim)?;
        if count == 0 {
            return Err(Error::DegenerateReduction("mean over an empty axis".into()));
        }
        let s = self.sum(x, axes, keepdim)?;
        self.scale(&s, 1.0 / count as f64)
    }

    pub fn mean_all(&self, x: &Var) -> Result<Var> {
        let axes: Vec<usize> = (0..x.shape().len()).collect();
        self.mean(x, &axes, false)
    }

    /// Population standard deviation `sqrt(var + eps)` over `axes`.
    pub fn std(&self, x: &Var, axes: &[usize], keepdim: bool, eps: f64) -> Result<Var> {
        let (shape, map, count) = reduction_map(x.shape(), axes, keepdim)?;
        if count <= 1 && eps <= 0.0 {
            return Err(Error::DegenerateReduction(
                "std over a single element needs a positive eps guard".into(),
            ));
        }
        let m: usize = shape.iter().product();
        let xd = x.data();
        let mut mean = vec![0.0; m];
        for (v, &i) in xd.iter().zip(&map) {
            mean[i] += v;
        }
        mean.iter_mut().for_each(|v| *v /= count as f64);
        let mut var = vec![0.0; m];
        for (v, &i) in xd.iter().zip(&map) {
            var[i] += (v - mean[i]).powi(2);
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count as f64 + eps).sqrt()).collect();
        if std.contains(&0.0) {
            return Err(Error::DegenerateReduction(
                "zero variance without an eps guard".into(),
            ));
        }
        let bw: Option<BackwardFn> = if self.needs_grad(&[x]) {
            let xin = x.rc();
            let (mean, stdc) = (mean, std.clone());
            Some(Box::new(move |g: &[f64]| {
                let gx = xin
                    .data()
                    .iter()
                    .zip(&map)
                    .map(|(v, &i)| g[i] * (v - mean[i]) / (count as f64 * stdc[i]))
                    .collect();
                vec![Some(gx)]
            }))
        } else {
            None
        };
        self.record("std", &[x], Tensor::from_parts(shape, std), bw)
    }

    /// Maximum over `axes`; the gradient flows to the first maximal element.
    pub fn max(&self, x: &Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let (shape, map, count) = reduction_map(x.shape(), axes, keepdim)?;
        if count == 0 {
            return Err(Error::DegenerateReduction("max over an empty axis".into()));
        }
        let m: usize = shape.iter().product();
        let mut best = vec![f64::NEG_INFINITY; m];
        let mut arg = vec![usize::MAX; m];
        for (j, (&v, &i)) in x.data().iter().zip(&map).enumerate() {
            if arg[i] == usize::MAX || v > best[i] {
                best[i] = v;
                arg[i] = j;
            }
        }
        let bw: Option<BackwardFn> = if self.needs_grad(&[x]) {
            let n = x.numel();
            Some(Box::new(move |g: &[f64]| {
                let mut gx = vec![0.0; n];
                for (gi, &j) in g.iter().zip(&arg) {
                    gx[j] += gi;
                }
                vec![Some(gx)]
            }))
        } else {
            None
        };
        self.record("max", &[x], Tensor::from_parts(shape, best), bw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &Tape, v: Vec<f64>) -> Var {
        tape.constant(Tensor::from_vec(v)).unwrap()
    }

    #[test]
    fn mean_and_population_std() {
        let tape = Tape::no_grad();
        let x = vec_var(&tape, vec![1.0, 2.0, 3.0]);
        assert_eq!(tape.mean_all(&x).unwrap().data(), &[2.0]);
        let s = tape.std(&x, &[0], false, 0.0).unwrap().data()[0];
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s - 0.816_497).abs() < 1e-6);
    }

    #[test]
    fn std_of_single_element_requires_eps() {
        let tape = Tape::no_grad();
        let x = vec_var(&tape, vec![4.0]);
        assert!(matches!(
            tape.std(&x, &[0], false, 0.0),
            Err(Error::DegenerateReduction(_))
        ));
        assert!((tape.std(&x, &[0], false, 1e-4).unwrap().data()[0] - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn partial_axis_sum_keepdim() {
        let tape = Tape::no_grad();
        let x = tape
            .constant(Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let s = tape.sum(&x, &[1], true).unwrap();
        assert_eq!(s.shape(), &[2, 1]);
        assert_eq!(s.data(), &[6., 15.]);
        let s0 = tape.sum(&x, &[0], false).unwrap();
        assert_eq!(s0.shape(), &[3]);
        assert_eq!(s0.data(), &[5., 7., 9.]);
        let m = tape.max(&x, &[0, 1], false).unwrap();
        assert_eq!(m.data(), &[6.]);
    }
}
