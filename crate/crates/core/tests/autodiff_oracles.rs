//! Kernels against naive loop oracles, plus shape algebra and determinism.

use physmamba_core::autodiff::conv_out_len;
use physmamba_core::verify::{op_suite, Sampling};
use physmamba_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-12;

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.max_abs_diff(b) / scale
}

fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let out: Vec<usize> = (0..3).map(|i| conv_out_len(xs[2 + i], ws[2 + i], stride[i], pad[i]).unwrap()).collect();
    let shape = vec![xs[0], ws[0], out[0], out[1], out[2]];
    let mut y = Tensor::zeros(shape.clone());
    let mut idx = 0;
    for b in 0..xs[0] {
        for o in 0..ws[0] {
            for t in 0..out[0] {
                for h in 0..out[1] {
                    for v in 0..out[2] {
                        let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
                        for c in 0..xs[1] {
                            for i in 0..ws[2] {
                                for j in 0..ws[3] {
                                    for k in 0..ws[4] {
                                        let ti = (t * stride[0] + i) as i64 - pad[0] as i64;
                                        let hi = (h * stride[1] + j) as i64 - pad[1] as i64;
                                        let wi = (v * stride[2] + k) as i64 - pad[2] as i64;
                                        if ti < 0 || hi < 0 || wi < 0 {
                                            continue;
                                        }
                                        let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                        if ti >= xs[2] || hi >= xs[3] || wi >= xs[4] {
                                            continue;
                                        }
                                        acc += x.at(&[b, c, ti, hi, wi]) * w.at(&[o, c, i, j, k]);
                                    }
                                }
                            }
                        }
                        y.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    y
}

fn maxpool_oracle(x: &Tensor, kernel: [usize; 3], stride: [usize; 3]) -> Tensor {
    let xs = x.shape();
    let out: Vec<usize> = (0..3).map(|i| conv_out_len(xs[2 + i], kernel[i], stride[i], 0).unwrap()).collect();
    let mut data = Vec::new();
    for b in 0..xs[0] {
        for c in 0..xs[1] {
            for t in 0..out[0] {
                for h in 0..out[1] {
                    for v in 0..out[2] {
                        let mut m = f64::NEG_INFINITY;
                        for i in 0..kernel[0] {
                            for j in 0..kernel[1] {
                                for k in 0..kernel[2] {
                                    m = m.max(x.at(&[b, c, t * stride[0] + i, h * stride[1] + j, v * stride[2] + k]));
                                }
                            }
                        }
                        data.push(m);
                    }
                }
            }
        }
    }
    Tensor::new(vec![xs[0], xs[1], out[0], out[1], out[2]], data).unwrap()
}

fn linear_oracle(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let din = w.shape()[1];
    let dout = w.shape()[0];
    let rows = x.numel() / din;
    let mut data = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                acc += x.data()[r * din + i] * w.data()[o * din + i];
            }
            data.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, data).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv3d_matches_loop_oracle_on_padded_case() {
    let mut r = rng(1);
    let x = Tensor::randn([1, 2, 4, 3, 3], &mut r);
    let w = Tensor::randn([2, 2, 3, 3, 3], &mut r);
    let tape = Tape::no_grad();
    let y = tape
        .conv3d(&tape.constant(x.clone()).unwrap(), &tape.constant(w.clone()).unwrap(), None, [1, 1, 1], [1, 1, 1])
        .unwrap();
    let oracle = conv_oracle(&x, &w, None, [1, 1, 1], [1, 1, 1]);
    assert_eq!(y.shape(), oracle.shape());
    assert!(rel(&y.to_tensor(), &oracle) <= ORACLE_TOL);
}

#[test]
fn linear_matches_loop_oracle() {
    let mut r = rng(2);
    let x = Tensor::randn([2, 5, 4], &mut r);
    let w = Tensor::randn([3, 4], &mut r);
    let b = Tensor::randn([3], &mut r);
    let tape = Tape::no_grad();
    let y = tape
        .linear(&tape.constant(x.clone()).unwrap(), &tape.constant(w.clone()).unwrap(), Some(&tape.constant(b.clone()).unwrap()))
        .unwrap();
    assert_eq!(y.shape(), &[2, 5, 3]);
    assert!(rel(&y.to_tensor(), &linear_oracle(&x, &w, Some(&b))) <= ORACLE_TOL);
}

#[test]
fn silu_closed_form() {
    let tape = Tape::no_grad();
    let y = tape.silu(&tape.constant(Tensor::from_vec(vec![1.0])).unwrap()).unwrap();
    assert!((y.data()[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert!((y.data()[0] - 0.731059).abs() < 1e-6);
}

#[test]
fn every_operation_passes_gradient_check() {
    for r in op_suite(Sampling::Count(48), 21).unwrap() {
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let run = || {
        let mut r = rng(3);
        let x = Tensor::randn([2, 3, 6, 5, 5], &mut r);
        let w = Tensor::randn([4, 3, 3, 3, 3], &mut r);
        let tape = Tape::new();
        let xv = tape.leaf(x.with_requires_grad(true)).unwrap();
        let wv = tape.leaf(w.with_requires_grad(true)).unwrap();
        let y = tape.conv3d(&xv, &wv, None, [1, 2, 2], [1, 1, 1]).unwrap();
        let y = tape.tanh(&y).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        (y.data().to_vec(), g.get_or_zeros(&wv).into_data(), g.get_or_zeros(&xv).into_data())
    };
    assert_eq!(run(), run());
}

/// Input shape, kernel, stride, padding, output channels, bias, seed.
type ConvCase = ([usize; 5], [usize; 3], [usize; 3], [usize; 3], usize, bool, u64);

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (
        (1usize..=2, 1usize..=3, 1usize..=6, 1usize..=6, 1usize..=6),
        (1usize..=3, 1usize..=3, 1usize..=3),
        (1usize..=3, 1usize..=3, 1usize..=3),
        (0usize..=1, 0usize..=1, 0usize..=1),
        1usize..=3,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_filter_map("kernel must fit", |((b, c, t, h, w), k, s, p, cout, bias, seed)| {
            let (k, s, p) = ([k.0, k.1, k.2], [s.0, s.1, s.2], [p.0, p.1, p.2]);
            let dims = [t, h, w];
            (0..3)
                .all(|i| dims[i] + 2 * p[i] >= k[i])
                .then_some(([b, c, t, h, w], k, s, p, cout, bias, seed))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv3d_oracle_and_extents((xs, k, s, p, cout, with_bias, seed) in conv_case()) {
        let mut r = rng(seed);
        let x = Tensor::randn(xs.to_vec(), &mut r);
        let w = Tensor::randn([cout, xs[1], k[0], k[1], k[2]], &mut r);
        let b = Tensor::randn([cout], &mut r);
        let tape = Tape::no_grad();
        let bv = tape.constant(b.clone()).unwrap();
        let y = tape.conv3d(
            &tape.constant(x.clone()).unwrap(),
            &tape.constant(w.clone()).unwrap(),
            with_bias.then_some(&bv),
            s,
            p,
        ).unwrap();
        for i in 0..3 {
            prop_assert_eq!(y.shape()[2 + i], (xs[2 + i] + 2 * p[i] - k[i]) / s[i] + 1);
        }
        let oracle = conv_oracle(&x, &w, with_bias.then_some(&b), s, p);
        prop_assert!(rel(&y.to_tensor(), &oracle) <= ORACLE_TOL);
    }

    #[test]
    fn maxpool_oracle_and_extents(
        dims in (1usize..=2, 1usize..=3, 2usize..=7, 2usize..=7, 2usize..=7),
        k in (1usize..=2, 1usize..=2, 1usize..=2),
        s in (1usize..=2, 1usize..=2, 1usize..=2),
        seed in any::<u64>(),
    ) {
        let x = Tensor::randn([dims.0, dims.1, dims.2, dims.3, dims.4], &mut rng(seed));
        let (k, s) = ([k.0, k.1, k.2], [s.0, s.1, s.2]);
        let tape = Tape::no_grad();
        let y = tape.maxpool3d(&tape.constant(x.clone()).unwrap(), k, s).unwrap();
        let ext = [dims.2, dims.3, dims.4];
        for i in 0..3 {
            prop_assert_eq!(y.shape()[2 + i], (ext[i] - k[i]) / s[i] + 1);
        }
        prop_assert_eq!(y.to_tensor(), maxpool_oracle(&x, k, s));
    }

    #[test]
    fn linear_oracle_random_shapes(
        lead in prop::collection::vec(1usize..=4, 0..=2),
        din in 1usize..=6,
        dout in 1usize..=5,
        with_bias in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let mut shape = lead.clone();
        shape.push(din);
        let x = Tensor::randn(shape, &mut r);
        let w = Tensor::randn([dout, din], &mut r);
        let b = Tensor::randn([dout], &mut r);
        let tape = Tape::no_grad();
        let bv = tape.constant(b.clone()).unwrap();
        let y = tape.linear(&tape.constant(x.clone()).unwrap(), &tape.constant(w.clone()).unwrap(), with_bias.then_some(&bv)).unwrap();
        prop_assert!(rel(&y.to_tensor(), &linear_oracle(&x, &w, with_bias.then_some(&b))) <= ORACLE_TOL);
    }
}
