//! Straight-line reference for the selective scan.
//!
//! The whole computation (token projections, softplus step, exact
//! zero-order-hold discretization, recurrence, readout) is unrolled into a
//! flat list of scalar instructions and evaluated by a small interpreter.
//! It shares no code with the production kernels.

use crate::error::{Error, Result};
use crate::ssm::SsmParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
enum Instr {
    Input(usize),
    Const(f64),
    Add(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Expm1(usize),
    Softplus(usize),
}

#[derive(Debug, Default)]
pub struct Program {
    code: Vec<Instr>,
}

impl Program {
    fn emit(&mut self, i: Instr) -> usize {
        self.code.push(i);
        self.code.len() - 1
    }

    fn dot(&mut self, xs: &[usize], ys: &[usize]) -> usize {
        let mut acc = self.emit(Instr::Const(0.0));
        for (&x, &y) in xs.iter().zip(ys) {
            let p = self.emit(Instr::Mul(x, y));
            acc = self.emit(Instr::Add(acc, p));
        }
        acc
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    /// Evaluate every instruction in order.
    pub fn run(&self, inputs: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = Vec::with_capacity(self.code.len());
        for ins in &self.code {
            let v = match *ins {
                Instr::Input(i) => inputs[i],
                Instr::Const(c) => c,
                Instr::Add(a, b) => r[a] + r[b],
                Instr::Mul(a, b) => r[a] * r[b],
                Instr::Div(a, b) => r[a] / r[b],
                Instr::Neg(a) => -r[a],
                Instr::Exp(a) => f64::exp(r[a]),
                Instr::Expm1(a) => f64::exp_m1(r[a]),
                Instr::Softplus(a) => {
                    let x: f64 = r[a];
                    if x > 30.0 {
                        x
                    } else {
                        x.exp().ln_1p()
                    }
                }
            };
            r.push(v);
        }
        r
    }
}

/// Unrolled program for a sequence of `len` tokens and the output registers
/// (row-major `(L, D)`). Inputs are laid out as `x, a_log, b_proj, c_proj,
/// dt_down, dt_up, dt_bias`.
pub fn compile(len: usize, d: usize, n: usize, rank: usize) -> (Program, Vec<usize>) {
    let mut p = Program::default();
    let mut next = 0;
    let mut inputs = |p: &mut Program, count: usize| -> Vec<usize> {
        let regs = (next..next + count).map(|i| p.emit(Instr::Input(i))).collect();
        next += count;
        regs
    };
    let x = inputs(&mut p, len * d);
    let a_log = inputs(&mut p, d * n);
    let b_proj = inputs(&mut p, n * d);
    let c_proj = inputs(&mut p, n * d);
    let dt_down = inputs(&mut p, rank * d);
    let dt_up = inputs(&mut p, d * rank);
    let dt_bias = inputs(&mut p, d);

    let a: Vec<usize> = a_log
        .iter()
        .map(|&r| {
            let e = p.emit(Instr::Exp(r));
            p.emit(Instr::Neg(e))
        })
        .collect();
    let mut h: Vec<usize> = (0..d * n).map(|_| p.emit(Instr::Const(0.0))).collect();
    let mut out = Vec::with_capacity(len * d);
    for t in 0..len {
        let xt = &x[t * d..(t + 1) * d];
        let bt: Vec<usize> = (0..n).map(|j| p.dot(&b_proj[j * d..(j + 1) * d], xt)).collect();
        let ct: Vec<usize> = (0..n).map(|j| p.dot(&c_proj[j * d..(j + 1) * d], xt)).collect();
        let low: Vec<usize> = (0..rank).map(|r| p.dot(&dt_down[r * d..(r + 1) * d], xt)).collect();
        for ch in 0..d {
            let pre = p.dot(&dt_up[ch * rank..(ch + 1) * rank], &low);
            let pre = p.emit(Instr::Add(pre, dt_bias[ch]));
            let step = p.emit(Instr::Softplus(pre));
            let mut y = p.emit(Instr::Const(0.0));
            for j in 0..n {
                let k = ch * n + j;
                let z = p.emit(Instr::Mul(step, a[k]));
                let decay = p.emit(Instr::Exp(z));
                let em1 = p.emit(Instr::Expm1(z));
                let gain = p.emit(Instr::Div(em1, a[k]));
                let gain = p.emit(Instr::Mul(gain, bt[j]));
                let carried = p.emit(Instr::Mul(decay, h[k]));
                let fresh = p.emit(Instr::Mul(gain, xt[ch]));
                h[k] = p.emit(Instr::Add(carried, fresh));
                let read = p.emit(Instr::Mul(ct[j], h[k]));
                y = p.emit(Instr::Add(y, read));
            }
            out.push(y);
        }
    }
    (p, out)
}

/// Selective scan of `x: (L, D)` evaluated by the reference interpreter.
pub fn reference_selective_scan(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let (d, n) = (params.channels(), params.states());
    if x.rank() != 2 || x.shape()[1] != d {
        return Err(Error::dim(format!("reference scan over {d} channels got {:?}", x.shape())));
    }
    let len = x.shape()[0];
    let rank = params.dt_down.shape()[0];
    let (prog, outs) = compile(len, d, n, rank);
    let inputs: Vec<f64> = [
        x,
        &params.a_log,
        &params.b_proj,
        &params.c_proj,
        &params.dt_down,
        &params.dt_up,
        &params.dt_bias,
    ]
    .iter()
    .flat_map(|t| t.data().iter().copied())
    .collect();
    let regs = prog.run(&inputs);
    Tensor::new([len, d], outs.iter().map(|&r| regs[r]).collect())
}
