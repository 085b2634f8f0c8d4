use super::{BackwardFn, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Ln,
    Sqrt,
    Square,
    Neg,
    Relu,
    Silu,
    Sigmoid,
    Softplus,
    Tanh,
    Scale(f64),
    AddScalar(f64),
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Square => "square",
            UnaryOp::Neg => "neg",
            UnaryOp::Relu => "relu",
            UnaryOp::Silu => "silu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::AddScalar(_) => "add_scalar",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Neg => -x,
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Scale(c) => c * x,
            UnaryOp::AddScalar(c) => x + c,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Exp => y,
            UnaryOp::Ln => 1.0 / x,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Neg => -1.0,
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Scale(c) => c,
            UnaryOp::AddScalar(_) => 1.0,
        }
    }
}

impl Tape {
    pub fn unary(&self, op: UnaryOp, x: &Var) -> Result<Var> {
        let out = x.value().map(|v| op.apply(v));
        let bw: Option<BackwardFn> = if self.needs_grad(&[x]) {
            let xin = x.rc();
            let yout = out.data().to_vec();
            Some(Box::new(move |g: &[f64]| {
                let gx = g
                    .iter()
                    .zip(xin.data())
                    .zip(&yout)
                    .map(|((g, &x), &y)| g * op.derivative(x, y))
                    .collect();
                vec![Some(gx)]
            }))
        } else {
            None
        };
        self.record(op.name(), &[x], out, bw)
    }

    /// Binary op over equal shapes, or with one side holding a single value.
    pub fn binary(&self, op: BinaryOp, a: &Var, b: &Var) -> Result<Var> {
        let (na, nb) = (a.numel(), b.numel());
        let shape = if a.shape() == b.shape() || nb == 1 {
            a.shape().to_vec()
        } else if na == 1 {
            b.shape().to_vec()
        } else {
            return Err(Error::dim(format!(
                "binary {:?} needs equal shapes or a scalar side, got {:?} and {:?}",
                op,
                a.shape(),
                b.shape()
            )));
        };
        let n = na.max(nb);
        let (ad, bd) = (a.data(), b.data());
        let ai = |i: usize| if na == 1 { ad[0] } else { ad[i] };
        let bi = |i: usize| if nb == 1 { bd[0] } else { bd[i] };
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (ai(i), bi(i));
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let out = Tensor::from_parts(shape, data);
        let bw: Option<BackwardFn> = if self.needs_grad(&[a, b]) {
            let (ra, rb) = (a.rc(), b.rc());
            let (ta, tb) = (a.is_tracked(), b.is_tracked());
            Some(Box::new(move |g: &[f64]| {
                let (ad, bd) = (ra.data(), rb.data());
                let av = |i: usize| if na == 1 { ad[0] } else { ad[i] };
                let bv = |i: usize| if nb == 1 { bd[0] } else { bd[i] };
                // Per-element partials, reduced onto scalar sides.
                let fold = |len: usize, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
                    if len == 1 {
                        vec![(0..g.len()).map(f).sum()]
                    } else {
                        (0..g.len()).map(f).collect()
                    }
                };
                let ga = ta.then(|| match op {
                    BinaryOp::Add | BinaryOp::Sub => fold(na, &|i| g[i]),
                    BinaryOp::Mul => fold(na, &|i| g[i] * bv(i)),
                    BinaryOp::Div => fold(na, &|i| g[i] / bv(i)),
                });
                let gb = tb.then(|| match op {
                    BinaryOp::Add => fold(nb, &|i| g[i]),
                    BinaryOp::Sub => fold(nb, &|i| -g[i]),
                    BinaryOp::Mul => fold(nb, &|i| g[i] * av(i)),
                    BinaryOp::Div => fold(nb, &|i| -g[i] * av(i) / (bv(i) * bv(i))),
                });
                vec![ga, gb]
            }))
        } else {
            None
        };
        self.record(name, &[a, b], out, bw)
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn exp(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn ln(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Ln, x)
    }

    pub fn sqrt(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn square(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn neg(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn relu(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn silu(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn sigmoid(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn softplus(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn tanh(&self, x: &Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn scale(&self, x: &Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), x)
    }

    pub fn add_scalar(&self, x: &Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::AddScalar(c), x)
    }
}
