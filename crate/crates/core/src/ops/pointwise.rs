use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::check_same_shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ActivationBackward(Activation);

impl BackwardOp for ActivationBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let g = ctx.grad;
        let out = match self.0 {
            Activation::Relu => x
                .iter()
                .zip(g)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            Activation::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect(),
            Activation::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (1.0 - y * y)).collect(),
        };
        vec![Some(out)]
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryBackward(Binary);

impl BackwardOp for BinaryBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let a = ctx.inputs[0].data();
        let b = ctx.inputs[1].data();
        let g = ctx.grad;
        let (ga, gb): (Vec<f64>, Vec<f64>) = match self.0 {
            Binary::Add => (g.to_vec(), g.to_vec()),
            Binary::Sub => (g.to_vec(), g.iter().map(|g| -g).collect()),
            Binary::Mul => (
                g.iter().zip(b).map(|(g, b)| g * b).collect(),
                g.iter().zip(a).map(|(g, a)| g * a).collect(),
            ),
            Binary::Div => (
                g.iter().zip(b).map(|(g, b)| g / b).collect(),
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect(),
            ),
        };
        vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gb)]
    }
}

struct ScaleBackward(f64);

impl BackwardOp for ScaleBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad.iter().map(|g| g * self.0).collect())]
    }
}

struct AbsBackward;

impl BackwardOp for AbsBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0].data();
        vec![Some(
            x.iter()
                .zip(ctx.grad)
                .map(|(&x, &g)| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect(),
        )]
    }
}

struct ClampBackward {
    lo: f64,
    hi: f64,
}

impl BackwardOp for ClampBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0].data();
        vec![Some(
            x.iter()
                .zip(ctx.grad)
                .map(|(&x, &g)| if x >= self.lo && x <= self.hi { g } else { 0.0 })
                .collect(),
        )]
    }
}

impl Tape {
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let [xv] = self.values([x])?;
        let y = xv.map(|v| kind.apply(v));
        Ok(self.record(y, &[x], ActivationBackward(kind)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary, name: &str) -> Result<Var> {
        let [av, bv] = self.values([a, b])?;
        check_same_shape(name, av.shape(), bv.shape())?;
        let y = match op {
            Binary::Add => av.zip_map(bv, |a, b| a + b),
            Binary::Sub => av.zip_map(bv, |a, b| a - b),
            Binary::Mul => av.zip_map(bv, |a, b| a * b),
            Binary::Div => av.zip_map(bv, |a, b| a / b),
        }?;
        Ok(self.record(y, &[a, b], BinaryBackward(op)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    /// Elementwise quotient; the caller keeps `b` away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let [xv] = self.values([x])?;
        let y = xv.map(|v| v + c);
        Ok(self.record(y, &[x], ScaleBackward(1.0)))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("scalar factor {c}")));
        }
        let [xv] = self.values([x])?;
        let y = xv.map(|v| v * c);
        Ok(self.record(y, &[x], ScaleBackward(c)))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let [xv] = self.values([x])?;
        let y = xv.map(f64::abs);
        Ok(self.record(y, &[x], AbsBackward))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let [xv] = self.values([x])?;
        let y = xv.map(|v| v.clamp(lo, hi));
        Ok(self.record(y, &[x], ClampBackward { lo, hi }))
    }
}
