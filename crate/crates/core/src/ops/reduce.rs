use super::split_axis;
use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::Tensor;

struct SumBackward;

impl BackwardOp for SumBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]
    }
}

struct SumAxisBackward {
    axis: usize,
    scale: f64,
}

impl BackwardOp for SumAxisBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (outer, extent, inner) = split_axis(ctx.inputs[0].shape(), self.axis);
        let mut gx = vec![0.0; outer * extent * inner];
        for o in 0..outer {
            let g = &ctx.grad[o * inner..(o + 1) * inner];
            for k in 0..extent {
                let dst = &mut gx[(o * extent + k) * inner..(o * extent + k + 1) * inner];
                dst.iter_mut().zip(g).for_each(|(d, g)| *d = g * self.scale);
            }
        }
        vec![Some(gx)]
    }
}

struct SoftmaxBackward {
    axis: usize,
}

impl BackwardOp for SoftmaxBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let y = ctx.output.data();
        let g = ctx.grad;
        let (outer, extent, inner) = split_axis(ctx.output.shape(), self.axis);
        let mut gx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let dot: f64 = (0..extent).map(|k| g[at(k)] * y[at(k)]).sum();
                for k in 0..extent {
                    gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl Tape {
    fn check_axis(&self, x: Var, axis: usize, name: &str) -> Result<()> {
        let rank = self.try_value(x)?.rank();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!(
                "{name}: axis {axis} out of range for rank {rank}"
            )));
        }
        Ok(())
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let [xv] = self.values([x])?;
        let y = Tensor::scalar(xv.sum());
        Ok(self.record(y, &[x], SumBackward))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.try_value(x)?.len() as f64;
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, scale: f64, name: &str) -> Result<Var> {
        self.check_axis(x, axis, name)?;
        let [xv] = self.values([x])?;
        let (outer, extent, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..extent {
                let row = &src[(o * extent + k) * inner..(o * extent + k + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
        let y = Tensor::from_parts(reduced_shape(xv.shape(), axis), out);
        Ok(self.record(y, &[x], SumAxisBackward { axis, scale }))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, 1.0, "sum_axis")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let extent = self.shape(x)[axis];
        self.reduce_axis(x, axis, 1.0 / extent as f64, "mean_axis")
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax_axis")?;
        let [xv] = self.values([x])?;
        let y = softmax_values(xv, axis);
        Ok(self.record(y, &[x], SoftmaxBackward { axis }))
    }
}

pub(crate) fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * extent + k) * inner + i;
            let max = (0..extent).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..extent {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..extent {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_of(values: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[values.len()], values.to_vec()).unwrap());
        let y = tape.softmax_axis(x, 0).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn uniform_input_gives_uniform_weights() {
        for p in softmax_of(&[0.7, 0.7, 0.7]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        assert_eq!(softmax_of(&[1000.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_along_middle_axis_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 7 + i[1] * 3 + i[2]) as f64 * 0.37));
        let y = tape.softmax_axis(x, 1).unwrap();
        let s = tape.sum_axis(y, 1).unwrap();
        assert_eq!(tape.shape(s), &[2, 4]);
        for v in tape.value(s).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_axis_of_vector_is_scalar_shaped() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.sum_axis(x, 0).unwrap();
        assert_eq!(tape.shape(s), &[1]);
        assert_eq!(tape.value(s).data(), &[6.0]);
        assert!(tape.sum_axis(x, 1).is_err());
    }
}
