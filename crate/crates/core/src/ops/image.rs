use super::split_axis;
use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::Tensor;

/// Mean over the 3×3 neighbourhood on axes 0 and 1, with the window clipped to
/// the image; trailing axes are filtered independently.
fn box3(src: &[f64], shape: &[usize]) -> Vec<f64> {
    let (h, w) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out = vec![0.0; src.len()];
    for v in 0..h {
        let (v0, v1) = (v.saturating_sub(1), (v + 2).min(h));
        for u in 0..w {
            let (u0, u1) = (u.saturating_sub(1), (u + 2).min(w));
            let inv = 1.0 / ((v1 - v0) * (u1 - u0)) as f64;
            let dst = (v * w + u) * inner;
            for vv in v0..v1 {
                for uu in u0..u1 {
                    let s = (vv * w + uu) * inner;
                    for c in 0..inner {
                        out[dst + c] += src[s + c];
                    }
                }
            }
            out[dst..dst + inner].iter_mut().for_each(|x| *x *= inv);
        }
    }
    out
}

/// Transpose of [`box3`].
fn box3_transpose(g: &[f64], shape: &[usize]) -> Vec<f64> {
    let (h, w) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out = vec![0.0; g.len()];
    for v in 0..h {
        let (v0, v1) = (v.saturating_sub(1), (v + 2).min(h));
        for u in 0..w {
            let (u0, u1) = (u.saturating_sub(1), (u + 2).min(w));
            let inv = 1.0 / ((v1 - v0) * (u1 - u0)) as f64;
            let src = (v * w + u) * inner;
            for vv in v0..v1 {
                for uu in u0..u1 {
                    let d = (vv * w + uu) * inner;
                    for c in 0..inner {
                        out[d + c] += g[src + c] * inv;
                    }
                }
            }
        }
    }
    out
}

struct BoxBackward;

impl BackwardOp for BoxBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(box3_transpose(ctx.grad, ctx.output.shape()))]
    }
}

#[derive(Clone, Copy)]
enum Stencil {
    /// `x[k+1] - x[k]`, zero at the last slot.
    Forward,
    /// `x[k-1] - 2 x[k] + x[k+1]`, zero at both ends.
    Second,
}

fn stencil_apply(src: &[f64], shape: &[usize], axis: usize, stencil: Stencil, transpose: bool) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; src.len()];
    let at = |o: usize, k: usize, i: usize| (o * n + k) * inner + i;
    for o in 0..outer {
        for i in 0..inner {
            match stencil {
                Stencil::Forward => {
                    for k in 0..n.saturating_sub(1) {
                        if transpose {
                            let g = src[at(o, k, i)];
                            out[at(o, k + 1, i)] += g;
                            out[at(o, k, i)] -= g;
                        } else {
                            out[at(o, k, i)] = src[at(o, k + 1, i)] - src[at(o, k, i)];
                        }
                    }
                }
                Stencil::Second => {
                    for k in 1..n.saturating_sub(1) {
                        if transpose {
                            let g = src[at(o, k, i)];
                            out[at(o, k - 1, i)] += g;
                            out[at(o, k, i)] -= 2.0 * g;
                            out[at(o, k + 1, i)] += g;
                        } else {
                            out[at(o, k, i)] =
                                src[at(o, k - 1, i)] - 2.0 * src[at(o, k, i)] + src[at(o, k + 1, i)];
                        }
                    }
                }
            }
        }
    }
    out
}

struct StencilBackward {
    axis: usize,
    stencil: Stencil,
}

impl BackwardOp for StencilBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(stencil_apply(
            ctx.grad,
            ctx.output.shape(),
            self.axis,
            self.stencil,
            true,
        ))]
    }
}

impl Tape {
    /// 3×3 mean filter over the two leading axes.
    pub fn box_filter3(&mut self, x: Var) -> Result<Var> {
        let [xv] = self.values([x])?;
        if xv.rank() < 2 {
            return Err(Error::rank("box_filter3", 2, xv.rank()));
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), box3(xv.data(), xv.shape()));
        Ok(self.record(y, &[x], BoxBackward))
    }

    fn stencil(&mut self, x: Var, axis: usize, stencil: Stencil) -> Result<Var> {
        let [xv] = self.values([x])?;
        if axis >= xv.rank() {
            return Err(Error::InvalidArgument(format!("difference axis {axis} out of range")));
        }
        let y = Tensor::from_parts(
            xv.shape().to_vec(),
            stencil_apply(xv.data(), xv.shape(), axis, stencil, false),
        );
        Ok(self.record(y, &[x], StencilBackward { axis, stencil }))
    }

    /// Forward difference along `axis`; the last slot is zero.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.stencil(x, axis, Stencil::Forward)
    }

    /// Second difference `[1, -2, 1]` along `axis`; border slots are zero.
    pub fn second_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.stencil(x, axis, Stencil::Second)
    }
}

/// Plain-value second difference, for untracked image weights.
pub(crate) fn second_diff_values(x: &Tensor, axis: usize) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        stencil_apply(x.data(), x.shape(), axis, Stencil::Second, false),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_filter_of_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 5, 2], 0.3));
        let y = tape.box_filter3(x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn differences_of_a_ramp() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4], |i| (i[1] * i[1]) as f64));
        let f = tape.forward_diff(x, 1).unwrap();
        assert_eq!(&tape.value(f).data()[..4], &[1.0, 3.0, 5.0, 0.0]);
        let s = tape.second_diff(x, 1).unwrap();
        assert_eq!(&tape.value(s).data()[..4], &[0.0, 2.0, 2.0, 0.0]);
    }
}
