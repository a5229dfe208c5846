use super::split_axis;
use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::Tensor;

struct ConcatBackward {
    axis: usize,
    extents: Vec<usize>,
}

impl BackwardOp for ConcatBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (outer, total, inner) = split_axis(ctx.output.shape(), self.axis);
        let mut start = 0;
        let mut out = Vec::with_capacity(self.extents.len());
        for (p, &extent) in self.extents.iter().enumerate() {
            if ctx.needs[p] {
                let mut g = Vec::with_capacity(outer * extent * inner);
                for o in 0..outer {
                    let from = (o * total + start) * inner;
                    g.extend_from_slice(&ctx.grad[from..from + extent * inner]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            start += extent;
        }
        out
    }
}

struct ReshapeBackward;

impl BackwardOp for ReshapeBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

/// Zero padding (`before` > 0 or `after` > 0) or cropping along one axis,
/// expressed as a window `[offset, offset + out_extent)` in padded coordinates.
struct WindowBackward {
    axis: usize,
    /// Position of input element 0 inside the output, may be negative.
    shift: isize,
}

fn window_copy(src: &[f64], src_shape: &[usize], dst_shape: &[usize], axis: usize, shift: isize) -> Vec<f64> {
    let (outer, src_extent, inner) = split_axis(src_shape, axis);
    let dst_extent = dst_shape[axis];
    let mut dst = vec![0.0; outer * dst_extent * inner];
    for o in 0..outer {
        for k in 0..src_extent {
            let t = k as isize + shift;
            if t < 0 || t >= dst_extent as isize {
                continue;
            }
            let s = (o * src_extent + k) * inner;
            let d = (o * dst_extent + t as usize) * inner;
            dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    dst
}

impl BackwardOp for WindowBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(window_copy(
            ctx.grad,
            ctx.output.shape(),
            ctx.inputs[0].shape(),
            self.axis,
            -self.shift,
        ))]
    }
}

struct UpsampleBackward {
    factor: usize,
    axes: Vec<usize>,
}

fn repeat_axis(src: &[f64], shape: &[usize], axis: usize, factor: usize) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut dst = Vec::with_capacity(src.len() * factor);
    for o in 0..outer {
        for k in 0..extent {
            let row = &src[(o * extent + k) * inner..(o * extent + k + 1) * inner];
            for _ in 0..factor {
                dst.extend_from_slice(row);
            }
        }
    }
    dst
}

fn block_sum_axis(src: &[f64], shape: &[usize], axis: usize, factor: usize) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let coarse = extent / factor;
    let mut dst = vec![0.0; outer * coarse * inner];
    for o in 0..outer {
        for k in 0..extent {
            let row = &src[(o * extent + k) * inner..(o * extent + k + 1) * inner];
            let d = (o * coarse + k / factor) * inner;
            dst[d..d + inner].iter_mut().zip(row).for_each(|(d, s)| *d += s);
        }
    }
    dst
}

impl BackwardOp for UpsampleBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let mut shape = ctx.output.shape().to_vec();
        let mut g = ctx.grad.to_vec();
        for &axis in self.axes.iter().rev() {
            g = block_sum_axis(&g, &shape, axis, self.factor);
            shape[axis] /= self.factor;
        }
        vec![Some(g)]
    }
}

impl Tape {
    /// Joins `parts` along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero parts".into()))?;
        let base = self.try_value(*first)?.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat: axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let shape = self.try_value(p)?.shape();
            if shape.len() != base.len() {
                return Err(Error::rank("concat", base.len(), shape.len()));
            }
            for (a, (&e, &b)) in shape.iter().zip(&base).enumerate() {
                if a != axis && e != b {
                    return Err(Error::shape("concat", a, b, e));
                }
            }
            extents.push(shape[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &extent) in parts.iter().zip(&extents) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * extent * inner..(o + 1) * extent * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let y = Tensor::from_parts(shape, data);
        Ok(self.record(y, parts, ConcatBackward { axis, extents }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let [xv] = self.values([x])?;
        let y = xv.reshape(shape)?;
        Ok(self.record(y, &[x], ReshapeBackward))
    }

    /// Zero-pads `axis` with `before` and `after` slots.
    pub fn pad_axis(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let [xv] = self.values([x])?;
        if axis >= xv.rank() {
            return Err(Error::InvalidArgument(format!("pad_axis: axis {axis} out of range")));
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] += before + after;
        let shift = before as isize;
        let y = Tensor::from_parts(shape.clone(), window_copy(xv.data(), xv.shape(), &shape, axis, shift));
        Ok(self.record(y, &[x], WindowBackward { axis, shift }))
    }

    /// Keeps `len` slots of `axis` starting at `start`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let [xv] = self.values([x])?;
        if axis >= xv.rank() || len == 0 || start + len > xv.shape()[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice_axis: window {start}..{} does not fit axis {axis} of shape {:?}",
                start + len,
                xv.shape()
            )));
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let shift = -(start as isize);
        let y = Tensor::from_parts(shape.clone(), window_copy(xv.data(), xv.shape(), &shape, axis, shift));
        Ok(self.record(y, &[x], WindowBackward { axis, shift }))
    }

    /// Nearest-neighbour upsampling: every listed axis grows by `factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize, axes: &[usize]) -> Result<Var> {
        let [xv] = self.values([x])?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        if let Some(&bad) = axes.iter().find(|&&a| a >= xv.rank()) {
            return Err(Error::InvalidArgument(format!("upsample: axis {bad} out of range")));
        }
        let mut shape = xv.shape().to_vec();
        let mut data = xv.data().to_vec();
        for &axis in axes {
            data = repeat_axis(&data, &shape, axis, factor);
            shape[axis] *= factor;
        }
        let y = Tensor::from_parts(shape, data);
        Ok(self.record(
            y,
            &[x],
            UpsampleBackward {
                factor,
                axes: axes.to_vec(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_single_part_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| (i[0] + 2 * i[1]) as f64));
        let y = tape.concat(&[x], 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn concat_columns_in_argument_order() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn concat_rejects_disagreeing_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 1]));
        let b = tape.constant(Tensor::zeros(&[3, 1]));
        let err = tape.concat(&[a, b], 1).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { axis: 0, .. }));
    }

    #[test]
    fn upsample_replicates_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let same = tape.upsample_nearest(x, 1, &[0, 1]).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let y = tape.upsample_nearest(x, 2, &[0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[2, 4]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn pad_then_slice_round_trips() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i[0] * 6 + i[1] * 2 + i[2]) as f64));
        let p = tape.pad_axis(x, 1, 1, 2).unwrap();
        assert_eq!(tape.shape(p), &[2, 6, 2]);
        assert_eq!(tape.value(p).get(&[0, 0, 0]), 0.0);
        assert_eq!(tape.value(p).get(&[1, 1, 1]), 7.0);
        let s = tape.slice_axis(p, 1, 1, 3).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
    }
}
