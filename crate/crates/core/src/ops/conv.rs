//! Channels-last 2D and 3D convolution.
//!
//! Both are served by one kernel over three spatial axes; a 2D convolution is
//! the 3D case with a unit depth axis.

use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    /// Zero fill of `k / 2` on each side; stride 1 preserves extents.
    #[default]
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    input: [usize; 3],
    cin: usize,
    kernel: [usize; 3],
    cout: usize,
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new(input: [usize; 3], cin: usize, kernel: [usize; 3], cout: usize, stride: [usize; 3], padding: Padding) -> Result<Self> {
        let mut pad = [0; 3];
        let mut output = [0; 3];
        for a in 0..3 {
            pad[a] = match padding {
                Padding::Same => kernel[a] / 2,
                Padding::Valid => 0,
            };
            let span = input[a] + 2 * pad[a];
            if span < kernel[a] {
                return Err(Error::shape("conv window larger than padded input", a, kernel[a], span));
            }
            output[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Ok(Geometry {
            input,
            cin,
            kernel,
            cout,
            stride,
            pad,
            output,
        })
    }

    /// Valid kernel tap range along axis `a` for output coordinate `o`.
    #[inline]
    fn taps(&self, a: usize, o: usize) -> (usize, usize, usize) {
        let origin = (o * self.stride[a]) as isize - self.pad[a] as isize;
        let lo = (-origin).max(0) as usize;
        let hi = (self.input[a] as isize - origin).clamp(0, self.kernel[a] as isize) as usize;
        (lo, hi.max(lo), origin.max(0) as usize)
    }

    fn rows(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    /// Gathers input patches for output rows `r0..r1` into `cols`, one row of
    /// `kh·kw·kd·cin` values per output voxel, in kernel memory order.
    fn im2col(&self, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
        let [_, iw, id] = self.input;
        let [_, kw, kd] = self.kernel;
        let [_, ow, od] = self.output;
        let cin = self.cin;
        let k = self.patch_len();
        cols[..(r1 - r0) * k].iter_mut().for_each(|v| *v = 0.0);
        for r in r0..r1 {
            let (oy, ox, oz) = (r / (ow * od), (r / od) % ow, r % od);
            let (ky0, ky1, iy0) = self.taps(0, oy);
            let (kx0, kx1, ix0) = self.taps(1, ox);
            let (kz0, kz1, iz0) = self.taps(2, oz);
            let run = (kz1 - kz0) * cin;
            let row = &mut cols[(r - r0) * k..(r - r0 + 1) * k];
            for ky in ky0..ky1 {
                let iy = iy0 + ky - ky0;
                for kx in kx0..kx1 {
                    let ix = ix0 + kx - kx0;
                    let xi = ((iy * iw + ix) * id + iz0) * cin;
                    let ci = ((ky * kw + kx) * kd + kz0) * cin;
                    row[ci..ci + run].copy_from_slice(&x[xi..xi + run]);
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto the input; transpose of `im2col`.
    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, gx: &mut [f64]) {
        let [_, iw, id] = self.input;
        let [_, kw, kd] = self.kernel;
        let [_, ow, od] = self.output;
        let cin = self.cin;
        let k = self.patch_len();
        for r in r0..r1 {
            let (oy, ox, oz) = (r / (ow * od), (r / od) % ow, r % od);
            let (ky0, ky1, iy0) = self.taps(0, oy);
            let (kx0, kx1, ix0) = self.taps(1, ox);
            let (kz0, kz1, iz0) = self.taps(2, oz);
            let run = (kz1 - kz0) * cin;
            let row = &cols[(r - r0) * k..(r - r0 + 1) * k];
            for ky in ky0..ky1 {
                let iy = iy0 + ky - ky0;
                for kx in kx0..kx1 {
                    let ix = ix0 + kx - kx0;
                    let xi = ((iy * iw + ix) * id + iz0) * cin;
                    let ci = ((ky * kw + kx) * kd + kz0) * cin;
                    gx[xi..xi + run]
                        .iter_mut()
                        .zip(&row[ci..ci + run])
                        .for_each(|(g, c)| *g += c);
                }
            }
        }
    }

    fn chunk_rows(&self) -> usize {
        (CHUNK_VALUES / self.patch_len()).max(1)
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.rows(), self.patch_len(), self.cout);
        let mut out = vec![0.0; m * n];
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(b);
        }
        let chunk = self.chunk_rows();
        let mut cols = vec![0.0; chunk.min(m) * k];
        for r0 in (0..m).step_by(chunk) {
            let r1 = (r0 + chunk).min(m);
            self.im2col(x, r0, r1, &mut cols);
            gemm(r1 - r0, k, n, &cols, false, w, false, &mut out[r0 * n..r1 * n], 1.0);
        }
        out
    }

    fn backward(&self, x: &[f64], w: &[f64], g: &[f64], need_x: bool, need_w: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (m, k, n) = (self.rows(), self.patch_len(), self.cout);
        let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; w.len()] } else { Vec::new() };
        let mut gb = vec![0.0; n];
        for row in g.chunks_exact(n) {
            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let chunk = self.chunk_rows();
        let mut cols = vec![0.0; chunk.min(m) * k];
        for r0 in (0..m).step_by(chunk) {
            let r1 = (r0 + chunk).min(m);
            let rows = r1 - r0;
            let gs = &g[r0 * n..r1 * n];
            if need_w {
                self.im2col(x, r0, r1, &mut cols);
                // gw (k×n) += colsᵀ (k×rows) · g (rows×n)
                gemm(k, rows, n, &cols[..rows * k], true, gs, false, &mut gw, 1.0);
            }
            if need_x {
                let dcols = &mut cols[..rows * k];
                dcols.iter_mut().for_each(|v| *v = 0.0);
                // dcols (rows×k) = g (rows×n) · wᵀ (n×k)
                gemm(rows, n, k, gs, false, w, true, dcols, 1.0);
                self.col2im(dcols, r0, r1, &mut gx);
            }
        }
        (gx, gw, gb)
    }
}

/// Patch buffer size per chunk, in values.
const CHUNK_VALUES: usize = 1 << 19;

/// `c (m×n) += alpha · op(a) (m×k) · op(b) (k×n)` on row-major storage, where
/// `op` optionally transposes the stored matrix.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], alpha: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe matrices that lie within the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvBackward {
    geometry: Geometry,
}

impl BackwardOp for ConvBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (gx, gw, gb) = self.geometry.backward(
            ctx.inputs[0].data(),
            ctx.inputs[1].data(),
            ctx.grad,
            ctx.needs[0],
            ctx.needs[1],
        );
        vec![
            ctx.needs[0].then_some(gx),
            ctx.needs[1].then_some(gw),
            ctx.needs[2].then_some(gb),
        ]
    }
}

fn expect_rank(name: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::rank(name, rank, t.rank()));
    }
    Ok(())
}

fn check_kernel(name: &str, kernel: &[usize], spatial: usize, cin: usize, bias: &Tensor) -> Result<usize> {
    let k = kernel[0];
    for a in 0..spatial {
        if kernel[a] != k {
            return Err(Error::shape(format!("{name} kernel must be cubic"), a, k, kernel[a]));
        }
    }
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("{name}: kernel size {k} must be odd")));
    }
    if kernel[spatial] != cin {
        return Err(Error::shape(
            format!("{name} kernel input channels vs input axis {spatial}"),
            spatial,
            cin,
            kernel[spatial],
        ));
    }
    let cout = kernel[spatial + 1];
    if bias.shape() != [cout] {
        return Err(Error::shape(format!("{name} bias vs kernel output channels"), 0, cout, bias.shape()[0]));
    }
    Ok(k)
}

impl Tape {
    /// `input` is `H×W×Cin`, `kernel` is `k×k×Cin×Cout`, `bias` is `Cout`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let [x, w, b] = self.values([input, kernel, bias])?;
        expect_rank("conv2d input", x, 3)?;
        expect_rank("conv2d kernel", w, 4)?;
        let s = x.shape();
        let k = check_kernel("conv2d", w.shape(), 2, s[2], b)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let cout = w.shape()[3];
        let geometry = Geometry::new([s[0], s[1], 1], s[2], [k, k, 1], cout, [stride, stride, 1], padding)?;
        let y = Tensor::from_parts(
            vec![geometry.output[0], geometry.output[1], cout],
            geometry.forward(x.data(), w.data(), b.data()),
        );
        Ok(self.record(y, &[input, kernel, bias], ConvBackward { geometry }))
    }

    /// `input` is `H×W×D×Cin`, `kernel` is `k×k×k×Cin×Cout`, `bias` is `Cout`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let [x, w, b] = self.values([input, kernel, bias])?;
        expect_rank("conv3d input", x, 4)?;
        expect_rank("conv3d kernel", w, 5)?;
        let s = x.shape();
        let k = check_kernel("conv3d", w.shape(), 3, s[3], b)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv3d stride must be >= 1".into()));
        }
        let cout = w.shape()[4];
        let geometry = Geometry::new([s[0], s[1], s[2]], s[3], [k, k, k], cout, [stride; 3], padding)?;
        let y = Tensor::from_parts(
            vec![geometry.output[0], geometry.output[1], geometry.output[2], cout],
            geometry.forward(x.data(), w.data(), b.data()),
        );
        Ok(self.record(y, &[input, kernel, bias], ConvBackward { geometry }))
    }
}
