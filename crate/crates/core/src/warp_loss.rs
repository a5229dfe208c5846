//! Photometric self-supervision: horizontal warping, SSIM, the data term and
//! the edge-aware second-order smoothness term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_volume::Direction;
use crate::ops::image::second_diff_values;
use crate::stereo_io::StereoFrame;
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::{check_same_shape, Tensor};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mu: 0.05,
            lambda1: 0.8,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.lambda1, self.lambda2];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

/// Scalar summary of one loss evaluation. The three data components are
/// already weighted and normalized, so they add up to `data_term`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub data_term: f64,
    pub reg_term: f64,
    pub ssim_component: f64,
    pub l1_component: f64,
    pub gradient_component: f64,
    pub valid_pixel_count: usize,
    /// Set when no pixel survived the warp mask; the data term is then 0.
    pub empty_mask: bool,
}

/// Differentiable loss together with its breakdown.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    x0: usize,
    x1: usize,
    frac: f64,
}

struct WarpBackward {
    samples: Vec<Option<Sample>>,
    sign: f64,
    width: usize,
    channels: usize,
}

impl BackwardOp for WarpBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let src = ctx.inputs[0].data();
        let (w, c) = (self.width, self.channels);
        let mut gs = ctx.needs[0].then(|| vec![0.0; src.len()]);
        let mut gd = ctx.needs[1].then(|| vec![0.0; self.samples.len()]);
        for (p, s) in self.samples.iter().enumerate() {
            let Some(s) = s else { continue };
            let row = p / w * w;
            let (a, b) = ((row + s.x0) * c, (row + s.x1) * c);
            for ch in 0..c {
                let g = ctx.grad[p * c + ch];
                if let Some(gs) = gs.as_mut() {
                    gs[a + ch] += g * (1.0 - s.frac);
                    gs[b + ch] += g * s.frac;
                }
                if let Some(gd) = gd.as_mut() {
                    gd[p] += g * self.sign * (src[b + ch] - src[a + ch]);
                }
            }
        }
        vec![gs, gd]
    }
}

impl Tape {
    /// Samples `source` at column `u - d` ([`Direction::LeftToRight`]) or
    /// `u + d` ([`Direction::RightToLeft`]) with linear interpolation.
    /// Samples outside `[0, W-1]` are zero and marked 0 in the returned mask.
    pub fn warp_horizontal(&mut self, source: Var, disparity: Var, direction: Direction) -> Result<(Var, Tensor)> {
        let [sv, dv] = self.values([source, disparity])?;
        if sv.rank() != 3 {
            return Err(Error::rank("warp source", 3, sv.rank()));
        }
        if dv.rank() != 2 {
            return Err(Error::rank("warp disparity", 2, dv.rank()));
        }
        check_same_shape("warp disparity", &sv.shape()[..2], dv.shape())?;
        let (h, w, c) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
        let sign = match direction {
            Direction::LeftToRight => -1.0,
            Direction::RightToLeft => 1.0,
        };
        let src = sv.data();
        let mut out = vec![0.0; src.len()];
        let mut mask = vec![0.0; h * w];
        let mut samples = Vec::with_capacity(h * w);
        for (p, &d) in dv.data().iter().enumerate() {
            let x = (p % w) as f64 + sign * d;
            if !(x >= 0.0 && x <= (w - 1) as f64) {
                samples.push(None);
                continue;
            }
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let frac = x - x0 as f64;
            let row = p / w * w;
            for ch in 0..c {
                out[p * c + ch] = (1.0 - frac) * src[(row + x0) * c + ch] + frac * src[(row + x1) * c + ch];
            }
            mask[p] = 1.0;
            samples.push(Some(Sample { x0, x1, frac }));
        }
        let warped = Tensor::from_parts(sv.shape().to_vec(), out);
        let mask = Tensor::from_parts(vec![h, w], mask);
        let op = WarpBackward {
            samples,
            sign,
            width: w,
            channels: c,
        };
        Ok((self.record(warped, &[source, disparity], op), mask))
    }
}

/// Free-function form of [`Tape::warp_horizontal`].
pub fn warp_horizontal(tape: &mut Tape, source: Var, disparity: Var, direction: Direction) -> Result<(Var, Tensor)> {
    tape.warp_horizontal(source, disparity, direction)
}

/// Windowed SSIM (3×3 mean filters) averaged over channels, clipped to [-1, 1].
pub fn ssim_map(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let [av, bv] = tape.values([a, b])?;
    if av.rank() != 3 {
        return Err(Error::rank("ssim input", 3, av.rank()));
    }
    check_same_shape("ssim", av.shape(), bv.shape())?;

    let mu_a = tape.box_filter3(a)?;
    let mu_b = tape.box_filter3(b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.box_filter3(aa)?;
    let e_bb = tape.box_filter3(bb)?;
    let e_ab = tape.box_filter3(ab)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.mul_scalar(mu_ab, 2.0)?;
    let l_num = tape.add_scalar(l_num, SSIM_C1)?;
    let c_num = tape.mul_scalar(cov, 2.0)?;
    let c_num = tape.add_scalar(c_num, SSIM_C2)?;
    let l_den = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_scalar(l_den, SSIM_C1)?;
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(c_den, SSIM_C2)?;
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    let s = tape.div(num, den)?;
    let s = tape.clamp(s, -1.0, 1.0)?;
    tape.mean_axis(s, 2)
}

/// Weighted, normalized data term and its parts.
#[derive(Clone, Copy, Debug)]
pub struct DataTerm {
    pub value: Var,
    pub ssim_component: f64,
    pub l1_component: f64,
    pub gradient_component: f64,
    pub valid_pixel_count: usize,
    pub empty_mask: bool,
}

fn masked_sum(tape: &mut Tape, per_pixel: Var, mask: &Tensor) -> Result<Var> {
    let m = tape.constant(mask.clone());
    let x = tape.mul(per_pixel, m)?;
    tape.sum(x)
}

/// `sum_valid(λ1 (1 - SSIM)/2 + λ2 (|I - I'| + |∇I - ∇I'|)) / N` with
/// channel means per pixel and forward differences along both image axes.
/// Invalid reconstruction pixels are replaced by the image before any window
/// or difference is taken, so valid pixels never see the zero fill.
/// A gradient pair counts only when both of its pixels are valid.
pub fn data_loss(tape: &mut Tape, image: Var, reconstruction: Var, mask: &Tensor, weights: &LossWeights) -> Result<DataTerm> {
    let [iv, rv] = tape.values([image, reconstruction])?;
    if iv.rank() != 3 {
        return Err(Error::rank("data_loss image", 3, iv.rank()));
    }
    check_same_shape("data_loss", iv.shape(), rv.shape())?;
    check_same_shape("data_loss mask", &iv.shape()[..2], mask.shape())?;
    let (h, w) = (iv.shape()[0], iv.shape()[1]);

    let n = mask.data().iter().filter(|&&m| m > 0.0).count();
    if n == 0 {
        return Ok(DataTerm {
            value: tape.constant(Tensor::scalar(0.0)),
            ssim_component: 0.0,
            l1_component: 0.0,
            gradient_component: 0.0,
            valid_pixel_count: 0,
            empty_mask: true,
        });
    }
    let inv_n = 1.0 / n as f64;

    let keep = Tensor::from_fn(iv.shape(), |i| mask.get(&i[..2]));
    let fill = keep.map(|m| 1.0 - m);
    let keep = tape.constant(keep);
    let fill = tape.constant(fill);
    let kept = tape.mul(reconstruction, keep)?;
    let filled = tape.mul(image, fill)?;
    let reconstruction = tape.add(kept, filled)?;

    let s = ssim_map(tape, image, reconstruction)?;
    let dissim = tape.neg(s)?;
    let dissim = tape.add_scalar(dissim, 1.0)?;
    let ssim_sum = masked_sum(tape, dissim, mask)?;
    let ssim_term = tape.mul_scalar(ssim_sum, 0.5 * weights.lambda1 * inv_n)?;

    let diff = tape.sub(image, reconstruction)?;
    let abs = tape.abs(diff)?;
    let abs = tape.mean_axis(abs, 2)?;
    let l1_sum = masked_sum(tape, abs, mask)?;
    let l1_term = tape.mul_scalar(l1_sum, weights.lambda2 * inv_n)?;

    let mut grad_term = tape.constant(Tensor::scalar(0.0));
    for axis in 0..2 {
        let pair = Tensor::from_fn(&[h, w], |i| {
            let (v, u) = (i[0], i[1]);
            let (nv, nu) = if axis == 0 { (v + 1, u) } else { (v, u + 1) };
            if nv < h && nu < w {
                mask.get(&[v, u]) * mask.get(&[nv, nu])
            } else {
                0.0
            }
        });
        let g = tape.forward_diff(diff, axis)?;
        let g = tape.abs(g)?;
        let g = tape.mean_axis(g, 2)?;
        let g = masked_sum(tape, g, &pair)?;
        grad_term = tape.add(grad_term, g)?;
    }
    let grad_term = tape.mul_scalar(grad_term, weights.lambda2 * inv_n)?;

    let value = tape.add(ssim_term, l1_term)?;
    let value = tape.add(value, grad_term)?;
    Ok(DataTerm {
        value,
        ssim_component: tape.value(ssim_term).data()[0],
        l1_component: tape.value(l1_term).data()[0],
        gradient_component: tape.value(grad_term).data()[0],
        valid_pixel_count: n,
        empty_mask: false,
    })
}

/// `sum(e^{-|∇²_u I|} |∇²_u d| + e^{-|∇²_v I|} |∇²_v d|) / normalizer`, with
/// the image taken as its channel mean. Border second differences are zero.
pub fn smoothness_loss(tape: &mut Tape, disparity: Var, image: &Tensor, normalizer: f64) -> Result<Var> {
    let dv = tape.try_value(disparity)?;
    if dv.rank() != 2 {
        return Err(Error::rank("smoothness disparity", 2, dv.rank()));
    }
    if image.rank() != 3 {
        return Err(Error::rank("smoothness image", 3, image.rank()));
    }
    check_same_shape("smoothness image", dv.shape(), &image.shape()[..2])?;
    if !(normalizer > 0.0) {
        return Err(Error::InvalidArgument(format!("smoothness normalizer must be positive, got {normalizer}")));
    }
    let c = image.shape()[2];
    let gray = Tensor::from_fn(dv.shape(), |i| (0..c).map(|ch| image.get(&[i[0], i[1], ch])).sum::<f64>() / c as f64);

    let mut total = tape.constant(Tensor::scalar(0.0));
    for axis in [1, 0] {
        let weight = second_diff_values(&gray, axis).map(|x| (-x.abs()).exp());
        let d2 = tape.second_diff(disparity, axis)?;
        let d2 = tape.abs(d2)?;
        let term = masked_sum(tape, d2, &weight)?;
        total = tape.add(total, term)?;
    }
    tape.mul_scalar(total, 1.0 / normalizer)
}

/// Loss for a left-reference disparity: the right view is warped to the left
/// view, and the smoothness term shares the data term's normalizer N (all
/// pixels when the warp mask is empty).
pub fn total_loss(tape: &mut Tape, frame: &StereoFrame, disparity: Var, weights: &LossWeights) -> Result<LossOutput> {
    total_loss_views(tape, &frame.left, &frame.right, disparity, Direction::LeftToRight, weights)
}

/// [`total_loss`] for an explicit reference/other pair and sampling direction.
pub fn total_loss_views(
    tape: &mut Tape,
    reference: &Tensor,
    other: &Tensor,
    disparity: Var,
    direction: Direction,
    weights: &LossWeights,
) -> Result<LossOutput> {
    weights.validate()?;
    check_same_shape("stereo views", reference.shape(), other.shape())?;
    let image = tape.constant(reference.clone());
    let source = tape.constant(other.clone());
    let (recon, mask) = tape.warp_horizontal(source, disparity, direction)?;
    let data = data_loss(tape, image, recon, &mask, weights)?;
    let normalizer = if data.empty_mask { mask.len() } else { data.valid_pixel_count } as f64;
    let reg = smoothness_loss(tape, disparity, reference, normalizer)?;
    let weighted_reg = tape.mul_scalar(reg, weights.mu)?;
    let loss = tape.add(data.value, weighted_reg)?;

    let data_term = tape.value(data.value).data()[0];
    let reg_term = tape.value(reg).data()[0];
    Ok(LossOutput {
        loss,
        breakdown: LossBreakdown {
            total: tape.value(loss).data()[0],
            data_term,
            reg_term,
            ssim_component: data.ssim_component,
            l1_component: data.l1_component,
            gradient_component: data.gradient_component,
            valid_pixel_count: data.valid_pixel_count,
            empty_mask: data.empty_mask,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize) -> Tensor {
        Tensor::from_fn(&[1, w, 1], |i| i[1] as f64)
    }

    fn warp(src: &Tensor, d: f64, dir: Direction) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let s = tape.constant(src.clone());
        let dv = tape.constant(Tensor::full(&src.shape()[..2], d));
        let (out, mask) = tape.warp_horizontal(s, dv, dir).unwrap();
        (tape.value(out).clone(), mask)
    }

    #[test]
    fn zero_disparity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src = Tensor::rand_uniform(&[3, 5, 2], 0.0, 1.0, &mut rng);
        let (out, mask) = warp(&src, 0.0, Direction::LeftToRight);
        assert_eq!(out, src);
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn integer_shift_on_ramp() {
        let (out, mask) = warp(&ramp(4), 1.0, Direction::RightToLeft);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 0.0]);
        assert_eq!(mask.data(), &[1.0, 1.0, 1.0, 0.0]);
        let (out, mask) = warp(&ramp(4), 1.0, Direction::LeftToRight);
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(mask.data(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_pixel_interpolates() {
        let (out, mask) = warp(&ramp(4), 0.5, Direction::RightToLeft);
        assert_eq!(&out.data()[..3], &[0.5, 1.5, 2.5]);
        assert_eq!(mask.data()[3], 0.0);
    }

    fn ssim_of(a: &Tensor, b: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let s = ssim_map(&mut tape, av, bv).unwrap();
        tape.value(s).clone()
    }

    #[test]
    fn ssim_self_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::rand_uniform(&[4, 4, 1], 0.0, 1.0, &mut rng);
        assert!(ssim_of(&a, &a).data().iter().all(|&s| (s - 1.0).abs() < 1e-12));
        let flat = Tensor::full(&[3, 3, 1], 0.2);
        let bright = Tensor::full(&[3, 3, 1], 0.7);
        assert!(ssim_of(&flat, &bright).data().iter().all(|&s| s < 1.0));
    }

    /// Direct SSIM evaluation from window sums, independent of the tape ops.
    fn ssim_direct(a: &Tensor, b: &Tensor, v: usize, u: usize) -> f64 {
        let (h, w) = (a.shape()[0] as isize, a.shape()[1] as isize);
        let mut xs = Vec::new();
        for dv in -1isize..=1 {
            for du in -1isize..=1 {
                let (y, x) = (v as isize + dv, u as isize + du);
                if y >= 0 && y < h && x >= 0 && x < w {
                    xs.push((a.get(&[y as usize, x as usize, 0]), b.get(&[y as usize, x as usize, 0])));
                }
            }
        }
        let n = xs.len() as f64;
        let ma = xs.iter().map(|p| p.0).sum::<f64>() / n;
        let mb = xs.iter().map(|p| p.1).sum::<f64>() / n;
        let va = xs.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
        let vb = xs.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
        let cab = xs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
        ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::rand_uniform(&[5, 5, 1], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[5, 5, 1], 0.0, 1.0, &mut rng);
        let s = ssim_of(&a, &b);
        for v in 0..5 {
            for u in 0..5 {
                assert!((s.get(&[v, u]) - ssim_direct(&a, &b, v, u)).abs() < 1e-10);
            }
        }
    }

    fn data_value(img: &Tensor, rec: &Tensor, mask: &Tensor, weights: &LossWeights) -> DataTerm {
        let mut tape = Tape::new();
        let (i, r) = (tape.constant(img.clone()), tape.constant(rec.clone()));
        let out = data_loss(&mut tape, i, r, mask, weights).unwrap();
        let v = tape.value(out.value).data()[0];
        assert!((v - out.ssim_component - out.l1_component - out.gradient_component).abs() < 1e-14);
        out
    }

    fn data_scalar(img: &Tensor, rec: &Tensor, mask: &Tensor, weights: &LossWeights) -> f64 {
        let t = data_value(img, rec, mask, weights);
        t.ssim_component + t.l1_component + t.gradient_component
    }

    #[test]
    fn data_loss_vanishes_on_exact_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::rand_uniform(&[4, 6, 1], 0.0, 1.0, &mut rng);
        let mask = Tensor::ones(&[4, 6]);
        assert!(data_scalar(&a, &a, &mask, &LossWeights::default()).abs() < 1e-14);
    }

    #[test]
    fn data_loss_constant_offset() {
        let a = Tensor::full(&[3, 4, 1], 0.3);
        let b = Tensor::full(&[3, 4, 1], 0.4);
        let w = LossWeights {
            mu: 0.0,
            lambda1: 0.0,
            lambda2: 1.0,
        };
        let v = data_scalar(&a, &b, &Tensor::ones(&[3, 4]), &w);
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn data_loss_crafted_pair() {
        let img = Tensor::new(&[2, 2, 1], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let rec = Tensor::new(&[2, 2, 1], vec![0.2, 0.5, 0.6, 0.6]).unwrap();
        let mask = Tensor::ones(&[2, 2]);
        let w = LossWeights::default();
        // On a 2×2 image every clipped window covers all four pixels.
        let (a, b) = ([0.2, 0.4, 0.6, 0.8], [0.2, 0.5, 0.6, 0.6]);
        let ma = a.iter().sum::<f64>() / 4.0;
        let mb = b.iter().sum::<f64>() / 4.0;
        let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / 4.0;
        let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / 4.0;
        let cab = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 4.0;
        let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        let ssim = 4.0 * w.lambda1 * (1.0 - s) / 2.0;
        let l1 = w.lambda2 * (0.0 + 0.1 + 0.0 + 0.2);
        // e = img - rec = [0, -0.1, 0, 0.2]; horizontal pairs (0,1),(2,3); vertical (0,2),(1,3)
        let grad = w.lambda2 * (0.1 + 0.2 + 0.0 + 0.3);
        let expected = (ssim + l1 + grad) / 4.0;
        assert!((data_scalar(&img, &rec, &mask, &w) - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_flagged_zero() {
        let a = Tensor::full(&[2, 2, 1], 0.3);
        let t = data_value(&a, &a.map(|x| x + 0.5), &Tensor::zeros(&[2, 2]), &LossWeights::default());
        assert!(t.empty_mask);
        assert_eq!(t.valid_pixel_count, 0);
    }

    fn smooth(d: &Tensor, img: &Tensor, n: f64) -> f64 {
        let mut tape = Tape::new();
        let dv = tape.constant(d.clone());
        let s = smoothness_loss(&mut tape, dv, img, n).unwrap();
        tape.value(s).data()[0]
    }

    #[test]
    fn smoothness_ignores_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::rand_uniform(&[5, 6, 1], 0.0, 1.0, &mut rng);
        let exact = Tensor::from_fn(&[5, 6], |i| 0.75 * i[1] as f64 - 0.25 * i[0] as f64 + 2.0);
        assert_eq!(smooth(&exact, &img, 30.0), 0.0);
        let rounded = Tensor::from_fn(&[5, 6], |i| 0.7 * i[1] as f64 - 0.3 * i[0] as f64 + 2.1);
        assert!(smooth(&rounded, &img, 30.0) < 1e-14);
    }

    #[test]
    fn smoothness_hand_values() {
        let d = Tensor::new(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        assert!((smooth(&d, &Tensor::full(&[1, 3, 1], 0.5), 1.0) - 1.0).abs() < 1e-15);
        let edge = Tensor::new(&[1, 3, 1], vec![0.0, 0.0, 10.0]).unwrap();
        let v = smooth(&d, &edge, 1.0);
        assert!((v - (-10f64).exp()).abs() < 1e-15);
        assert!((v - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn total_is_data_plus_weighted_reg() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mu in [0.0, 0.05, 0.7] {
            let frame = StereoFrame::new(
                Tensor::rand_uniform(&[4, 8, 1], 0.0, 1.0, &mut rng),
                Tensor::rand_uniform(&[4, 8, 1], 0.0, 1.0, &mut rng),
                0,
            )
            .unwrap();
            let mut tape = Tape::new();
            let d = tape.constant(Tensor::rand_uniform(&[4, 8], 0.0, 3.0, &mut rng));
            let w = LossWeights { mu, ..LossWeights::default() };
            let b = total_loss(&mut tape, &frame, d, &w).unwrap().breakdown;
            assert!((b.total - (b.data_term + mu * b.reg_term)).abs() < 1e-12);
            assert!((b.data_term - b.ssim_component - b.l1_component - b.gradient_component).abs() < 1e-12);
            assert!(b.total >= 0.0);
            if mu == 0.0 {
                assert_eq!(b.total, b.data_term);
            }
        }
    }

    #[test]
    fn ground_truth_has_no_data_cost() {
        use crate::stereo_io::{gen_rds_sequence, RdsConfig};
        for d in [0.0, 3.0, 7.0] {
            let frame = gen_rds_sequence(RdsConfig::constant(16, 40, d, 5), 1).unwrap().frame(0);
            let mut tape = Tape::new();
            let gt = tape.constant(frame.gt_disparity.clone().unwrap());
            let out = total_loss(&mut tape, &frame, gt, &LossWeights::default()).unwrap();
            assert!(out.breakdown.data_term < 1e-6, "d = {d}: {:?}", out.breakdown);
        }
    }
}
