//! Feature volume over candidate disparities.
//!
//! Slot `(v, u, d)` pairs the reference feature at `(v, u)` with the opposite
//! view's feature at `(v, u - d)` (left reference) or `(v, u + d)` (right
//! reference). Samples falling outside the image are zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::{check_same_shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Left reference; left pixel `u` matches right pixel `u - d`.
    #[default]
    LeftToRight,
    /// Right reference; right pixel `u` matches left pixel `u + d`.
    RightToLeft,
}

impl Direction {
    fn offset(self, u: usize, d: usize, width: usize) -> Option<usize> {
        match self {
            Direction::LeftToRight => u.checked_sub(d),
            Direction::RightToLeft => Some(u + d).filter(|&x| x < width),
        }
    }
}

/// `H×W×(D+1)×2F` volume: reference channels first, shifted opposite channels
/// last.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVolume {
    pub data: Var,
    pub direction: Direction,
    pub max_disparity: usize,
}

struct VolumeBackward {
    max_disparity: usize,
    direction: Direction,
}

impl BackwardOp for VolumeBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let s = ctx.inputs[0].shape();
        let (h, w, f) = (s[0], s[1], s[2]);
        let slots = self.max_disparity + 1;
        let mut g_ref = vec![0.0; h * w * f];
        let mut g_other = vec![0.0; h * w * f];
        for v in 0..h {
            for u in 0..w {
                let r = (v * w + u) * f;
                for d in 0..slots {
                    let o = ((v * w + u) * slots + d) * 2 * f;
                    let g = &ctx.grad[o..o + 2 * f];
                    g_ref[r..r + f].iter_mut().zip(&g[..f]).for_each(|(a, b)| *a += b);
                    if let Some(x) = self.direction.offset(u, d, w) {
                        let t = (v * w + x) * f;
                        g_other[t..t + f].iter_mut().zip(&g[f..]).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        vec![ctx.needs[0].then_some(g_ref), ctx.needs[1].then_some(g_other)]
    }
}

/// Builds the volume from `H×W×F` reference and opposite-view features.
pub fn build_volume(
    tape: &mut Tape,
    reference: Var,
    other: Var,
    max_disparity: usize,
    direction: Direction,
) -> Result<FeatureVolume> {
    let [rv, ov] = tape.values([reference, other])?;
    if rv.rank() != 3 {
        return Err(Error::rank("feature volume input", 3, rv.rank()));
    }
    check_same_shape("feature volume inputs", rv.shape(), ov.shape())?;
    let (h, w, f) = (rv.shape()[0], rv.shape()[1], rv.shape()[2]);
    if max_disparity >= w {
        return Err(Error::InvalidArgument(format!(
            "disparity range {max_disparity} must be below the image width {w}"
        )));
    }
    let slots = max_disparity + 1;
    let (rd, od) = (rv.data(), ov.data());
    let mut data = vec![0.0; h * w * slots * 2 * f];
    for v in 0..h {
        for u in 0..w {
            let r = (v * w + u) * f;
            for d in 0..slots {
                let o = ((v * w + u) * slots + d) * 2 * f;
                data[o..o + f].copy_from_slice(&rd[r..r + f]);
                if let Some(x) = direction.offset(u, d, w) {
                    let t = (v * w + x) * f;
                    data[o + f..o + 2 * f].copy_from_slice(&od[t..t + f]);
                }
            }
        }
    }
    let value = Tensor::from_parts(vec![h, w, slots, 2 * f], data);
    let var = tape.record(
        value,
        &[reference, other],
        VolumeBackward {
            max_disparity,
            direction,
        },
    );
    Ok(FeatureVolume {
        data: var,
        direction,
        max_disparity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume(l: &Tensor, r: &Tensor, d: usize, dir: Direction) -> Tensor {
        let mut tape = Tape::new();
        let (a, b) = match dir {
            Direction::LeftToRight => (tape.constant(l.clone()), tape.constant(r.clone())),
            Direction::RightToLeft => (tape.constant(r.clone()), tape.constant(l.clone())),
        };
        let vol = build_volume(&mut tape, a, b, d, dir).unwrap();
        tape.value(vol.data).clone()
    }

    #[test]
    fn zero_range_is_channel_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Tensor::rand_uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let r = Tensor::rand_uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let v = volume(&l, &r, 0, Direction::LeftToRight);
        assert_eq!(v.shape(), &[3, 4, 1, 4]);
        let expected = Tensor::from_fn(&[3, 4, 1, 4], |i| {
            if i[3] < 2 {
                l.get(&[i[0], i[1], i[3]])
            } else {
                r.get(&[i[0], i[1], i[3] - 2])
            }
        });
        assert_eq!(v, expected);
    }

    #[test]
    fn hand_evaluated_shift() {
        let (a, b, c, x, y, z) = (1.0, 2.0, 3.0, 10.0, 20.0, 30.0);
        let l = Tensor::new(&[1, 3, 1], vec![a, b, c]).unwrap();
        let r = Tensor::new(&[1, 3, 1], vec![x, y, z]).unwrap();
        let v = volume(&l, &r, 1, Direction::LeftToRight);
        let pairs: Vec<(f64, f64)> = (0..3).map(|u| (v.get(&[0, u, 1, 0]), v.get(&[0, u, 1, 1]))).collect();
        assert_eq!(pairs, vec![(a, 0.0), (b, x), (c, y)]);

        let v = volume(&l, &r, 1, Direction::RightToLeft);
        let pairs: Vec<(f64, f64)> = (0..3).map(|u| (v.get(&[0, u, 1, 0]), v.get(&[0, u, 1, 1]))).collect();
        assert_eq!(pairs, vec![(x, b), (y, c), (z, 0.0)]);
    }

    #[test]
    fn matches_brute_force_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, w, f, dmax) = (3, 7, 2, 4);
        let l = Tensor::rand_uniform(&[h, w, f], -1.0, 1.0, &mut rng);
        let r = Tensor::rand_uniform(&[h, w, f], -1.0, 1.0, &mut rng);
        let v = volume(&l, &r, dmax, Direction::LeftToRight);
        for vv in 0..h {
            for u in 0..w {
                for d in 0..=dmax {
                    for c in 0..f {
                        assert_eq!(v.get(&[vv, u, d, c]), l.get(&[vv, u, c]));
                        let expected = if u >= d { r.get(&[vv, u - d, c]) } else { 0.0 };
                        assert_eq!(v.get(&[vv, u, d, f + c]), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn true_shift_slice_matches_reference_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, d0) = (9, 3);
        let wide = Tensor::rand_uniform(&[2, w + d0, 2], -1.0, 1.0, &mut rng);
        let l = Tensor::from_fn(&[2, w, 2], |i| wide.get(&[i[0], i[1], i[2]]));
        let r = Tensor::from_fn(&[2, w, 2], |i| wide.get(&[i[0], i[1] + d0, i[2]]));
        // right(u) = left(u + d0) on the overlap, so slot d0 pairs equal features
        let v = volume(&l, &r, 4, Direction::LeftToRight);
        for vv in 0..2 {
            for u in d0..w {
                for c in 0..2 {
                    assert_eq!(v.get(&[vv, u, d0, c]), v.get(&[vv, u, d0, 2 + c]));
                }
            }
        }
    }

    #[test]
    fn rejects_range_at_or_above_width() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 4, 1]));
        let b = tape.constant(Tensor::zeros(&[2, 4, 1]));
        assert!(build_volume(&mut tape, a, b, 4, Direction::LeftToRight).is_err());
        assert!(build_volume(&mut tape, a, b, 3, Direction::LeftToRight).is_ok());
    }
}
