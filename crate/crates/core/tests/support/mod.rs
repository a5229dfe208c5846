#![allow(dead_code)]

use openstereo::clstm::{clstm_init, LstmState};
use openstereo::feature_volume::{build_volume, Direction};
use openstereo::gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
use openstereo::layers::Parameters;
use openstereo::match_net::{soft_argmin, CostVolume};
use openstereo::online_adapt::{forward, EngineConfig, NetworkParams, RecurrentStates};
use openstereo::stereo_io::StereoFrame;
use openstereo::warp_loss::{data_loss, smoothness_loss, ssim_map, total_loss, LossWeights};
use openstereo::{Padding, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xABCD);
    let w = tape.constant(uniform(tape.shape(y), &mut r));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Disparities whose fractional part stays in [0.1, 0.9], away from the
/// interpolation kinks.
pub fn fractional_disparity(shape: &[usize], max: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0..max) as f64 + rng.gen_range(0.1..0.9))
}

pub type Case = fn(u64) -> Result<GradCheckReport>;

pub fn conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let padding = if seed.is_multiple_of(3) { Padding::Valid } else { Padding::Same };
    let inputs = [uniform(&[5, 7, 2], &mut r), uniform(&[3, 3, 2, 3], &mut r), uniform(&[3], &mut r)];
    grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, padding)?;
            weighted_sum(t, y, seed)
        },
        &inputs,
        EPS,
        TOL,
    )
}

pub fn conv3d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let padding = if seed.is_multiple_of(3) { Padding::Valid } else { Padding::Same };
    let inputs = [uniform(&[4, 5, 3, 2], &mut r), uniform(&[3, 3, 3, 2, 2], &mut r), uniform(&[2], &mut r)];
    grad_check(
        |t, v| {
            let y = t.conv3d(v[0], v[1], v[2], stride, padding)?;
            weighted_sum(t, y, seed)
        },
        &inputs,
        EPS,
        TOL,
    )
}

pub fn activations(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    grad_check(
        |t, v| {
            let a = t.relu(v[0])?;
            let b = t.sigmoid(v[0])?;
            let c = t.tanh(v[0])?;
            let a = weighted_sum(t, a, seed)?;
            let b = weighted_sum(t, b, seed + 1)?;
            let c = weighted_sum(t, c, seed + 2)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        },
        &[uniform(&[4, 6], &mut r)],
        EPS,
        TOL,
    )
}

pub fn softmax(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let axis = (seed % 3) as usize;
    grad_check(
        |t, v| {
            let y = t.softmax_axis(v[0], axis)?;
            weighted_sum(t, y, seed)
        },
        &[uniform(&[3, 4, 5], &mut r)],
        EPS,
        TOL,
    )
}

pub fn concat(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let axis = (seed % 3) as usize;
    let mut a = vec![2, 3, 2];
    let mut b = a.clone();
    a[axis] = 1;
    b[axis] = 3;
    grad_check(
        |t, v| {
            let y = t.concat(&[v[0], v[1]], axis)?;
            weighted_sum(t, y, seed)
        },
        &[uniform(&a, &mut r), uniform(&b, &mut r)],
        EPS,
        TOL,
    )
}

pub fn upsample(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let factor = 1 + (seed % 3) as usize;
    grad_check(
        |t, v| {
            let y = t.upsample_nearest(v[0], factor, &[0, 1, 2])?;
            weighted_sum(t, y, seed)
        },
        &[uniform(&[2, 3, 2, 2], &mut r)],
        EPS,
        TOL,
    )
}

pub fn clstm_step(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let params = clstm_init(2, 3, 3, seed)?;
    let state = LstmState {
        h: uniform(&[4, 5, 3], &mut r),
        c: uniform(&[4, 5, 3], &mut r),
        frame_index: 0,
    };
    let inputs = [uniform(&[4, 5, 2], &mut r), params.gates.kernel.clone(), params.gates.bias.clone()];
    grad_check(
        |t, v| {
            let cell = params.attach(&mut v[1..].iter().copied())?;
            let (h, _) = cell.step(t, v[0], &state)?;
            weighted_sum(t, h, seed)
        },
        &inputs,
        EPS,
        TOL,
    )
}

pub fn volume(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let direction = if seed.is_multiple_of(2) { Direction::LeftToRight } else { Direction::RightToLeft };
    grad_check(
        |t, v| {
            let vol = build_volume(t, v[0], v[1], 3, direction)?;
            weighted_sum(t, vol.data, seed)
        },
        &[uniform(&[3, 8, 2], &mut r), uniform(&[3, 8, 2], &mut r)],
        EPS,
        TOL,
    )
}

pub fn warp(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let direction = if seed.is_multiple_of(2) { Direction::LeftToRight } else { Direction::RightToLeft };
    let inputs = [uniform(&[3, 8, 2], &mut r), fractional_disparity(&[3, 8], 4, &mut r)];
    grad_check(
        |t, v| {
            let (y, _) = t.warp_horizontal(v[0], v[1], direction)?;
            weighted_sum(t, y, seed)
        },
        &inputs,
        EPS,
        TOL,
    )
}

pub fn ssim(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let inputs = [
        Tensor::rand_uniform(&[5, 6, 2], 0.0, 1.0, &mut r),
        Tensor::rand_uniform(&[5, 6, 2], 0.0, 1.0, &mut r),
    ];
    grad_check(
        |t, v| {
            let s = ssim_map(t, v[0], v[1])?;
            weighted_sum(t, s, seed)
        },
        &inputs,
        EPS,
        TOL,
    )
}

pub fn data(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mask = Tensor::from_fn(&[5, 6], |_| if r.gen::<f64>() < 0.8 { 1.0 } else { 0.0 });
    let inputs = [
        Tensor::rand_uniform(&[5, 6, 1], 0.0, 1.0, &mut r),
        Tensor::rand_uniform(&[5, 6, 1], 0.0, 1.0, &mut r),
    ];
    grad_check(
        |t, v| Ok(data_loss(t, v[0], v[1], &mask, &LossWeights::default())?.value),
        &inputs,
        EPS,
        TOL,
    )
}

pub fn smoothness(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let image = Tensor::rand_uniform(&[5, 6, 1], 0.0, 1.0, &mut r);
    grad_check(
        |t, v| smoothness_loss(t, v[0], &image, 30.0),
        &[uniform(&[5, 6], &mut r)],
        EPS,
        TOL,
    )
}

pub fn soft_argmin_case(seed: u64) -> Result<GradCheckReport> {
    soft_argmin_at(seed, TOL)
}

pub fn soft_argmin_at(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    grad_check(
        |t, v| {
            let d = soft_argmin(t, CostVolume { data: v[0] })?;
            weighted_sum(t, d, seed)
        },
        &[uniform(&[3, 4, 5], &mut r)],
        EPS,
        tol,
    )
}

pub fn total_loss_disparity(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let frame = StereoFrame::new(
        Tensor::rand_uniform(&[4, 10, 1], 0.0, 1.0, &mut r),
        Tensor::rand_uniform(&[4, 10, 1], 0.0, 1.0, &mut r),
        0,
    )?;
    grad_check(
        |t, v| Ok(total_loss(t, &frame, v[0], &LossWeights::default())?.loss),
        &[fractional_disparity(&[4, 10], 3, &mut r)],
        EPS,
        TOL,
    )
}

/// Small full network on an 8×16 frame.
pub fn pipeline_config(seed: u64) -> EngineConfig {
    let mut c = EngineConfig::new(8, 16, 3);
    c.seed = seed;
    c
}

/// Total loss of the whole network with respect to every parameter tensor,
/// `probes` sampled entries per tensor.
pub fn pipeline(seed: u64, probes: usize) -> Result<GradCheckReport> {
    let config = pipeline_config(seed);
    let params = NetworkParams::init(&config)?;
    let mut r = rng(seed);
    let frame = StereoFrame::new(
        Tensor::rand_uniform(&[8, 16, 1], 0.0, 1.0, &mut r),
        Tensor::rand_uniform(&[8, 16, 1], 0.0, 1.0, &mut r),
        0,
    )?;
    let mut states = RecurrentStates::zeros(&config, &params);
    for s in [&mut states.left, &mut states.right, &mut states.bottleneck] {
        s.h = Tensor::rand_uniform(s.h.shape(), -0.5, 0.5, &mut r);
        s.c = Tensor::rand_uniform(s.c.shape(), -0.5, 0.5, &mut r);
    }
    let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    grad_check_sampled(
        |t, v| {
            let net = params.attach(v)?;
            let l = t.constant(frame.left.clone());
            let rr = t.constant(frame.right.clone());
            let pass = forward(t, &net, l, rr, Some(&states), config.max_disparity, config.direction)?;
            Ok(total_loss(t, &frame, pass.disparity, &config.loss)?.loss)
        },
        &inputs,
        EPS,
        TOL,
        probes,
        seed,
    )
}

pub fn pipeline_case(seed: u64) -> Result<GradCheckReport> {
    pipeline(seed, 3)
}

pub const CASES: &[(&str, Case)] = &[
    ("conv2d", conv2d),
    ("conv3d", conv3d),
    ("activations", activations),
    ("softmax_axis", softmax),
    ("concat", concat),
    ("upsample_nearest", upsample),
    ("clstm_step", clstm_step),
    ("build_volume", volume),
    ("warp_horizontal", warp),
    ("ssim_map", ssim),
    ("data_loss", data),
    ("smoothness_loss", smoothness),
    ("soft_argmin", soft_argmin_case),
    ("total_loss", total_loss_disparity),
    ("full_pipeline", pipeline_case),
];

pub struct SeedSummary {
    pub worst: f64,
    pub skipped: usize,
    pub probed: usize,
}

impl SeedSummary {
    /// Passes at `TOL` with at most one probe in ten dropped at a kink.
    pub fn passed(&self) -> bool {
        self.worst < TOL && self.skipped * 10 <= self.probed + self.skipped
    }
}

/// Worst relative error of `case` over seeds `0..SEEDS`.
pub fn worst_over_seeds(case: Case) -> Result<SeedSummary> {
    let mut out = SeedSummary { worst: 0.0, skipped: 0, probed: 0 };
    for seed in 0..SEEDS {
        let r = case(seed)?;
        out.worst = out.worst.max(r.worst());
        out.skipped += r.total_skipped();
        out.probed += r.total_probed();
    }
    Ok(out)
}
