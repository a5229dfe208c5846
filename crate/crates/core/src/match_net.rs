//! 3D-convolutional encoder-decoder over the feature volume, projection to a
//! cost volume and soft-argmin disparity regression.
//!
//! Layout for `L` encoder levels with widths `c_1..c_L` (and `c_0 = 2F`):
//!
//! ```text
//! e_0 = volume, disparity axis zero-padded to a multiple of 2^L
//! e_l = relu(conv3d_stride2(e_{l-1}))                      l = 1..L
//! b   = cLSTM(e_L) on the disparity-folded layout, or e_L
//! x_L = b
//! x_{l-1} = relu(conv3d(upsample2(x_l))) + e_{l-1}         l = L..1
//! out = relu(conv1x1x1(x_0)), cropped back to D+1 slots
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clstm::{clstm_init, BoundClstm, ClstmParams, LstmState};
use crate::error::{Error, Result};
use crate::feature_volume::FeatureVolume;
use crate::layers::{BoundConv, ConvLayer, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchNetConfig {
    pub encoder_levels: usize,
    /// Width of each encoder level; the last entry is the bottleneck width.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Channels of the full-resolution output fed to the projection.
    pub output_channels: usize,
    pub lstm_kernel: usize,
}

impl Default for MatchNetConfig {
    fn default() -> Self {
        MatchNetConfig {
            encoder_levels: 2,
            channels: vec![8, 8],
            kernel: 3,
            output_channels: 8,
            lstm_kernel: 3,
        }
    }
}

impl MatchNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_levels == 0 || self.channels.len() != self.encoder_levels {
            return Err(Error::InvalidConfig(format!(
                "match net needs one channel width per encoder level ({} levels, {} widths)",
                self.encoder_levels,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.output_channels == 0 {
            return Err(Error::InvalidConfig("match net widths must be >= 1".into()));
        }
        if self.kernel.is_multiple_of(2) || self.lstm_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig("match net kernels must be odd".into()));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    /// Multiple that H, W and the padded disparity axis must share.
    pub fn divisor(&self) -> usize {
        1 << self.encoder_levels
    }

    /// Disparity slots after padding `D+1` up to the divisor.
    pub fn padded_slots(&self, max_disparity: usize) -> usize {
        (max_disparity + 1).div_ceil(self.divisor()) * self.divisor()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchNetParams {
    pub config: MatchNetConfig,
    pub encoder: Vec<ConvLayer>,
    /// `decoder[l]` maps level `l+1` back to level `l`.
    pub decoder: Vec<ConvLayer>,
    pub output: ConvLayer,
    pub projection: ConvLayer,
    pub bottleneck: ClstmParams,
    pub max_disparity: usize,
}

impl Parameters for MatchNetParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.decoder).chain([&self.output, &self.projection]) {
            out.extend(l.tensors());
        }
        out.extend(self.bottleneck.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain([&mut self.output, &mut self.projection])
        {
            out.extend(l.tensors_mut());
        }
        out.extend(self.bottleneck.tensors_mut());
        out
    }
}

/// Random initialization; the bottleneck cLSTM width depends on the
/// disparity range because the disparity axis is folded into channels there.
pub fn init_match_net(config: &MatchNetConfig, feature_dim: usize, max_disparity: usize, seed: u64) -> Result<MatchNetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel;
    let mut widths = vec![2 * feature_dim];
    widths.extend(&config.channels);
    let encoder = (1..widths.len())
        .map(|l| ConvLayer::init(&[k, k, k, widths[l - 1], widths[l]], 2.0, &mut rng))
        .collect();
    let decoder = (1..widths.len())
        .map(|l| ConvLayer::init(&[k, k, k, widths[l], widths[l - 1]], 2.0, &mut rng))
        .collect();
    let output = ConvLayer::init(&[1, 1, 1, widths[0], config.output_channels], 2.0, &mut rng);
    let projection = ConvLayer::init(&[1, 1, 1, config.output_channels, 1], 1.0, &mut rng);
    let folded = config.padded_slots(max_disparity) / config.divisor() * config.bottleneck_channels();
    let lstm_seed = rand::Rng::gen(&mut rng);
    let bottleneck = clstm_init(folded, folded, config.lstm_kernel, lstm_seed)?;
    Ok(MatchNetParams {
        config: config.clone(),
        encoder,
        decoder,
        output,
        projection,
        bottleneck,
        max_disparity,
    })
}

impl MatchNetParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMatchNet {
        BoundMatchNet {
            encoder: self.encoder.iter().map(|l| l.bind(tape, trainable)).collect(),
            decoder: self.decoder.iter().map(|l| l.bind(tape, trainable)).collect(),
            output: self.output.bind(tape, trainable),
            projection: self.projection.bind(tape, trainable),
            bottleneck: self.bottleneck.bind(tape, trainable),
            config: self.config.clone(),
        }
    }

    /// Builds the network on existing tape variables given in
    /// [`Parameters::tensors`] order.
    pub fn attach(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundMatchNet> {
        Ok(BoundMatchNet {
            encoder: self.encoder.iter().map(|l| l.attach(vars)).collect::<Result<_>>()?,
            decoder: self.decoder.iter().map(|l| l.attach(vars)).collect::<Result<_>>()?,
            output: self.output.attach(vars)?,
            projection: self.projection.attach(vars)?,
            bottleneck: self.bottleneck.attach(vars)?,
            config: self.config.clone(),
        })
    }

    /// Shape of the bottleneck cLSTM state for an `H×W` frame.
    pub fn bottleneck_state_shape(&self, height: usize, width: usize) -> [usize; 3] {
        let div = self.config.divisor();
        [height / div, width / div, self.bottleneck.hidden_dim]
    }
}

#[derive(Clone, Debug)]
pub struct BoundMatchNet {
    encoder: Vec<BoundConv>,
    decoder: Vec<BoundConv>,
    output: BoundConv,
    projection: BoundConv,
    bottleneck: BoundClstm,
    config: MatchNetConfig,
}

impl BoundMatchNet {
    /// Same order as [`MatchNetParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.decoder).chain([&self.output, &self.projection]) {
            out.extend(l.vars());
        }
        out.extend(self.bottleneck.vars());
        out
    }
}

/// Runs the hourglass. With `bottleneck_state` present the bottleneck passes
/// through the cLSTM and the advanced state is returned.
pub fn encode_decode(
    tape: &mut Tape,
    volume: &FeatureVolume,
    bottleneck_state: Option<&LstmState>,
    net: &BoundMatchNet,
) -> Result<(Var, Option<LstmState>)> {
    let shape = tape.try_value(volume.data)?.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::rank("match net input", 4, shape.len()));
    }
    let div = net.config.divisor();
    for (axis, name) in [(0, "height"), (1, "width")] {
        let n = shape[axis];
        if n % div != 0 {
            let pad = n.div_ceil(div) * div - n;
            return Err(Error::InvalidArgument(format!(
                "{name} {n} is not divisible by {div}; pad by {pad} to {}",
                n + pad
            )));
        }
    }
    let slots = shape[2];
    let padded = slots.div_ceil(div) * div;
    let mut skips = vec![tape.pad_axis(volume.data, 2, 0, padded - slots)?];
    for layer in &net.encoder {
        let x = layer.conv3d(tape, *skips.last().expect("non-empty"), 2)?;
        skips.push(tape.relu(x)?);
    }

    let mut x = skips.pop().expect("encoder produced a bottleneck");
    let mut next_state = None;
    if let Some(state) = bottleneck_state {
        let s = tape.shape(x).to_vec();
        let folded = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let (h, advanced) = net.bottleneck.step(tape, folded, state)?;
        x = tape.reshape(h, &s)?;
        next_state = Some(advanced);
    }

    for (layer, skip) in net.decoder.iter().rev().zip(skips.iter().rev()) {
        let up = tape.upsample_nearest(x, 2, &[0, 1, 2])?;
        let y = layer.conv3d(tape, up, 1)?;
        let y = tape.relu(y)?;
        x = tape.add(y, *skip)?;
    }
    let out = net.output.conv3d(tape, x, 1)?;
    let out = tape.relu(out)?;
    let out = tape.slice_axis(out, 2, 0, slots)?;
    Ok((out, next_state))
}

/// Per-pixel, per-disparity matching costs `H×W×(D+1)`; lower is better.
#[derive(Clone, Copy, Debug)]
pub struct CostVolume {
    pub data: Var,
}

/// 1×1×1 convolution to one channel, channel axis squeezed.
pub fn project_to_cost(tape: &mut Tape, features: Var, net: &BoundMatchNet) -> Result<CostVolume> {
    project_with(tape, features, &net.projection)
}

pub(crate) fn project_with(tape: &mut Tape, features: Var, projection: &BoundConv) -> Result<CostVolume> {
    let y = projection.conv3d(tape, features, 1)?;
    let s = tape.shape(y).to_vec();
    let data = tape.reshape(y, &s[..3])?;
    Ok(CostVolume { data })
}

/// Expected disparity under `softmax(-cost)` along the disparity axis.
pub fn soft_argmin(tape: &mut Tape, costs: CostVolume) -> Result<Var> {
    let shape = tape.try_value(costs.data)?.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::rank("soft_argmin costs", 3, shape.len()));
    }
    let neg = tape.neg(costs.data)?;
    let p = tape.softmax_axis(neg, 2)?;
    let index = tape.constant(Tensor::from_fn(&shape, |i| i[2] as f64));
    let weighted = tape.mul(p, index)?;
    tape.sum_axis(weighted, 2)
}
