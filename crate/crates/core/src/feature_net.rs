//! Weight-shared convolutional feature extractor.
//!
//! A stack of same-padded, stride-1 3×3 convolutions with ReLU on every layer
//! but the last and identity residuals every `skip_period` layers. The same
//! parameters are applied to both views.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BoundConv, ConvLayer, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub num_layers: usize,
    pub kernel: usize,
    pub feature_dim: usize,
    pub skip_period: usize,
    pub input_channels: usize,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig {
            num_layers: 6,
            kernel: 3,
            feature_dim: 8,
            skip_period: 2,
            input_channels: 1,
        }
    }
}

impl FeatureNetConfig {
    /// 18 layers producing 32-dimensional features.
    pub fn full_scale() -> Self {
        FeatureNetConfig {
            num_layers: 18,
            feature_dim: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "feature net needs at least 2 layers, got {}",
                self.num_layers
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("feature kernel {} must be odd", self.kernel)));
        }
        if self.feature_dim == 0 || self.input_channels == 0 || self.skip_period == 0 {
            return Err(Error::InvalidConfig(
                "feature_dim, input_channels and skip_period must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetParams {
    pub config: FeatureNetConfig,
    pub layers: Vec<ConvLayer>,
}

impl Parameters for FeatureNetParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// He-normal kernels, zero biases, deterministic in `seed`.
pub fn init_feature_net(config: &FeatureNetConfig, seed: u64) -> Result<FeatureNetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel;
    let f = config.feature_dim;
    let layers = (0..config.num_layers)
        .map(|l| {
            let cin = if l == 0 { config.input_channels } else { f };
            ConvLayer::init(&[k, k, cin, f], 2.0, &mut rng)
        })
        .collect();
    Ok(FeatureNetParams {
        config: config.clone(),
        layers,
    })
}

impl FeatureNetParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundFeatureNet {
        BoundFeatureNet {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            skip_period: self.config.skip_period,
        }
    }
}

impl FeatureNetParams {
    /// Builds the network on existing tape variables given in
    /// [`Parameters::tensors`] order.
    pub fn attach(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundFeatureNet> {
        Ok(BoundFeatureNet {
            layers: self.layers.iter().map(|l| l.attach(vars)).collect::<Result<_>>()?,
            skip_period: self.config.skip_period,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundFeatureNet {
    layers: Vec<BoundConv>,
    skip_period: usize,
}

impl BoundFeatureNet {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }

    /// `image` is `H×W×C` in `[0, 1]`; returns `H×W×F`.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = tape.relu_conv(&self.layers[0], image)?;
        let mut residual = h;
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            let mut y = layer.conv2d(tape, h, 1)?;
            if l != last {
                y = tape.relu(y)?;
            }
            if l % self.skip_period == 0 {
                y = tape.add(y, residual)?;
                residual = y;
            }
            h = y;
        }
        Ok(h)
    }
}

impl Tape {
    fn relu_conv(&mut self, layer: &BoundConv, x: Var) -> Result<Var> {
        let y = layer.conv2d(self, x, 1)?;
        self.relu(y)
    }
}

/// Runs the shared extractor on one view.
pub fn extract_features(tape: &mut Tape, image: Var, net: &BoundFeatureNet) -> Result<Var> {
    net.forward(tape, image)
}
