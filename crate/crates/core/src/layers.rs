use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Padding;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A set of learnable tensors visited in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Kernel and bias of one convolution, in channels-last layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    /// Normal kernel with variance `gain / fan_in`, zero bias. `kernel_shape`
    /// ends with `[.., Cin, Cout]`; fan-in is the product of all but `Cout`.
    pub fn init<R: Rng + ?Sized>(kernel_shape: &[usize], gain: f64, rng: &mut R) -> Self {
        let cout = *kernel_shape.last().expect("kernel shape is non-empty");
        let fan_in: usize = kernel_shape[..kernel_shape.len() - 1].iter().product();
        ConvLayer {
            kernel: Tensor::rand_normal(kernel_shape, (gain / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundConv {
        BoundConv {
            kernel: tape.leaf(self.kernel.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    /// Reuses the next two tape variables as kernel and bias.
    pub fn attach(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundConv> {
        match (vars.next(), vars.next()) {
            (Some(kernel), Some(bias)) => Ok(BoundConv { kernel, bias }),
            _ => Err(Error::InvalidArgument("too few variables to attach a conv layer".into())),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.len()
    }
}

impl Parameters for ConvLayer {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.kernel, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

/// A [`ConvLayer`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub kernel: Var,
    pub bias: Var,
}

impl BoundConv {
    pub fn vars(&self) -> [Var; 2] {
        [self.kernel, self.bias]
    }

    pub fn conv2d(&self, tape: &mut Tape, x: Var, stride: usize) -> Result<Var> {
        tape.conv2d(x, self.kernel, self.bias, stride, Padding::Same)
    }

    pub fn conv3d(&self, tape: &mut Tape, x: Var, stride: usize) -> Result<Var> {
        tape.conv3d(x, self.kernel, self.bias, stride, Padding::Same)
    }
}
