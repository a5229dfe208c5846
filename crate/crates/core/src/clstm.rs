//! Convolutional LSTM cell.
//!
//! The four gate transforms are one fused convolution over
//! `concat(input, h)` whose output channels are ordered input, forget, output,
//! candidate. State handed between frames is plain data, so gradients never
//! cross a frame boundary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{BoundConv, ConvLayer, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClstmParams {
    /// Kernel `k×k×(Cin+Chid)×4Chid`, bias `4Chid`.
    pub gates: ConvLayer,
    pub input_channels: usize,
    pub hidden_dim: usize,
}

impl Parameters for ClstmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.gates.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.gates.tensors_mut()
    }
}

/// Hidden and cell maps carried from one frame to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
    pub frame_index: usize,
}

/// Zero state for maps of shape `H×W×Chid`.
pub fn reset_state(shape: &[usize]) -> LstmState {
    LstmState {
        h: Tensor::zeros(shape),
        c: Tensor::zeros(shape),
        frame_index: 0,
    }
}

/// Fan-in scaled kernels; the forget-gate bias starts at +1, others at 0.
pub fn clstm_init(input_channels: usize, hidden_dim: usize, kernel: usize, seed: u64) -> Result<ClstmParams> {
    if kernel.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("cLSTM kernel {kernel} must be odd")));
    }
    if input_channels == 0 || hidden_dim == 0 {
        return Err(Error::InvalidConfig("cLSTM channel counts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gates = ConvLayer::init(&[kernel, kernel, input_channels + hidden_dim, 4 * hidden_dim], 1.0, &mut rng);
    gates.bias.data_mut()[hidden_dim..2 * hidden_dim].fill(1.0);
    Ok(ClstmParams {
        gates,
        input_channels,
        hidden_dim,
    })
}

impl ClstmParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundClstm {
        BoundClstm {
            gates: self.gates.bind(tape, trainable),
            hidden_dim: self.hidden_dim,
        }
    }

    /// Builds the cell on existing tape variables (kernel, bias).
    pub fn attach(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundClstm> {
        Ok(BoundClstm {
            gates: self.gates.attach(vars)?,
            hidden_dim: self.hidden_dim,
        })
    }

    pub fn forget_bias(&self) -> &[f64] {
        &self.gates.bias.data()[self.hidden_dim..2 * self.hidden_dim]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundClstm {
    gates: BoundConv,
    hidden_dim: usize,
}

impl BoundClstm {
    pub fn vars(&self) -> Vec<Var> {
        self.gates.vars().to_vec()
    }

    /// One recurrence step on `input` (`H×W×Cin`). Returns the output map `h'`
    /// and the detached next state.
    pub fn step(&self, tape: &mut Tape, input: Var, state: &LstmState) -> Result<(Var, LstmState)> {
        let shape = tape.try_value(input)?.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::rank("cLSTM input", 3, shape.len()));
        }
        if state.h.shape() != state.c.shape() {
            return Err(Error::InvalidArgument("cLSTM state h and c differ in shape".into()));
        }
        let expected = [shape[0], shape[1], self.hidden_dim];
        for (axis, (&e, &a)) in expected.iter().zip(state.h.shape()).enumerate() {
            if e != a {
                return Err(Error::shape("cLSTM state vs input", axis, e, a));
            }
        }
        if state.h.rank() != 3 {
            return Err(Error::rank("cLSTM state", 3, state.h.rank()));
        }
        let ch = self.hidden_dim;
        let h = tape.constant(state.h.clone());
        let c = tape.constant(state.c.clone());
        let joined = tape.concat(&[input, h], 2)?;
        let z = self.gates.conv2d(tape, joined, 1)?;
        let zi = tape.slice_axis(z, 2, 0, ch)?;
        let zf = tape.slice_axis(z, 2, ch, ch)?;
        let zo = tape.slice_axis(z, 2, 2 * ch, ch)?;
        let zg = tape.slice_axis(z, 2, 3 * ch, ch)?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let o = tape.sigmoid(zo)?;
        let g = tape.tanh(zg)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next)?;
        let h_next = tape.mul(o, squashed)?;
        let next = LstmState {
            h: tape.value(h_next).clone(),
            c: tape.value(c_next).clone(),
            frame_index: state.frame_index + 1,
        };
        Ok((h_next, next))
    }
}

/// Free-function form of [`BoundClstm::step`].
pub fn clstm_step(tape: &mut Tape, input: Var, state: &LstmState, params: &BoundClstm) -> Result<(Var, LstmState)> {
    params.step(tape, input, state)
}
