//! The self-adapting engine: one forward pass, loss and RMSProp update per
//! frame, with LSTM memory carried between frames.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::clstm::{clstm_init, reset_state, BoundClstm, ClstmParams, LstmState};
use crate::error::{Error, Result};
use crate::feature_net::{init_feature_net, BoundFeatureNet, FeatureNetConfig, FeatureNetParams};
use crate::feature_volume::{build_volume, Direction};
use crate::layers::Parameters;
use crate::match_net::{encode_decode, init_match_net, project_to_cost, soft_argmin, BoundMatchNet, MatchNetConfig, MatchNetParams};
use crate::metrics::{compute_metrics, MetricSet};
use crate::stereo_io::StereoFrame;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::warp_loss::{total_loss_views, LossBreakdown, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub lstm_enabled: bool,
    pub backprop_enabled: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            lstm_enabled: true,
            backprop_enabled: true,
        }
    }
}

/// Flags for the four variants: 1 baseline, 2 backprop only, 3 LSTMs only,
/// 4 full network.
pub fn configure_ablation(kind: u8) -> Result<Ablation> {
    let (lstm_enabled, backprop_enabled) = match kind {
        1 => (false, false),
        2 => (false, true),
        3 => (true, false),
        4 => (true, true),
        _ => return Err(Error::InvalidArgument(format!("unknown ablation type {kind}; expected 1..=4"))),
    };
    Ok(Ablation {
        lstm_enabled,
        backprop_enabled,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp {
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// `acc <- decay*acc + (1-decay)*g^2; p <- p - lr*g/(sqrt(acc) + eps)`.
pub fn rmsprop_step(params: &mut [&mut Tensor], grads: &[&Tensor], accumulators: &mut [Tensor], settings: &RmsProp) -> Result<()> {
    if params.len() != grads.len() || params.len() != accumulators.len() {
        return Err(Error::InvalidArgument(format!(
            "rmsprop needs matching lists: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            accumulators.len()
        )));
    }
    for ((p, g), acc) in params.iter().zip(grads).zip(accumulators.iter()) {
        crate::tensor::check_same_shape("rmsprop gradient", p.shape(), g.shape())?;
        crate::tensor::check_same_shape("rmsprop accumulator", p.shape(), acc.shape())?;
    }
    let RmsProp {
        learning_rate: lr,
        decay,
        epsilon,
    } = *settings;
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(accumulators.iter_mut()) {
        for ((p, &g), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
            *a = decay * *a + (1.0 - decay) * g * g;
            *p -= lr * g / (a.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub max_disparity: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub feature_net: FeatureNetConfig,
    pub match_net: MatchNetConfig,
    /// Kernel of the feature-stage cLSTM.
    pub lstm_kernel: usize,
    pub loss: LossWeights,
    /// Which view is the reference.
    #[serde(default)]
    pub direction: Direction,
    /// Also report the prediction made after this frame's update.
    #[serde(default)]
    pub post_update_prediction: bool,
}

fn one() -> usize {
    1
}

impl EngineConfig {
    /// Desk-scale defaults for an `H×W` grayscale stream with disparities `0..=D`.
    pub fn new(height: usize, width: usize, max_disparity: usize) -> Self {
        EngineConfig {
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            max_disparity,
            height,
            width,
            channels: 1,
            ablation: Ablation::default(),
            seed: 0,
            feature_net: FeatureNetConfig::default(),
            match_net: MatchNetConfig::default(),
            lstm_kernel: 3,
            loss: LossWeights::default(),
            direction: Direction::LeftToRight,
            post_update_prediction: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::InvalidConfig(format!("rmsprop decay {} must lie in (0, 1)", self.rmsprop_decay)));
        }
        if !(self.rmsprop_epsilon > 0.0) {
            return Err(Error::InvalidConfig("rmsprop epsilon must be positive".into()));
        }
        if self.max_disparity == 0 {
            return Err(Error::InvalidConfig("disparity range D must be >= 1".into()));
        }
        if self.max_disparity >= self.width {
            return Err(Error::InvalidConfig(format!(
                "disparity range {} must be below the width {}",
                self.max_disparity, self.width
            )));
        }
        if self.channels != self.feature_net.input_channels {
            return Err(Error::InvalidConfig(format!(
                "image channels {} differ from feature net input channels {}",
                self.channels, self.feature_net.input_channels
            )));
        }
        let div = self.match_net.divisor();
        for (name, n) in [("height", self.height), ("width", self.width)] {
            if n == 0 || n % div != 0 {
                return Err(Error::InvalidConfig(format!("{name} {n} must be a positive multiple of {div}")));
            }
        }
        if self.lstm_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig("feature cLSTM kernel must be odd".into()));
        }
        self.feature_net.validate()?;
        self.match_net.validate()?;
        self.loss.validate()
    }

    pub fn rmsprop(&self) -> RmsProp {
        RmsProp {
            learning_rate: self.learning_rate,
            decay: self.rmsprop_decay,
            epsilon: self.rmsprop_epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub feature_net: FeatureNetParams,
    /// Shared by both views; each view keeps its own state.
    pub feature_lstm: ClstmParams,
    /// Includes the bottleneck cLSTM.
    pub match_net: MatchNetParams,
}

impl Parameters for NetworkParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.feature_net.tensors();
        out.extend(self.feature_lstm.tensors());
        out.extend(self.match_net.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.feature_net.tensors_mut();
        out.extend(self.feature_lstm.tensors_mut());
        out.extend(self.match_net.tensors_mut());
        out
    }
}

impl NetworkParams {
    pub fn init(config: &EngineConfig) -> Result<Self> {
        config.validate()?;
        let f = config.feature_net.feature_dim;
        Ok(NetworkParams {
            feature_net: init_feature_net(&config.feature_net, config.seed)?,
            feature_lstm: clstm_init(f, f, config.lstm_kernel, config.seed.wrapping_add(1))?,
            match_net: init_match_net(&config.match_net, f, config.max_disparity, config.seed.wrapping_add(2))?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNetwork {
        BoundNetwork {
            feature_net: self.feature_net.bind(tape, trainable),
            feature_lstm: self.feature_lstm.bind(tape, trainable),
            match_net: self.match_net.bind(tape, trainable),
        }
    }
}

impl NetworkParams {
    /// Builds the network on existing tape variables given in
    /// [`Parameters::tensors`] order; every variable must be consumed.
    pub fn attach(&self, vars: &[Var]) -> Result<BoundNetwork> {
        if vars.len() != self.tensors().len() {
            return Err(Error::InvalidArgument(format!(
                "network has {} parameter tensors, got {} variables",
                self.tensors().len(),
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        Ok(BoundNetwork {
            feature_net: self.feature_net.attach(&mut it)?,
            feature_lstm: self.feature_lstm.attach(&mut it)?,
            match_net: self.match_net.attach(&mut it)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub feature_net: BoundFeatureNet,
    pub feature_lstm: BoundClstm,
    pub match_net: BoundMatchNet,
}

impl BoundNetwork {
    /// Same order as [`NetworkParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.feature_net.vars();
        out.extend(self.feature_lstm.vars());
        out.extend(self.match_net.vars());
        out
    }
}

/// Recurrent memory: the two feature-stage states and the bottleneck state.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentStates {
    pub left: LstmState,
    pub right: LstmState,
    pub bottleneck: LstmState,
}

impl RecurrentStates {
    pub fn zeros(config: &EngineConfig, params: &NetworkParams) -> Self {
        let feature = [config.height, config.width, config.feature_net.feature_dim];
        RecurrentStates {
            left: reset_state(&feature),
            right: reset_state(&feature),
            bottleneck: reset_state(&params.match_net.bottleneck_state_shape(config.height, config.width)),
        }
    }
}

/// Tape outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub disparity: Var,
    /// Next recurrent states; `None` when the LSTMs are disabled.
    pub states: Option<RecurrentStates>,
}

/// Full network on one frame: features of both views, optional feature-stage
/// cLSTM, feature volume, hourglass with optional bottleneck cLSTM, cost
/// projection and soft-argmin.
pub fn forward(
    tape: &mut Tape,
    net: &BoundNetwork,
    left: Var,
    right: Var,
    states: Option<&RecurrentStates>,
    max_disparity: usize,
    direction: Direction,
) -> Result<ForwardPass> {
    let mut fl = net.feature_net.forward(tape, left)?;
    let mut fr = net.feature_net.forward(tape, right)?;
    let mut next = None;
    if let Some(s) = states {
        let (hl, sl) = net.feature_lstm.step(tape, fl, &s.left)?;
        let (hr, sr) = net.feature_lstm.step(tape, fr, &s.right)?;
        fl = hl;
        fr = hr;
        next = Some((sl, sr));
    }
    let (reference, other) = match direction {
        Direction::LeftToRight => (fl, fr),
        Direction::RightToLeft => (fr, fl),
    };
    let volume = build_volume(tape, reference, other, max_disparity, direction)?;
    let (features, bottleneck) = encode_decode(tape, &volume, states.map(|s| &s.bottleneck), &net.match_net)?;
    let costs = project_to_cost(tape, features, &net.match_net)?;
    let disparity = soft_argmin(tape, costs)?;
    let states = match (next, bottleneck) {
        (Some((left, right)), Some(bottleneck)) => Some(RecurrentStates { left, right, bottleneck }),
        _ => None,
    };
    Ok(ForwardPass { disparity, states })
}

/// Result of [`Engine::process_frame`].
#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// Prediction made before this frame's update.
    pub disparity: Tensor,
    pub loss: LossBreakdown,
    /// Prediction after the update, when requested in the config.
    pub post_update: Option<Tensor>,
    /// Set when the update was skipped because of a non-finite value.
    pub flagged: bool,
}

#[derive(Debug)]
pub struct Engine {
    config: EngineConfig,
    params: NetworkParams,
    accumulators: Vec<Tensor>,
    states: RecurrentStates,
    frames_seen: usize,
    loss_history: Vec<f64>,
    tape: Tape,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        let params = NetworkParams::init(&config)?;
        Ok(Self::with_params(config, params))
    }

    /// Engine starting from given weights; `config` must describe them.
    pub fn with_params(config: EngineConfig, params: NetworkParams) -> Self {
        let accumulators = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let states = RecurrentStates::zeros(&config, &params);
        Engine {
            config,
            params,
            accumulators,
            states,
            frames_seen: 0,
            loss_history: Vec::new(),
            tape: Tape::new(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    pub fn states(&self) -> &RecurrentStates {
        &self.states
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Total loss of every processed frame, in order.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    /// All parameters flattened in visiting order.
    pub fn parameter_vector(&self) -> Vec<f64> {
        self.params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Zeroes the recurrent memory.
    pub fn reset_states(&mut self) {
        self.states = RecurrentStates::zeros(&self.config, &self.params);
    }

    fn check_frame(&self, frame: &StereoFrame) -> Result<()> {
        let expected = [self.config.height, self.config.width, self.config.channels];
        for view in [&frame.left, &frame.right] {
            if view.rank() != 3 {
                return Err(Error::rank("frame view", 3, view.rank()));
            }
            for (axis, (&e, &a)) in expected.iter().zip(view.shape()).enumerate() {
                if e != a {
                    return Err(Error::shape("frame extents are fixed per engine", axis, e, a));
                }
            }
        }
        Ok(())
    }

    fn views<'a>(&self, frame: &'a StereoFrame) -> (&'a Tensor, &'a Tensor) {
        match self.config.direction {
            Direction::LeftToRight => (&frame.left, &frame.right),
            Direction::RightToLeft => (&frame.right, &frame.left),
        }
    }

    /// Prediction with the current weights, leaving all state untouched.
    pub fn predict(&mut self, frame: &StereoFrame) -> Result<Tensor> {
        self.check_frame(frame)?;
        let tape = &mut self.tape;
        tape.clear();
        let net = self.params.bind(tape, false);
        let (l, r) = (tape.constant(frame.left.clone()), tape.constant(frame.right.clone()));
        let states = self.config.ablation.lstm_enabled.then_some(&self.states);
        let out = forward(tape, &net, l, r, states, self.config.max_disparity, self.config.direction)?;
        let d = tape.value(out.disparity).clone();
        tape.clear();
        Ok(d)
    }

    /// Forward pass, loss and (if enabled) one RMSProp update. A non-finite
    /// loss, gradient or updated weight leaves parameters, accumulators and
    /// recurrent states as they were before the frame, and flags the frame.
    pub fn process_frame(&mut self, frame: &StereoFrame) -> Result<FrameOutput> {
        self.check_frame(frame)?;
        let ablation = self.config.ablation;
        let (reference, other) = self.views(frame);

        let tape = &mut self.tape;
        tape.clear();
        let net = self.params.bind(tape, ablation.backprop_enabled);
        let (l, r) = (tape.constant(frame.left.clone()), tape.constant(frame.right.clone()));
        let states = ablation.lstm_enabled.then_some(&self.states);
        let pass = forward(tape, &net, l, r, states, self.config.max_disparity, self.config.direction)?;
        let disparity = tape.value(pass.disparity).clone();
        let loss = total_loss_views(tape, reference, other, pass.disparity, self.config.direction, &self.config.loss)?;

        let mut flagged = !loss.breakdown.total.is_finite();
        if !flagged && ablation.backprop_enabled && tape.is_tracked(loss.loss) {
            tape.backward(loss.loss)?;
            let grads: Vec<Tensor> = net
                .vars()
                .iter()
                .zip(self.params.tensors())
                .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if grads.iter().all(Tensor::all_finite) {
                let saved = (self.params.clone(), self.accumulators.clone());
                let refs: Vec<&Tensor> = grads.iter().collect();
                rmsprop_step(&mut self.params.tensors_mut(), &refs, &mut self.accumulators, &self.config.rmsprop())?;
                if !self.params.tensors().iter().all(|t| t.all_finite()) {
                    (self.params, self.accumulators) = saved;
                    flagged = true;
                }
            } else {
                flagged = true;
            }
        }
        self.tape.clear();

        if flagged {
            warn!("frame {}: non-finite loss or update; parameters kept", frame.t);
        } else if let Some(next) = pass.states {
            self.states = next;
        }
        self.frames_seen += 1;
        self.loss_history.push(loss.breakdown.total);

        let post_update = if self.config.post_update_prediction {
            Some(self.predict(frame)?)
        } else {
            None
        };
        Ok(FrameOutput {
            disparity,
            loss: loss.breakdown,
            post_update,
            flagged,
        })
    }

    /// Processes `frames` in order, calling `callback` after each one.
    pub fn run<I, F>(&mut self, frames: I, mut callback: F) -> Result<SequenceReport>
    where
        I: IntoIterator<Item = StereoFrame>,
        F: FnMut(&FrameRecord<'_>),
    {
        let mut report = SequenceReport::default();
        for (index, frame) in frames.into_iter().enumerate() {
            let out = self.process_frame(&frame)?;
            let metrics = match (&frame.gt_disparity, &frame.gt_valid) {
                (Some(gt), Some(valid)) => compute_metrics(&out.disparity, gt, valid).ok(),
                (Some(gt), None) => compute_metrics(&out.disparity, gt, &Tensor::ones(gt.shape())).ok(),
                _ => None,
            };
            callback(&FrameRecord {
                index,
                frame: &frame,
                disparity: &out.disparity,
                loss: &out.loss,
                metrics: metrics.as_ref(),
                flagged: out.flagged,
            });
            report.rows.push(ReportRow {
                frame: index,
                loss: out.loss,
                metrics,
                flagged: out.flagged,
            });
        }
        Ok(report)
    }
}

/// What a [`run_sequence`] callback sees for each frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameRecord<'a> {
    pub index: usize,
    pub frame: &'a StereoFrame,
    pub disparity: &'a Tensor,
    pub loss: &'a LossBreakdown,
    pub metrics: Option<&'a MetricSet>,
    pub flagged: bool,
}

/// Fresh engine over a whole sequence.
pub fn run_sequence<I, F>(frames: I, config: EngineConfig, callback: F) -> Result<SequenceReport>
where
    I: IntoIterator<Item = StereoFrame>,
    F: FnMut(&FrameRecord<'_>),
{
    Engine::new(config)?.run(frames, callback)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub frame: usize,
    pub loss: LossBreakdown,
    pub metrics: Option<MetricSet>,
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub rows: Vec<ReportRow>,
}

impl SequenceReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss.total).collect()
    }

    pub fn metric_curve(&self) -> Vec<Option<MetricSet>> {
        self.rows.iter().map(|r| r.metrics).collect()
    }

    /// CSV with columns `frame,total_loss,data_loss,reg_loss`, followed by the
    /// metric columns when any frame had ground truth. An optional comment is
    /// written first as a `# ` line.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        let with_metrics = self.rows.iter().any(|r| r.metrics.is_some());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["frame", "total_loss", "data_loss", "reg_loss"];
        if with_metrics {
            header.extend(MetricSet::COLUMNS);
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.frame.to_string(),
                r.loss.total.to_string(),
                r.loss.data_term.to_string(),
                r.loss.reg_term.to_string(),
            ];
            if with_metrics {
                match &r.metrics {
                    Some(m) => rec.extend(m.values().iter().map(f64::to_string)),
                    None => rec.extend(std::iter::repeat_n(String::new(), MetricSet::COLUMNS.len())),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stereo_io::{gen_rds_sequence, RdsConfig};

    #[test]
    fn ablation_table() {
        assert_eq!(configure_ablation(4).unwrap(), Ablation { lstm_enabled: true, backprop_enabled: true });
        assert_eq!(configure_ablation(1).unwrap(), Ablation { lstm_enabled: false, backprop_enabled: false });
        let (a2, a3) = (configure_ablation(2).unwrap(), configure_ablation(3).unwrap());
        assert_ne!(a2.lstm_enabled, a3.lstm_enabled);
        assert_ne!(a2.backprop_enabled, a3.backprop_enabled);
        assert!(configure_ablation(0).is_err());
        assert!(configure_ablation(5).is_err());
    }

    fn step(p: f64, g: f64, acc: &mut Tensor) -> f64 {
        let mut param = Tensor::scalar(p);
        let grad = Tensor::scalar(g);
        rmsprop_step(&mut [&mut param], &[&grad], std::slice::from_mut(acc), &RmsProp::default()).unwrap();
        param.data()[0]
    }

    #[test]
    fn rmsprop_examples() {
        let mut acc = Tensor::scalar(0.0);
        assert_eq!(step(0.3, 0.0, &mut acc), 0.3);

        let mut acc = Tensor::scalar(0.0);
        let delta = step(0.0, 1.0, &mut acc);
        assert!((acc.data()[0] - 0.1).abs() < 1e-15);
        assert!((delta + 0.001 / (0.1f64.sqrt() + 1e-8)).abs() < 1e-15);
        assert!((delta + 3.1623e-3).abs() < 1e-7);

        // two steps, hand-unrolled
        let mut acc = Tensor::scalar(0.0);
        let p = step(step(0.5, 0.2, &mut acc), 0.2, &mut acc);
        let a1 = 0.1 * 0.04;
        let p1 = 0.5 - 0.001 * 0.2 / (f64::sqrt(a1) + 1e-8);
        let a2 = 0.9 * a1 + 0.1 * 0.04;
        let p2 = p1 - 0.001 * 0.2 / (f64::sqrt(a2) + 1e-8);
        assert!((p - p2).abs() < 1e-12);
        assert!((acc.data()[0] - a2).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_rejects_misaligned_lists() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut acc = vec![Tensor::zeros(&[2])];
        assert!(rmsprop_step(&mut [&mut p], &[&g], &mut acc, &RmsProp::default()).is_err());
        assert!(rmsprop_step(&mut [&mut p], &[], &mut acc, &RmsProp::default()).is_err());
    }

    fn tiny_config(kind: u8) -> EngineConfig {
        let mut c = EngineConfig::new(8, 16, 3);
        c.feature_net.num_layers = 2;
        c.feature_net.feature_dim = 2;
        c.match_net.channels = vec![2, 2];
        c.match_net.output_channels = 2;
        c.ablation = configure_ablation(kind).unwrap();
        c
    }

    fn frames(n: usize) -> Vec<StereoFrame> {
        gen_rds_sequence(RdsConfig::constant(8, 16, 2.0, 5), n).unwrap().collect()
    }

    #[test]
    fn frozen_network_is_pure() {
        let mut engine = Engine::new(tiny_config(1)).unwrap();
        let f = &frames(1)[0];
        let before = engine.parameter_vector();
        let a = engine.process_frame(f).unwrap();
        let b = engine.process_frame(f).unwrap();
        assert_eq!(a.disparity, b.disparity);
        assert_eq!(engine.parameter_vector(), before);
        assert_eq!(a.disparity.shape(), &[8, 16]);
        assert!(a.disparity.data().iter().all(|&d| (0.0..=3.0).contains(&d)));
    }

    #[test]
    fn backprop_changes_parameters_and_states_advance() {
        let mut engine = Engine::new(tiny_config(4)).unwrap();
        let before = engine.parameter_vector();
        let out = engine.process_frame(&frames(1)[0]).unwrap();
        assert!(!out.flagged);
        assert_ne!(engine.parameter_vector(), before);
        assert_eq!(engine.states().left.frame_index, 1);
        assert_eq!(engine.states().bottleneck.frame_index, 1);
        assert_eq!(engine.loss_history().len(), 1);
    }

    #[test]
    fn nan_frame_rolls_back() {
        let mut engine = Engine::new(tiny_config(4)).unwrap();
        let fs = frames(2);
        engine.process_frame(&fs[0]).unwrap();
        let params = engine.parameter_vector();
        let states = engine.states().clone();
        let mut bad = fs[1].clone();
        bad.left.data_mut()[7] = f64::NAN;
        let out = engine.process_frame(&bad).unwrap();
        assert!(out.flagged);
        assert_eq!(engine.parameter_vector(), params);
        assert_eq!(engine.states(), &states);
        assert!(!engine.process_frame(&fs[1]).unwrap().flagged);
    }

    #[test]
    fn size_change_rejected() {
        let mut engine = Engine::new(tiny_config(1)).unwrap();
        let other: Vec<StereoFrame> = gen_rds_sequence(RdsConfig::constant(8, 32, 2.0, 5), 1).unwrap().collect();
        let err = engine.run(frames(1).into_iter().chain(other), |_| {}).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { axis: 1, expected: 16, actual: 32, .. }));
    }

    #[test]
    fn report_bookkeeping_and_csv() {
        let empty = run_sequence(Vec::new(), tiny_config(1), |_| {}).unwrap();
        assert!(empty.is_empty());

        let mut seen = Vec::new();
        let report = run_sequence(frames(3), tiny_config(2), |r| seen.push(r.index)).unwrap();
        assert_eq!(seen, [0, 1, 2]);
        assert_eq!(report.loss_curve().len(), 3);
        assert!(report.metric_curve().iter().all(Option::is_some));

        let mut buf = Vec::new();
        report.write_csv(&mut buf, Some("test run")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# test run"));
        assert!(lines.next().unwrap().starts_with("frame,total_loss,data_loss,reg_loss,abs_rel"));
        assert_eq!(lines.count(), 3);
    }
}
