//! Two-headed feedforward network and its multi-task training criteria.
//!
//! A fully connected trunk feeds a phone softmax head and a landmark softmax
//! head. For a frame with phone target `y` and landmark target `z` the
//! multi-task loss is
//!
//! ```text
//! L_x = -(1 - a) w_ph[y] ln P_ph[y] - a w_la[z] ln P_la[z]
//! ```
//!
//! with `a = alpha`, or `a = alpha * c_x` when per-frame detector confidences
//! are used. Batch losses are frame averages.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmarks::{ClassWeights, LandmarkClass};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input has {got} columns, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("{which} class weights have {got} entries, head has {expected} classes")]
    WeightLength {
        which: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("target {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("confidence {0} outside [0, 1]")]
    BadConfidence(f64),
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("batch is inconsistent: {0}")]
    BadBatch(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("no {0} labels to evaluate")]
    MissingLabels(Task),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Relu,
    Tanh,
}

impl Activation {
    fn id(self) -> u32 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Activation::Sigmoid),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Sigmoid => z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Affine layer `x W + b` with `W` stored as inputs x outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform in +/- sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-limit..limit));
        Self {
            weights,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights);
        z += &self.bias;
        z
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn param(&self, i: usize) -> f64 {
        let nw = self.weights.len();
        if i < nw {
            self.weights.as_slice().expect("standard layout")[i]
        } else {
            self.bias[i - nw]
        }
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weights.len();
        if i < nw {
            &mut self.weights.as_slice_mut().expect("standard layout")[i]
        } else {
            &mut self.bias[i - nw]
        }
    }

    fn scaled_add(&mut self, alpha: f64, other: &Dense) {
        self.weights.scaled_add(alpha, &other.weights);
        self.bias.scaled_add(alpha, &other.bias);
    }
}

/// Which head a label or metric refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Phone,
    Landmark,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Phone => "phone",
            Task::Landmark => "landmark",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MTLNet {
    pub hidden: Vec<Dense>,
    pub phone_head: Dense,
    pub landmark_head: Dense,
    pub activation: Activation,
}

impl MTLNet {
    /// Randomly initialized network (Glorot uniform, zero biases).
    pub fn new(
        input_dim: usize,
        hidden_sizes: &[usize],
        phone_classes: usize,
        landmark_classes: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::with_capacity(hidden_sizes.len());
        let mut width = input_dim;
        for &h in hidden_sizes {
            hidden.push(Dense::glorot(width, h, &mut rng));
            width = h;
        }
        Self {
            hidden,
            phone_head: Dense::glorot(width, phone_classes, &mut rng),
            landmark_head: Dense::glorot(width, landmark_classes, &mut rng),
            activation,
        }
    }

    pub fn zeros(
        input_dim: usize,
        hidden_sizes: &[usize],
        phone_classes: usize,
        landmark_classes: usize,
        activation: Activation,
    ) -> Self {
        let mut hidden = Vec::new();
        let mut width = input_dim;
        for &h in hidden_sizes {
            hidden.push(Dense::zeros(width, h));
            width = h;
        }
        Self {
            hidden,
            phone_head: Dense::zeros(width, phone_classes),
            landmark_head: Dense::zeros(width, landmark_classes),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.phone_head.inputs(), Dense::inputs)
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.hidden.iter().map(Dense::outputs).collect()
    }

    pub fn phone_classes(&self) -> usize {
        self.phone_head.outputs()
    }

    pub fn landmark_classes(&self) -> usize {
        self.landmark_head.outputs()
    }

    /// Layers in parameter order: trunk, phone head, landmark head.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden
            .iter()
            .chain([&self.phone_head, &self.landmark_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden
            .iter_mut()
            .chain([&mut self.phone_head, &mut self.landmark_head])
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite);
        }
        Ok(())
    }

    fn trunk(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let input = acts.last().map_or(x, |a: &Array2<f64>| a.view());
            let mut z = layer.forward(input);
            self.activation.apply(&mut z);
            acts.push(z);
        }
        acts
    }

    /// Posteriors of both heads, one row per frame.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(x)?;
        let acts = self.trunk(x);
        let top = acts.last().map_or(x, |a| a.view());
        Ok((
            softmax_rows(self.phone_head.forward(top)),
            softmax_rows(self.landmark_head.forward(top)),
        ))
    }

    /// Landmark-head posteriors only.
    pub fn landmark_posteriors(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let acts = self.trunk(x);
        let top = acts.last().map_or(x, |a| a.view());
        Ok(softmax_rows(self.landmark_head.forward(top)))
    }
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    logits
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MTLLossConfig {
    pub alpha: f64,
    #[serde(default)]
    pub phone_class_weights: Option<ClassWeights>,
    #[serde(default)]
    pub landmark_class_weights: Option<ClassWeights>,
    #[serde(default)]
    pub use_confidence: bool,
}

impl MTLLossConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            phone_class_weights: None,
            landmark_class_weights: None,
            use_confidence: false,
        }
    }

    pub fn with_confidence(mut self, on: bool) -> Self {
        self.use_confidence = on;
        self
    }
}

/// Frames with a phone target, an optional landmark target and a detector
/// confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Array2<f64>,
    pub phone: Vec<usize>,
    /// `None` masks the frame out of the landmark term.
    pub landmark: Vec<Option<usize>>,
    pub confidence: Vec<f64>,
}

impl LabeledBatch {
    pub fn new(x: Array2<f64>, phone: Vec<usize>, landmark: Vec<Option<usize>>) -> Self {
        let n = x.nrows();
        Self {
            x,
            phone,
            landmark,
            confidence: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.nrows();
        if self.phone.len() != n || self.landmark.len() != n || self.confidence.len() != n {
            return Err(NetError::BadBatch(format!(
                "{} rows, {} phone, {} landmark, {} confidence entries",
                n,
                self.phone.len(),
                self.landmark.len(),
                self.confidence.len()
            )));
        }
        Ok(())
    }

    pub fn has_landmarks(&self) -> bool {
        self.landmark.iter().any(Option::is_some)
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), indices),
            phone: indices.iter().map(|&i| self.phone[i]).collect(),
            landmark: indices.iter().map(|&i| self.landmark[i]).collect(),
            confidence: indices.iter().map(|&i| self.confidence[i]).collect(),
        }
    }

    pub fn concat(parts: &[LabeledBatch]) -> Self {
        let views: Vec<_> = parts.iter().map(|p| p.x.view()).collect();
        let dim = parts.first().map_or(0, |p| p.x.ncols());
        let x = if views.is_empty() {
            Array2::zeros((0, dim))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        };
        Self {
            x,
            phone: parts.iter().flat_map(|p| p.phone.iter().copied()).collect(),
            landmark: parts.iter().flat_map(|p| p.landmark.iter().copied()).collect(),
            confidence: parts.iter().flat_map(|p| p.confidence.iter().copied()).collect(),
        }
    }
}

const LOG_CLAMP: f64 = 1e-12;

fn weight_slice<'a>(
    w: &'a Option<ClassWeights>,
    classes: usize,
    which: &'static str,
) -> Result<Option<&'a [f64]>> {
    match w {
        Some(w) if w.len() != classes => Err(NetError::WeightLength {
            which,
            expected: classes,
            got: w.len(),
        }),
        Some(w) => Ok(Some(&w.w)),
        None => Ok(None),
    }
}

/// Per-frame task coefficients: `(phone, landmark)`.
fn frame_coefficients(batch: &LabeledBatch, cfg: &MTLLossConfig, confident: bool) -> Result<Vec<(f64, f64)>> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(NetError::BadAlpha(cfg.alpha));
    }
    batch.validate()?;
    let a = cfg.alpha;
    (0..batch.len())
        .map(|i| {
            if confident {
                let c = batch.confidence[i];
                if !(0.0..=1.0).contains(&c) {
                    return Err(NetError::BadConfidence(c));
                }
                // a frame without a landmark target behaves as c = 0
                let c = if batch.landmark[i].is_some() { c } else { 0.0 };
                Ok((1.0 - a * c, a * c))
            } else {
                let la = if batch.landmark[i].is_some() { a } else { 0.0 };
                Ok((1.0 - a, la))
            }
        })
        .collect()
}

fn weighted_loss(
    p_ph: &Array2<f64>,
    p_la: &Array2<f64>,
    batch: &LabeledBatch,
    cfg: &MTLLossConfig,
    confident: bool,
) -> Result<f64> {
    let coef = frame_coefficients(batch, cfg, confident)?;
    let (c_ph, c_la) = (p_ph.ncols(), p_la.ncols());
    let w_ph = weight_slice(&cfg.phone_class_weights, c_ph, "phone")?;
    let w_la = weight_slice(&cfg.landmark_class_weights, c_la, "landmark")?;
    if p_ph.nrows() != batch.len() || p_la.nrows() != batch.len() {
        return Err(NetError::BadBatch("posterior rows differ from batch size".into()));
    }
    let mut total = 0.0;
    for (i, &(a_ph, a_la)) in coef.iter().enumerate() {
        let y = batch.phone[i];
        if y >= c_ph {
            return Err(NetError::TargetOutOfRange { index: y, classes: c_ph });
        }
        if a_ph != 0.0 {
            let w = w_ph.map_or(1.0, |w| w[y]);
            total -= a_ph * w * p_ph[[i, y]].max(LOG_CLAMP).ln();
        }
        if let Some(z) = batch.landmark[i] {
            if z >= c_la {
                return Err(NetError::TargetOutOfRange { index: z, classes: c_la });
            }
            if a_la != 0.0 {
                let w = w_la.map_or(1.0, |w| w[z]);
                total -= a_la * w * p_la[[i, z]].max(LOG_CLAMP).ln();
            }
        }
    }
    Ok(if batch.is_empty() { 0.0 } else { total / batch.len() as f64 })
}

/// Frame-averaged multi-task cross-entropy with a fixed trade-off `alpha`.
pub fn mtl_loss(p_ph: &Array2<f64>, p_la: &Array2<f64>, batch: &LabeledBatch, cfg: &MTLLossConfig) -> Result<f64> {
    weighted_loss(p_ph, p_la, batch, cfg, false)
}

/// Multi-task cross-entropy where each frame's trade-off is `alpha * c_x`.
pub fn mtl_loss_confident(
    p_ph: &Array2<f64>,
    p_la: &Array2<f64>,
    batch: &LabeledBatch,
    cfg: &MTLLossConfig,
) -> Result<f64> {
    weighted_loss(p_ph, p_la, batch, cfg, true)
}

/// Loss selected by `cfg.use_confidence`.
pub fn loss(net: &MTLNet, batch: &LabeledBatch, cfg: &MTLLossConfig) -> Result<f64> {
    let (p_ph, p_la) = net.forward(batch.x.view())?;
    weighted_loss(&p_ph, &p_la, batch, cfg, cfg.use_confidence)
}

/// Parameter gradients laid out like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn hidden(&self) -> &[Dense] {
        &self.layers[..self.layers.len() - 2]
    }

    pub fn phone_head(&self) -> &Dense {
        &self.layers[self.layers.len() - 2]
    }

    pub fn landmark_head(&self) -> &Dense {
        &self.layers[self.layers.len() - 1]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// Loss value and exact gradients by reverse accumulation. The loss is the
/// one selected by `cfg.use_confidence`.
pub fn backward(net: &MTLNet, batch: &LabeledBatch, cfg: &MTLLossConfig) -> Result<(f64, Gradients)> {
    net.check_input(batch.x.view())?;
    let acts = net.trunk(batch.x.view());
    let top = acts.last().map_or(batch.x.view(), |a| a.view());
    let p_ph = softmax_rows(net.phone_head.forward(top));
    let p_la = softmax_rows(net.landmark_head.forward(top));
    let value = weighted_loss(&p_ph, &p_la, batch, cfg, cfg.use_confidence)?;
    let coef = frame_coefficients(batch, cfg, cfg.use_confidence)?;
    let w_ph = weight_slice(&cfg.phone_class_weights, p_ph.ncols(), "phone")?;
    let w_la = weight_slice(&cfg.landmark_class_weights, p_la.ncols(), "landmark")?;
    let inv_b = if batch.is_empty() { 0.0 } else { 1.0 / batch.len() as f64 };

    // d loss / d logits = scale * (P - onehot)
    let mut d_ph = p_ph;
    let mut d_la = p_la;
    for (i, &(a_ph, a_la)) in coef.iter().enumerate() {
        let y = batch.phone[i];
        let scale = a_ph * w_ph.map_or(1.0, |w| w[y]) * inv_b;
        let mut row = d_ph.row_mut(i);
        if scale == 0.0 {
            row.fill(0.0);
        } else {
            row[y] -= 1.0;
            row *= scale;
        }
        let mut row = d_la.row_mut(i);
        match batch.landmark[i] {
            Some(z) if a_la != 0.0 => {
                let scale = a_la * w_la.map_or(1.0, |w| w[z]) * inv_b;
                row[z] -= 1.0;
                row *= scale;
            }
            _ => row.fill(0.0),
        }
    }

    let head_grad = |d: &Array2<f64>| Dense {
        weights: top.t().dot(d),
        bias: d.sum_axis(Axis(0)),
    };
    let g_ph = head_grad(&d_ph);
    let g_la = head_grad(&d_la);

    let mut grads = vec![Dense::zeros(0, 0); net.hidden.len()];
    if !net.hidden.is_empty() {
        let mut delta = d_ph.dot(&net.phone_head.weights.t()) + d_la.dot(&net.landmark_head.weights.t());
        for l in (0..net.hidden.len()).rev() {
            Zip::from(&mut delta)
                .and(&acts[l])
                .for_each(|d, &a| *d *= net.activation.derivative_from_output(a));
            let input = if l == 0 { batch.x.view() } else { acts[l - 1].view() };
            grads[l] = Dense {
                weights: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            };
            if l > 0 {
                delta = delta.dot(&net.hidden[l].weights.t());
            }
        }
    }
    grads.push(g_ph);
    grads.push(g_la);
    Ok((value, Gradients { layers: grads }))
}

/// Largest relative disagreement between analytic gradients and central
/// finite differences, `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`. Checks every
/// parameter when there are at most `max_params`, otherwise a seeded random
/// subset of that size.
pub fn grad_check(
    net: &MTLNet,
    batch: &LabeledBatch,
    cfg: &MTLLossConfig,
    eps: f64,
    max_params: usize,
    seed: u64,
) -> Result<f64> {
    let (_, grads) = backward(net, batch, cfg)?;
    let analytic = grads.flatten();
    let total = analytic.len();
    let mut indices: Vec<usize> = (0..total).collect();
    if total > max_params {
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        indices.truncate(max_params);
    }
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for &flat in &indices {
        let (layer, offset) = locate(net, flat);
        let original = net.layers().nth(layer).expect("layer").param(offset);
        let mut eval = |v: f64| -> Result<f64> {
            *probe.layers_mut().nth(layer).expect("layer").param_mut(offset) = v;
            loss(&probe, batch, cfg)
        };
        let plus = eval(original + eps)?;
        let minus = eval(original - eps)?;
        eval(original)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn locate(net: &MTLNet, mut flat: usize) -> (usize, usize) {
    for (i, layer) in net.layers().enumerate() {
        let n = layer.param_count();
        if flat < n {
            return (i, flat);
        }
        flat -= n;
    }
    panic!("parameter index out of range");
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrHalving {
    /// Relative dev-error improvement that counts as progress.
    pub min_improvement: f64,
    /// Epochs without progress before the learning rate is halved.
    pub patience: usize,
}

impl Default for LrHalving {
    fn default() -> Self {
        Self {
            min_improvement: 0.005,
            patience: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_halving: LrHalving,
    /// Return the parameters of the epoch with the lowest dev phone error.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            momentum: 0.9,
            batch_size: 128,
            epochs: 15,
            seed: 1,
            lr_halving: LrHalving::default(),
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(NetError::BadConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(NetError::BadConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NetError::BadConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_phone_fer: f64,
    /// NaN when the dev set has no landmark labels.
    pub dev_landmark_fer: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_phone_fer,dev_landmark_fer,lr\n");
        for r in &self.epochs {
            let lm = if r.dev_landmark_fer.is_nan() {
                String::new()
            } else {
                format!("{:.6}", r.dev_landmark_fer)
            };
            out.push_str(&format!(
                "{},{:.8},{:.6},{},{}\n",
                r.epoch, r.train_loss, r.dev_phone_fer, lm, r.lr
            ));
        }
        out
    }

    pub fn best_dev_phone_fer(&self) -> Option<f64> {
        self.epochs
            .iter()
            .map(|r| r.dev_phone_fer)
            .min_by(f64::total_cmp)
    }
}

/// Minibatch SGD with momentum. Shuffling is seeded per epoch; the learning
/// rate halves after `patience` epochs without dev phone-error progress.
pub fn train(
    mut net: MTLNet,
    train_set: &LabeledBatch,
    dev_set: &LabeledBatch,
    tcfg: &TrainConfig,
    lcfg: &MTLLossConfig,
) -> Result<(MTLNet, History)> {
    tcfg.validate()?;
    train_set.validate()?;
    dev_set.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(NetError::BadBatch("train and dev sets must be nonempty".into()));
    }
    net.check_input(train_set.x.view())?;
    let mut history = History::default();
    if tcfg.epochs == 0 {
        return Ok((net, history));
    }
    let mut velocity: Vec<Dense> = net
        .layers()
        .map(|l| Dense::zeros(l.inputs(), l.outputs()))
        .collect();
    let mut lr = tcfg.learning_rate;
    let mut best_fer = f64::INFINITY;
    let mut best_net = net.clone();
    let mut reference_fer = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let dev_has_landmarks = dev_set.has_landmarks();
    for epoch in 1..=tcfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch = train_set.select(chunk);
            let (value, grads) = backward(&net, &batch, lcfg)?;
            if !value.is_finite() {
                return Err(NetError::Diverged { epoch, loss: value });
            }
            loss_sum += value * chunk.len() as f64;
            for (v, g) in velocity.iter_mut().zip(&grads.layers) {
                v.weights *= tcfg.momentum;
                v.bias *= tcfg.momentum;
                v.scaled_add(-lr, g);
            }
            for (p, v) in net.layers_mut().zip(&velocity) {
                p.scaled_add(1.0, v);
            }
        }
        let train_loss = loss_sum / train_set.len() as f64;
        if !train_loss.is_finite() || !net.is_finite() {
            return Err(NetError::Diverged { epoch, loss: train_loss });
        }
        let dev_phone_fer = frame_error(&net, dev_set, Task::Phone)?.rate;
        let dev_landmark_fer = if dev_has_landmarks {
            frame_error(&net, dev_set, Task::Landmark)?.rate
        } else {
            f64::NAN
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_phone_fer,
            dev_landmark_fer,
            lr,
        });
        if dev_phone_fer < best_fer {
            best_fer = dev_phone_fer;
            best_net = net.clone();
        }
        if dev_phone_fer < reference_fer * (1.0 - tcfg.lr_halving.min_improvement) {
            reference_fer = dev_phone_fer;
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.lr_halving.patience.max(1) {
                lr *= 0.5;
                stale = 0;
                reference_fer = reference_fer.min(dev_phone_fer);
            }
        }
    }
    Ok((if tcfg.keep_best { best_net } else { net }, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameErrorReport {
    pub rate: f64,
    pub frames: usize,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

const EVAL_CHUNK: usize = 4096;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame error rate (1 - accuracy of the argmax) for one head, with the
/// confusion matrix. Landmark evaluation skips masked frames.
pub fn frame_error(net: &MTLNet, eval: &LabeledBatch, task: Task) -> Result<FrameErrorReport> {
    eval.validate()?;
    let classes = match task {
        Task::Phone => net.phone_classes(),
        Task::Landmark => net.landmark_classes(),
    };
    let truth: Vec<Option<usize>> = match task {
        Task::Phone => eval.phone.iter().map(|&p| Some(p)).collect(),
        Task::Landmark => eval.landmark.clone(),
    };
    if !truth.iter().any(Option::is_some) {
        return Err(NetError::MissingLabels(task));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut errors = 0usize;
    let mut frames = 0usize;
    for start in (0..eval.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(eval.len());
        let x = eval.x.slice(s![start..end, ..]);
        let (p_ph, p_la) = net.forward(x)?;
        let probs = match task {
            Task::Phone => p_ph,
            Task::Landmark => p_la,
        };
        for (row, t) in probs.rows().into_iter().zip(&truth[start..end]) {
            let Some(t) = *t else { continue };
            if t >= classes {
                return Err(NetError::TargetOutOfRange { index: t, classes });
            }
            let pred = argmax(row);
            confusion[t][pred] += 1;
            frames += 1;
            if pred != t {
                errors += 1;
            }
        }
    }
    Ok(FrameErrorReport {
        rate: errors as f64 / frames as f64,
        frames,
        confusion,
    })
}

pub const MODEL_MAGIC: &[u8; 4] = b"LMNN";
pub const MODEL_VERSION: u32 = 1;

/// Serializes to the LMNN layout: magic, u32 version, u32 activation id,
/// u32 input dim, u32 hidden count, one u32 per hidden width, u32 phone
/// classes, u32 landmark classes, then every layer's weights (inputs x
/// outputs, row-major) followed by its bias as little-endian f64, in the order
/// trunk, phone head, landmark head.
pub fn encode_model(net: &MTLNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    let put = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    put(MODEL_VERSION, &mut out);
    put(net.activation.id(), &mut out);
    put(net.input_dim() as u32, &mut out);
    put(net.hidden.len() as u32, &mut out);
    for h in net.hidden_sizes() {
        put(h as u32, &mut out);
    }
    put(net.phone_classes() as u32, &mut out);
    put(net.landmark_classes() as u32, &mut out);
    for layer in net.layers() {
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(mut bytes: &[u8]) -> Result<MTLNet> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(NetError::Format("bad magic".into()));
    }
    fn u32_of(b: &mut &[u8]) -> Result<u32> {
        let mut w = [0u8; 4];
        b.read_exact(&mut w)?;
        Ok(u32::from_le_bytes(w))
    }
    let version = u32_of(&mut bytes)?;
    if version != MODEL_VERSION {
        return Err(NetError::Format(format!("unsupported version {version}")));
    }
    let activation = Activation::from_id(u32_of(&mut bytes)?)
        .ok_or_else(|| NetError::Format("unknown activation id".into()))?;
    let input_dim = u32_of(&mut bytes)? as usize;
    let n_hidden = u32_of(&mut bytes)? as usize;
    if n_hidden > 1024 {
        return Err(NetError::Format("implausible hidden layer count".into()));
    }
    let hidden: Vec<usize> = (0..n_hidden)
        .map(|_| u32_of(&mut bytes).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let c_ph = u32_of(&mut bytes)? as usize;
    let c_la = u32_of(&mut bytes)? as usize;
    let mut net = MTLNet::zeros(input_dim, &hidden, c_ph, c_la, activation);
    let expected = 8 * net.param_count();
    if bytes.len() != expected {
        return Err(NetError::Format(format!(
            "parameter block has {} bytes, architecture needs {expected}",
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for layer in net.layers_mut() {
        for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *v = values.next().expect("length checked");
        }
    }
    Ok(net)
}

pub fn save_model(path: impl AsRef<Path>, net: &MTLNet) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_model(net))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MTLNet> {
    decode_model(&std::fs::read(path)?)
}

/// Number of landmark classes used by default networks.
pub const LANDMARK_CLASSES: usize = LandmarkClass::COUNT;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand_distr::StandardNormal;

    fn random_batch(n: usize, d: usize, c_ph: usize, c_la: usize, seed: u64) -> LabeledBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let phone = (0..n).map(|_| rng.random_range(0..c_ph)).collect();
        let landmark = (0..n)
            .map(|i| if i % 3 == 2 { None } else { Some(rng.random_range(0..c_la)) })
            .collect();
        let mut b = LabeledBatch::new(x, phone, landmark);
        b.confidence = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        b
    }

    fn single_frame() -> (Array2<f64>, Array2<f64>, LabeledBatch) {
        let p_ph = Array2::from_shape_vec((1, 2), vec![0.3, 0.7]).unwrap();
        let p_la = Array2::from_shape_vec((1, 2), vec![0.6, 0.4]).unwrap();
        let b = LabeledBatch::new(Array2::zeros((1, 1)), vec![1], vec![Some(0)]);
        (p_ph, p_la, b)
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = MTLNet::zeros(5, &[4, 3], 7, 9, Activation::Sigmoid);
        let x = Array2::from_elem((3, 5), 0.7);
        let (p_ph, p_la) = net.forward(x.view()).unwrap();
        assert!(p_ph.iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-15));
        assert!(p_la.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_stable() {
        let logits = Array2::from_shape_vec((1, 3), vec![50.0, 0.0, -3.0]).unwrap();
        let p = softmax_rows(logits);
        let exact = 1.0 / (1.0 + (-50f64).exp() + (-53f64).exp());
        assert!((p[[0, 0]] - exact).abs() < 1e-15);
        assert!((p[[0, 0]] - 1.0).abs() < 1e-9);
        let p = softmax_rows(Array2::from_shape_vec((1, 2), vec![1000.0, 999.0]).unwrap());
        assert!(p.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = MTLNet::new(4, &[3], 2, 9, Activation::Sigmoid, 1);
        assert!(matches!(
            net.forward(Array2::zeros((2, 5)).view()),
            Err(NetError::DimensionMismatch { expected: 4, got: 5 })
        ));
        let mut x = Array2::zeros((2, 4));
        x[[1, 1]] = f64::NAN;
        assert!(matches!(net.forward(x.view()), Err(NetError::NonFinite)));
    }

    #[test]
    fn worked_single_frame_loss() {
        let (p_ph, p_la, b) = single_frame();
        let l = mtl_loss(&p_ph, &p_la, &b, &MTLLossConfig::new(0.2)).unwrap();
        let hand = -(0.8 * 0.7f64.ln() + 0.2 * 0.6f64.ln());
        assert!((l - hand).abs() < 1e-15);
        assert!((l - 0.38750).abs() < 1e-5);
    }

    #[test]
    fn confident_single_frame() {
        let (p_ph, p_la, mut b) = single_frame();
        b.confidence = vec![0.5];
        let cfg = MTLLossConfig::new(0.2).with_confidence(true);
        let l = mtl_loss_confident(&p_ph, &p_la, &b, &cfg).unwrap();
        // effective weights (1 - 0.2 * 0.5, 0.2 * 0.5) = (0.9, 0.1)
        let hand = -(0.9 * 0.7f64.ln() + 0.1 * 0.6f64.ln());
        assert!((l - hand).abs() < 1e-15);
        b.confidence = vec![1.5];
        assert!(matches!(mtl_loss_confident(&p_ph, &p_la, &b, &cfg), Err(NetError::BadConfidence(_))));
    }

    #[test]
    fn loss_reductions() {
        let net = MTLNet::new(6, &[8], 5, 9, Activation::Sigmoid, 3);
        let b = random_batch(20, 6, 5, 9, 4);
        let (p_ph, p_la) = net.forward(b.x.view()).unwrap();
        let phone_only: f64 = (0..b.len()).map(|i| -p_ph[[i, b.phone[i]]].ln()).sum::<f64>() / b.len() as f64;
        let lm_only: f64 = (0..b.len())
            .filter_map(|i| b.landmark[i].map(|z| -p_la[[i, z]].ln()))
            .sum::<f64>()
            / b.len() as f64;
        let at = |a: f64| mtl_loss(&p_ph, &p_la, &b, &MTLLossConfig::new(a)).unwrap();
        assert!((at(0.0) - phone_only).abs() < 1e-12);
        assert!((at(1.0) - lm_only).abs() < 1e-12);
        // linear in alpha
        for a in [0.1, 0.37, 0.8] {
            assert!((at(a) - ((1.0 - a) * at(0.0) + a * at(1.0))).abs() < 1e-12);
        }
        // with every frame labeled, c = 1 reproduces the fixed-alpha loss
        let mut ones = b.clone();
        ones.landmark = ones.phone.iter().map(|&p| Some(p % 9)).collect();
        ones.confidence.fill(1.0);
        let cfg = MTLLossConfig::new(0.3);
        let eq2 = mtl_loss_confident(&p_ph, &p_la, &ones, &cfg).unwrap();
        assert!((eq2 - mtl_loss(&p_ph, &p_la, &ones, &cfg).unwrap()).abs() <= 1e-12);
        let mut zeros = b.clone();
        zeros.confidence.fill(0.0);
        let eq2 = mtl_loss_confident(&p_ph, &p_la, &zeros, &cfg).unwrap();
        assert!((eq2 - phone_only).abs() <= 1e-12);
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let p_ph = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p_la = Array2::from_shape_vec((2, 3), vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let b = LabeledBatch::new(Array2::zeros((2, 1)), vec![0, 1], vec![Some(1), Some(2)]);
        assert!(mtl_loss(&p_ph, &p_la, &b, &MTLLossConfig::new(0.4)).unwrap() <= 1e-10);
    }

    #[test]
    fn weight_length_mismatch() {
        let (p_ph, p_la, b) = single_frame();
        let mut cfg = MTLLossConfig::new(0.2);
        cfg.landmark_class_weights = Some(ClassWeights::unit(9));
        assert!(matches!(mtl_loss(&p_ph, &p_la, &b, &cfg), Err(NetError::WeightLength { .. })));
    }

    #[test]
    fn alpha_zero_leaves_landmark_head_untouched() {
        let net = MTLNet::new(6, &[8, 8], 5, 9, Activation::Sigmoid, 3);
        let b = random_batch(16, 6, 5, 9, 5);
        let (_, g) = backward(&net, &b, &MTLLossConfig::new(0.0)).unwrap();
        assert!(g.landmark_head().weights.iter().all(|&v| v == 0.0));
        assert!(g.landmark_head().bias.iter().all(|&v| v == 0.0));
        assert!(g.phone_head().weights.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn duplicating_the_batch_keeps_gradients() {
        let net = MTLNet::new(6, &[8], 5, 9, Activation::Tanh, 3);
        let b = random_batch(10, 6, 5, 9, 6);
        let doubled = LabeledBatch::concat(&[b.clone(), b.clone()]);
        let cfg = MTLLossConfig::new(0.3).with_confidence(true);
        let (la, ga) = backward(&net, &b, &cfg).unwrap();
        let (lb, gb) = backward(&net, &doubled, &cfg).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for (x, y) in ga.flatten().iter().zip(gb.flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = MTLNet::new(5, &[16, 16], 4, 9, Activation::Sigmoid, 7);
        let b = random_batch(8, 5, 4, 9, 8);
        let mut cfg = MTLLossConfig::new(0.3);
        let err = grad_check(&net, &b, &cfg, 1e-4, usize::MAX, 0).unwrap();
        assert!(err < 1e-5, "{err}");
        cfg.use_confidence = true;
        cfg.phone_class_weights = Some(ClassWeights::inverse_support(&[3, 1, 2, 2]).unwrap());
        cfg.landmark_class_weights =
            Some(ClassWeights::inverse_support(&[10, 1, 2, 3, 1, 1, 2, 1, 4]).unwrap());
        let err = grad_check(&net, &b, &cfg, 1e-4, usize::MAX, 0).unwrap();
        assert!(err < 1e-5, "{err}");
        let tanh = MTLNet::new(5, &[16], 4, 9, Activation::Tanh, 9);
        assert!(grad_check(&tanh, &b, &cfg, 1e-4, 200, 3).unwrap() < 1e-5);
    }

    #[test]
    fn confidence_zero_matches_unlabeled_gradient() {
        let net = MTLNet::new(5, &[8], 4, 9, Activation::Sigmoid, 2);
        let mut b = random_batch(6, 5, 4, 9, 3);
        b.landmark = vec![Some(1); 6];
        b.confidence[2] = 0.0;
        let mut masked = b.clone();
        masked.landmark[2] = None;
        let cfg = MTLLossConfig::new(0.4).with_confidence(true);
        let (_, a) = backward(&net, &b, &cfg).unwrap();
        let (_, m) = backward(&net, &masked, &cfg).unwrap();
        assert_eq!(a.flatten(), m.flatten());
    }

    #[test]
    fn frame_error_basics() {
        // A net whose phone head copies the input one-hot.
        let mut net = MTLNet::zeros(3, &[], 3, 9, Activation::Sigmoid);
        net.phone_head.weights = Array2::eye(3) * 10.0;
        let x = Array2::from_shape_vec((4, 3), vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 0., 0.]).unwrap();
        let b = LabeledBatch::new(x.clone(), vec![0, 1, 2, 0], vec![None; 4]);
        let r = frame_error(&net, &b, Task::Phone).unwrap();
        assert_eq!(r.rate, 0.0);
        assert_eq!(r.confusion[0][0], 2);
        let supports: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(supports, vec![2, 1, 1]);
        assert!(matches!(frame_error(&net, &b, Task::Landmark), Err(NetError::MissingLabels(Task::Landmark))));
        let wrong = LabeledBatch::new(x, vec![1, 1, 2, 2], vec![None; 4]);
        assert_eq!(frame_error(&net, &wrong, Task::Phone).unwrap().rate, 0.5);
    }

    #[test]
    fn random_predictor_error_rate() {
        // Random weights on random inputs against balanced random labels.
        let c = 5;
        let n = 12_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let net = MTLNet::new(4, &[6], c, 9, Activation::Sigmoid, 12);
        let x = Array2::from_shape_fn((n, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let phone = (0..n).map(|i| i % c).collect::<Vec<_>>();
        let b = LabeledBatch::new(x, phone, vec![None; n]);
        let r = frame_error(&net, &b, Task::Phone).unwrap();
        assert!((r.rate - (1.0 - 1.0 / c as f64)).abs() < 0.02, "{}", r.rate);
    }

    #[test]
    fn training_separates_clean_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let centers: Vec<Vec<f64>> = (0..c).map(|_| (0..6).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect()).collect();
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let phone: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let x = Array2::from_shape_fn((n, 6), |(i, j)| centers[phone[i]][j] + 1e-3 * rng.sample::<f64, _>(StandardNormal));
            let landmark = phone.iter().map(|&p| Some(p % 2)).collect();
            LabeledBatch::new(x, phone, landmark)
        };
        let tr = make(800, &mut rng);
        let dev = make(200, &mut rng);
        let net = MTLNet::new(6, &[16], c, 9, Activation::Sigmoid, 1);
        let tcfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
        let (net, hist) = train(net, &tr, &dev, &tcfg, &MTLLossConfig::new(0.2)).unwrap();
        assert_eq!(hist.epochs.len(), 10);
        assert!(frame_error(&net, &dev, Task::Phone).unwrap().rate < 0.01);
        // deterministic
        let net2 = MTLNet::new(6, &[16], c, 9, Activation::Sigmoid, 1);
        let (again, hist2) = train(net2, &tr, &dev, &tcfg, &MTLLossConfig::new(0.2)).unwrap();
        assert_eq!(hist, hist2);
        assert_eq!(net, again);
    }

    #[test]
    fn zero_epochs_returns_initial_net() {
        let net = MTLNet::new(3, &[4], 2, 9, Activation::Sigmoid, 1);
        let b = random_batch(10, 3, 2, 9, 1);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (out, hist) = train(net.clone(), &b, &b, &cfg, &MTLLossConfig::new(0.2)).unwrap();
        assert_eq!(out, net);
        assert!(hist.epochs.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let net = MTLNet::new(3, &[4], 2, 9, Activation::Relu, 1);
        let mut b = random_batch(64, 3, 2, 9, 1);
        b.x.mapv_inplace(|v| v * 1e150);
        let cfg = TrainConfig { learning_rate: 1e10, epochs: 3, ..TrainConfig::default() };
        let err = train(net, &b, &b, &cfg, &MTLLossConfig::new(0.2)).unwrap_err();
        assert!(matches!(err, NetError::Diverged { .. }), "{err}");
    }

    #[test]
    fn model_file_round_trip() {
        let net = MTLNet::new(7, &[5, 4], 3, 9, Activation::Tanh, 8);
        let bytes = encode_model(&net);
        assert_eq!(&bytes[..4], b"LMNN");
        assert_eq!(decode_model(&bytes).unwrap(), net);
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        let flat = MTLNet::new(7, &[], 3, 9, Activation::Relu, 8);
        assert_eq!(decode_model(&encode_model(&flat)).unwrap(), flat);
    }

    #[test]
    fn history_csv_header() {
        let h = History {
            epochs: vec![EpochRecord { epoch: 1, train_loss: 1.5, dev_phone_fer: 0.25, dev_landmark_fer: f64::NAN, lr: 0.5 }],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,train_loss,dev_phone_fer,dev_landmark_fer,lr\n"));
        assert!(csv.contains("1,1.50000000,0.250000,,0.5"));
    }

    proptest! {
        #[test]
        fn heads_are_normalized(seed in any::<u64>(), scale in 0.1f64..30.0) {
            let net = MTLNet::new(4, &[6], 5, 9, Activation::Sigmoid, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let x = Array2::from_shape_fn((7, 4), |_| scale * rng.sample::<f64, _>(StandardNormal));
            let (p_ph, p_la) = net.forward(x.view()).unwrap();
            for p in [p_ph, p_la] {
                for row in p.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|&v| v > 0.0));
                }
            }
        }
    }
}
