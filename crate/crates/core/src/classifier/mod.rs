//! A two-layer convolutional classifier with exact analytic gradients.
//!
//! Architecture (H = W = `image_side`, which must be a multiple of 4):
//!
//! ```text
//! conv 3x3x3 -> 8, pad 1 -> ReLU -> maxpool 2x2
//! conv 3x3x8 -> 16, pad 1 -> ReLU -> maxpool 2x2
//! flatten (16 * (H/4)^2) -> dense -> softmax
//! ```
//!
//! Activations are kept in (row, col, channel) order to match
//! [`ImageTensor`]. Convolution weights are laid out `[ky][kx][in][out]`
//! and the dense weights `[feature][class]`.

mod checkpoint;
mod layers;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{accuracy, fine_tune, predict, train, TrainConfig};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::prng::Prng;

pub const CONV1_FILTERS: usize = 8;
pub const CONV2_FILTERS: usize = 16;
pub const KERNEL: usize = 3;

/// The six parameter tensors of the network. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

impl Params {
    fn zeros(feature_dim: usize, class_count: usize) -> Self {
        Self {
            conv1_w: vec![0.0; KERNEL * KERNEL * CHANNELS * CONV1_FILTERS],
            conv1_b: vec![0.0; CONV1_FILTERS],
            conv2_w: vec![0.0; KERNEL * KERNEL * CONV1_FILTERS * CONV2_FILTERS],
            conv2_b: vec![0.0; CONV2_FILTERS],
            dense_w: vec![0.0; feature_dim * class_count],
            dense_b: vec![0.0; class_count],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b, &self.dense_w, &self.dense_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.dense_w,
            &mut self.dense_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter at a flat index running through the tensors in order.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    image_side: usize,
    class_count: usize,
    params: Params,
}

impl ClassifierModel {
    /// A model with every weight and bias zero.
    pub fn zeros(image_side: usize, class_count: usize) -> Result<Self> {
        if image_side < 4 || !image_side.is_multiple_of(4) {
            return Err(Error::invalid(format!("image_side {image_side} must be a positive multiple of 4")));
        }
        if class_count < 2 {
            return Err(Error::invalid("class_count must be at least 2"));
        }
        let feature_dim = CONV2_FILTERS * (image_side / 4) * (image_side / 4);
        Ok(Self { image_side, class_count, params: Params::zeros(feature_dim, class_count) })
    }

    /// He initialisation: weights ~ N(0, 2 / fan_in), biases zero.
    pub fn he_init(image_side: usize, class_count: usize, prng: &mut Prng) -> Result<Self> {
        let mut model = Self::zeros(image_side, class_count)?;
        let fans = [KERNEL * KERNEL * CHANNELS, KERNEL * KERNEL * CONV1_FILTERS, model.feature_dim()];
        let p = &mut model.params;
        for (weights, fan_in) in [&mut p.conv1_w, &mut p.conv2_w, &mut p.dense_w].into_iter().zip(fans) {
            let scale = (2.0 / fan_in as f64).sqrt();
            weights.iter_mut().for_each(|w| *w = scale * prng.normal());
        }
        Ok(model)
    }

    pub(crate) fn from_params(image_side: usize, class_count: usize, params: Params) -> Result<Self> {
        let template = Self::zeros(image_side, class_count)?;
        for (a, b) in template.params.tensors().iter().zip(params.tensors()) {
            if a.len() != b.len() {
                return Err(Error::invalid("parameter tensor size mismatch"));
            }
        }
        if !params.all_finite() {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Self { image_side, class_count, params })
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Length of the flattened pooled feature vector feeding the dense layer.
    pub fn feature_dim(&self) -> usize {
        CONV2_FILTERS * (self.image_side / 4) * (self.image_side / 4)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Shapes of the six tensors, in [`Params::tensors`] order.
    pub fn tensor_shapes(&self) -> [Vec<usize>; 6] {
        [
            vec![KERNEL, KERNEL, CHANNELS, CONV1_FILTERS],
            vec![CONV1_FILTERS],
            vec![KERNEL, KERNEL, CONV1_FILTERS, CONV2_FILTERS],
            vec![CONV2_FILTERS],
            vec![self.feature_dim(), self.class_count],
            vec![self.class_count],
        ]
    }

    fn check_input(&self, img: &ImageTensor) -> Result<()> {
        if img.height() != self.image_side || img.width() != self.image_side {
            return Err(Error::invalid(format!(
                "image is {}x{}, model expects {}x{}",
                img.height(),
                img.width(),
                self.image_side,
                self.image_side
            )));
        }
        Ok(())
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Index of the largest probability; ties go to the lowest index.
    pub fn class(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log softmax(logits)[label], computed stably.
fn log_prob(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[label] - max - lse
}

pub fn forward(model: &ClassifierModel, img: &ImageTensor) -> Result<Prediction> {
    model.check_input(img)?;
    let trace = layers::Trace::run(model, img.data());
    Ok(trace.prediction())
}

/// Activation pattern of a forward pass: which ReLUs fired and which element
/// won each max-pool window. Two inputs with equal signatures lie in the
/// same linear region of the network.
pub fn activation_signature(model: &ClassifierModel, img: &ImageTensor) -> Result<Vec<u32>> {
    model.check_input(img)?;
    Ok(layers::Trace::run(model, img.data()).signature())
}

/// Per-batch loss and gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub params: Params,
    /// d(loss)/d(pixel) for each input, same layout as the image data.
    pub inputs: Vec<Vec<f64>>,
}

/// Mean cross-entropy over `batch` with its exact gradients with respect to
/// every parameter and every input pixel.
pub fn loss_and_gradients(model: &ClassifierModel, batch: &[(ImageTensor, usize)]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut params = Params::zeros(model.feature_dim(), model.class_count);
    let mut inputs = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for (img, label) in batch {
        model.check_input(img)?;
        check_label(model, *label)?;
        let mut dx = vec![0.0; img.data().len()];
        loss += layers::sample_backward(model, img.data(), *label, Some(&mut params), Some(&mut dx));
        inputs.push(dx);
    }
    let n = batch.len() as f64;
    params.scale(1.0 / n);
    for dx in &mut inputs {
        dx.iter_mut().for_each(|v| *v /= n);
    }
    Ok(Gradients { loss: loss / n, params, inputs })
}

/// Cross-entropy of one sample and its gradient with respect to the pixels
/// only (parameter gradients are skipped).
pub fn input_gradient(model: &ClassifierModel, img: &ImageTensor, label: usize) -> Result<(f64, Vec<f64>)> {
    model.check_input(img)?;
    check_label(model, label)?;
    let mut dx = vec![0.0; img.data().len()];
    let loss = layers::sample_backward(model, img.data(), label, None, Some(&mut dx));
    Ok((loss, dx))
}

/// Gradient of one logit with respect to the input pixels.
pub fn logit_input_gradient(model: &ClassifierModel, img: &ImageTensor, class: usize) -> Result<Vec<f64>> {
    model.check_input(img)?;
    check_label(model, class)?;
    let trace = layers::Trace::run(model, img.data());
    let mut dlogits = vec![0.0; model.class_count];
    dlogits[class] = 1.0;
    let mut dx = vec![0.0; img.data().len()];
    layers::backward_from(model, &trace, img.data(), &dlogits, None, Some(&mut dx));
    Ok(dx)
}

/// Cross-entropy of one sample; matches the loss reported by
/// [`loss_and_gradients`] for a batch of one.
pub fn sample_loss(model: &ClassifierModel, img: &ImageTensor, label: usize) -> Result<f64> {
    model.check_input(img)?;
    check_label(model, label)?;
    let trace = layers::Trace::run(model, img.data());
    Ok(-log_prob(&trace.logits, label))
}

fn check_label(model: &ClassifierModel, label: usize) -> Result<()> {
    if label >= model.class_count {
        return Err(Error::invalid(format!("label {label} outside [0, {})", model.class_count)));
    }
    Ok(())
}
