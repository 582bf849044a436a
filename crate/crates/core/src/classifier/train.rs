use serde::{Deserialize, Serialize};

use super::{check_label, layers, ClassifierModel, Params};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabeledDataset};
use crate::prng::Prng;

/// Mini-batch SGD with momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, learning_rate: 0.05, momentum: 0.9, seed: 42 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Trains a fresh He-initialised model on `dataset`. All randomness
/// (initialisation and per-epoch shuffles) comes from `cfg.seed`.
///
/// Returns the model and the mean training loss of each epoch.
pub fn train(dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<(ClassifierModel, Vec<f64>)> {
    cfg.validate()?;
    let (h, w) = dataset.image_dims().ok_or_else(|| Error::invalid("cannot train on an empty dataset"))?;
    if h != w {
        return Err(Error::invalid("classifier expects square images"));
    }
    let mut prng = Prng::new(cfg.seed);
    let model = ClassifierModel::he_init(h, dataset.class_count(), &mut prng)?;
    fit(model, dataset, cfg, &mut prng)
}

/// Continues training an existing model (no re-initialisation).
pub fn fine_tune(
    model: ClassifierModel,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    cfg.validate()?;
    let mut prng = Prng::new(cfg.seed);
    fit(model, dataset, cfg, &mut prng)
}

fn fit(
    mut model: ClassifierModel,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    prng: &mut Prng,
) -> Result<(ClassifierModel, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    for (img, label) in dataset.items() {
        model.check_input(img)?;
        check_label(&model, *label)?;
    }

    let mut velocity = Params::zeros(model.feature_dim(), model.class_count);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        prng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Params::zeros(model.feature_dim(), model.class_count);
            for &i in batch {
                let (img, label) = &dataset.items()[i];
                epoch_loss += layers::sample_backward(&model, img.data(), *label, Some(&mut grads), None);
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for ((p, v), g) in model.params.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads.tensors()) {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = cfg.momentum * *vi - scale * gi;
                    *pi += *vi;
                }
            }
        }
        let mean = epoch_loss / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::invalid("training diverged (non-finite loss)"));
        }
        history.push(mean);
    }
    Ok((model, history))
}

/// Predicted class of one image (lowest index wins ties).
pub fn predict(model: &ClassifierModel, img: &ImageTensor) -> Result<usize> {
    Ok(super::forward(model, img)?.class())
}

/// Fraction of items whose predicted class equals the label.
pub fn accuracy(model: &ClassifierModel, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let mut correct = 0usize;
    for (img, label) in dataset.items() {
        if predict(model, img)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::gen_shapes_dataset;

    fn small_cfg() -> TrainConfig {
        TrainConfig { epochs: 3, batch_size: 8, learning_rate: 0.05, momentum: 0.9, seed: 3 }
    }

    #[test]
    fn history_length_and_determinism() {
        let ds = gen_shapes_dataset(1, 40, 16).unwrap();
        let (a, ha) = train(&ds, &small_cfg()).unwrap();
        let (b, hb) = train(&ds, &small_cfg()).unwrap();
        assert_eq!(ha.len(), 3);
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config() {
        let ds = gen_shapes_dataset(1, 10, 16).unwrap();
        let mut cfg = small_cfg();
        cfg.epochs = 0;
        assert!(train(&ds, &cfg).is_err());
        let mut cfg = small_cfg();
        cfg.momentum = 1.0;
        assert!(train(&ds, &cfg).is_err());
    }

    #[test]
    fn accuracy_counts() {
        // Bias-only model always predicts class 2.
        let mut model = ClassifierModel::zeros(16, 5).unwrap();
        model.params_mut().dense_b[2] = 1.0;
        let img = ImageTensor::filled(16, 16, 0.5);
        let ds = LabeledDataset::new(vec![(img.clone(), 2), (img.clone(), 0), (img.clone(), 1), (img.clone(), 4)], 5)
            .unwrap();
        assert_eq!(accuracy(&model, &ds).unwrap(), 0.25);
        let all = LabeledDataset::new(vec![(img.clone(), 2); 3], 5).unwrap();
        assert_eq!(accuracy(&model, &all).unwrap(), 1.0);
        let joined = ds.concat(&all).unwrap();
        let weighted = (0.25 * 4.0 + 1.0 * 3.0) / 7.0;
        assert!((accuracy(&model, &joined).unwrap() - weighted).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let model = ClassifierModel::zeros(16, 5).unwrap();
        assert_eq!(predict(&model, &ImageTensor::filled(16, 16, 0.1)).unwrap(), 0);
    }

    #[test]
    fn loss_decreases_on_small_set() {
        let ds = gen_shapes_dataset(9, 60, 16).unwrap();
        let mut cfg = small_cfg();
        cfg.epochs = 8;
        let (_, hist) = train(&ds, &cfg).unwrap();
        assert!(hist.last().unwrap() < hist.first().unwrap(), "{hist:?}");
    }
}
