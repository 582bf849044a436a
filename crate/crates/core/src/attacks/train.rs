use serde::{Deserialize, Serialize};

use super::eot::{apply_transform, apply_transform_backward, sample_transform, EotParams, Transform};
use super::patch::{patch_corner, PatchPixels, PatchSpec, Placement, TrainedPatch};
use crate::classifier::{input_gradient, predict, ClassifierModel};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabeledDataset, CHANNELS};
use crate::prng::Prng;

/// Update rule for the patch pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchOptimizer {
    /// Plain gradient ascent.
    Gradient,
    /// Adam (beta1 0.9, beta2 0.999, eps 1e-8).
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchTrainConfig {
    /// Passes over the training set; each pass is `dataset.len()` steps.
    pub epochs: usize,
    /// Step size for ascent on log P(target).
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: PatchOptimizer,
}

impl Default for PatchTrainConfig {
    fn default() -> Self {
        Self { epochs: 30, learning_rate: 0.02, optimizer: PatchOptimizer::Adam }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Turns a raw gradient into an Adam step direction in place.
    fn direction(&mut self, grad: &mut [f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((g, m), v) in grad.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * *g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * *g * *g;
            *g = (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Copies `pixels` into `img` with the patch's top-left at `corner`.
/// Equivalent to the blend with a square mask at that corner.
pub fn paste_at(img: &ImageTensor, pixels: &PatchPixels, corner: (usize, usize)) -> ImageTensor {
    let s = pixels.side();
    let w = img.width();
    let mut data = img.data().to_vec();
    for r in 0..s {
        let dst = ((corner.0 + r) * w + corner.1) * CHANNELS;
        let src = r * s * CHANNELS;
        data[dst..dst + s * CHANNELS].copy_from_slice(&pixels.data()[src..src + s * CHANNELS]);
    }
    ImageTensor::new(img.height(), w, data).expect("same dimensions")
}

/// Shifts a corner by a transform's translation, keeping the patch inside.
fn offset_corner(corner: (usize, usize), t: &Transform, h: usize, w: usize, side: usize) -> (usize, usize) {
    let shift = |v: usize, d: i64, limit: usize| (v as i64 + d).clamp(0, (limit - side) as i64) as usize;
    (shift(corner.0, t.dy, h), shift(corner.1, t.dx, w))
}

/// Shared patch-training loop. Each step draws an image, a paste corner
/// (for random placement) and, when `eot` is given and non-trivial, a
/// transform; it then takes one gradient-ascent step on
/// log P(target | patched image) with respect to the patch pixels only, and
/// clamps to [0, 1].
pub fn train_patch(
    model: &ClassifierModel,
    dataset: &LabeledDataset,
    spec: PatchSpec,
    eot: Option<&EotParams>,
    cfg: &PatchTrainConfig,
    prng: &mut Prng,
) -> Result<TrainedPatch> {
    let (h, w) = dataset.image_dims().ok_or_else(|| Error::invalid("patch training needs a non-empty dataset"))?;
    spec.validate(h, w)?;
    if spec.target_class >= model.class_count() {
        return Err(Error::invalid(format!("target class {} outside [0, {})", spec.target_class, model.class_count())));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::invalid("patch learning rate must be positive"));
    }
    let eot = match eot {
        Some(e) => {
            e.validate()?;
            (!e.is_identity()).then_some(e)
        }
        None => None,
    };

    let side = spec.side;
    let mut pixels = PatchPixels::random(side, prng);
    let steps = cfg.epochs * dataset.len();
    let mut grad_shown = vec![0.0; side * side * CHANNELS];
    let mut adam = Adam::new(side * side * CHANNELS);
    for _ in 0..steps {
        let (img, _) = &dataset.items()[prng.below(dataset.len())];
        let corner = patch_corner(h, w, &spec, prng)?;
        let transform = eot.map(|e| sample_transform(prng, e));
        let (shown, corner) = match &transform {
            Some(t) => (apply_transform(&pixels, t), offset_corner(corner, t, h, w, side)),
            None => (pixels.clone(), corner),
        };
        let patched = paste_at(img, &shown, corner);
        let (_, dx) = input_gradient(model, &patched, spec.target_class)?;
        for r in 0..side {
            let src = ((corner.0 + r) * w + corner.1) * CHANNELS;
            grad_shown[r * side * CHANNELS..(r + 1) * side * CHANNELS].copy_from_slice(&dx[src..src + side * CHANNELS]);
        }
        let mut grad = match &transform {
            Some(t) => apply_transform_backward(&pixels, t, &grad_shown),
            None => grad_shown.clone(),
        };
        if cfg.optimizer == PatchOptimizer::Adam {
            adam.direction(&mut grad);
        }
        // dx is the gradient of -log P(target); step against it.
        for (p, g) in pixels.data_mut().iter_mut().zip(&grad) {
            *p = (*p - cfg.learning_rate * g).clamp(0.0, 1.0);
        }
    }

    let mut trained = TrainedPatch { pixels, spec, epochs_trained: cfg.epochs, final_success_rate: 0.0 };
    trained.final_success_rate = attack_success_rate(model, &trained, dataset, prng)?.targeted_success;
    Ok(trained)
}

/// Fixed-location patch training.
pub fn train_patch_lavan(
    model: &ClassifierModel,
    dataset: &LabeledDataset,
    spec: PatchSpec,
    cfg: &PatchTrainConfig,
    prng: &mut Prng,
) -> Result<TrainedPatch> {
    if !matches!(spec.placement, Placement::Fixed { .. }) {
        return Err(Error::invalid("LaVAN-style training needs a fixed placement"));
    }
    train_patch(model, dataset, spec, None, cfg, prng)
}

/// Universal patch training at random locations under random EOT transforms
/// (one transform sample per step).
pub fn train_patch_googleap(
    model: &ClassifierModel,
    dataset: &LabeledDataset,
    spec: PatchSpec,
    eot: &EotParams,
    cfg: &PatchTrainConfig,
    prng: &mut Prng,
) -> Result<TrainedPatch> {
    if spec.placement != Placement::Random {
        return Err(Error::invalid("GoogleAp-style training needs random placement"));
    }
    train_patch(model, dataset, spec, Some(eot), cfg, prng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackOutcome {
    /// Share of non-target-class images classified as the target.
    pub targeted_success: f64,
    /// Share of all images still classified correctly.
    pub accuracy_under_attack: f64,
}

/// Places the patch on every image according to its spec (random placement
/// draws a fresh corner per image) and returns each patched image with its
/// corner.
pub fn patch_images(
    patch: &TrainedPatch,
    dataset: &LabeledDataset,
    prng: &mut Prng,
) -> Result<Vec<(ImageTensor, (usize, usize))>> {
    let Some((h, w)) = dataset.image_dims() else {
        return Ok(Vec::new());
    };
    patch.spec.validate(h, w)?;
    let base = prng.next_u64();
    dataset
        .items()
        .iter()
        .enumerate()
        .map(|(i, (img, _))| {
            let mut lane = Prng::lane(base, i as u64);
            let corner = patch_corner(h, w, &patch.spec, &mut lane)?;
            Ok((paste_at(img, &patch.pixels, corner), corner))
        })
        .collect()
}

pub fn attack_success_rate(
    model: &ClassifierModel,
    patch: &TrainedPatch,
    dataset: &LabeledDataset,
    prng: &mut Prng,
) -> Result<AttackOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("attack evaluation needs a non-empty dataset"));
    }
    let target = patch.spec.target_class;
    let (mut hits, mut eligible, mut correct) = (0usize, 0usize, 0usize);
    for ((img, _), (_, label)) in patch_images(patch, dataset, prng)?.iter().zip(dataset.items()) {
        let pred = predict(model, img)?;
        correct += (pred == *label) as usize;
        if *label != target {
            eligible += 1;
            hits += (pred == target) as usize;
        }
    }
    Ok(AttackOutcome {
        targeted_success: if eligible == 0 { 0.0 } else { hits as f64 / eligible as f64 },
        accuracy_under_attack: correct as f64 / dataset.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::patch::{apply_patch, MaskMatrix};
    use crate::classifier::accuracy;
    use crate::shapes::gen_shapes_dataset;

    #[test]
    fn paste_matches_blend() {
        let ds = gen_shapes_dataset(2, 5, 16).unwrap();
        let p = PatchPixels::random(5, &mut Prng::new(1));
        let x = &ds.items()[0].0;
        let mask = MaskMatrix::square(16, 16, 3, 9, 5).unwrap();
        assert_eq!(paste_at(x, &p, (3, 9)), apply_patch(x, &p, &mask, (3, 9)).unwrap());
    }

    #[test]
    fn paste_is_idempotent_and_local() {
        let ds = gen_shapes_dataset(2, 5, 16).unwrap();
        let p = PatchPixels::random(4, &mut Prng::new(1));
        let x = &ds.items()[1].0;
        let once = paste_at(x, &p, (2, 2));
        assert_eq!(paste_at(&once, &p, (2, 2)), once);
        for r in 0..16 {
            for c in 0..16 {
                if !(2..6).contains(&r) || !(2..6).contains(&c) {
                    for ch in 0..3 {
                        assert_eq!(once.get(r, c, ch).to_bits(), x.get(r, c, ch).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let model = ClassifierModel::he_init(16, 5, &mut Prng::new(3)).unwrap();
        let ds = gen_shapes_dataset(1, 10, 16).unwrap();
        let cfg = PatchTrainConfig { epochs: 0, learning_rate: 1.0, optimizer: PatchOptimizer::Gradient };
        let spec = PatchSpec::upper_right(4, 16, 1);
        let patch = train_patch_lavan(&model, &ds, spec, &cfg, &mut Prng::new(9)).unwrap();
        assert_eq!(patch.pixels, PatchPixels::random(4, &mut Prng::new(9)));
        assert_eq!(patch.epochs_trained, 0);
    }

    #[test]
    fn placement_kind_enforced() {
        let model = ClassifierModel::zeros(16, 5).unwrap();
        let ds = gen_shapes_dataset(1, 10, 16).unwrap();
        let cfg = PatchTrainConfig::default();
        let err = train_patch_lavan(&model, &ds, PatchSpec::random(4, 0), &cfg, &mut Prng::new(0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = train_patch_googleap(
            &model,
            &ds,
            PatchSpec::upper_right(4, 16, 0),
            &EotParams::default(),
            &cfg,
            &mut Prng::new(0),
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pixels_stay_in_range_and_deterministic() {
        let model = ClassifierModel::he_init(16, 5, &mut Prng::new(3)).unwrap();
        let ds = gen_shapes_dataset(1, 10, 16).unwrap();
        let cfg = PatchTrainConfig { epochs: 2, learning_rate: 0.05, optimizer: PatchOptimizer::Adam };
        let spec = PatchSpec::random(5, 2);
        let a = train_patch_googleap(&model, &ds, spec, &EotParams::default(), &cfg, &mut Prng::new(4)).unwrap();
        let b = train_patch_googleap(&model, &ds, spec, &EotParams::default(), &cfg, &mut Prng::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_eot_equals_plain_random_training() {
        let model = ClassifierModel::he_init(16, 5, &mut Prng::new(3)).unwrap();
        let ds = gen_shapes_dataset(1, 10, 16).unwrap();
        let cfg = PatchTrainConfig { epochs: 2, learning_rate: 0.05, optimizer: PatchOptimizer::Adam };
        let spec = PatchSpec::random(4, 1);
        let a = train_patch_googleap(&model, &ds, spec, &EotParams::identity(), &cfg, &mut Prng::new(6)).unwrap();
        let b = train_patch(&model, &ds, spec, None, &cfg, &mut Prng::new(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inert_patch_keeps_clean_accuracy() {
        // Zero-weight model ignores its input entirely.
        let mut model = ClassifierModel::zeros(16, 5).unwrap();
        model.params_mut().dense_b[0] = 1.0;
        let ds = gen_shapes_dataset(1, 25, 16).unwrap();
        let patch = TrainedPatch {
            pixels: PatchPixels::constant(4, 1.0),
            spec: PatchSpec::random(4, 3),
            epochs_trained: 0,
            final_success_rate: 0.0,
        };
        let out = attack_success_rate(&model, &patch, &ds, &mut Prng::new(0)).unwrap();
        assert_eq!(out.accuracy_under_attack, accuracy(&model, &ds).unwrap());
        assert_eq!(out.targeted_success, 0.0);
    }
}
