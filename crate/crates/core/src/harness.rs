//! End-to-end experiment: data, classifier, patch attacks, tuning of each
//! defense, evaluation and report artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    patch_images, train_patch_googleap, train_patch_lavan, EotParams, PatchSpec, PatchTrainConfig, TrainedPatch,
};
use crate::classifier::{accuracy, predict, save_checkpoint, train, ClassifierModel, TrainConfig};
use crate::defense::{DefenseConfig, DefenseMethod};
use crate::error::{Error, Result};
use crate::image::LabeledDataset;
use crate::prng::Prng;
use crate::report::{
    render_published_comparison, EvalReport, Percent, ReportFormat, ReportRow, PUBLISHED_COMPARISON_CSV,
};
use crate::shapes::{gen_shapes_dataset, MIN_SIDE, SHAPE_CLASSES};
use crate::tuning::{parse_grid, tune_info, TuneConfig, TuneResult, DEFAULT_TOLERANCE};

/// Environment variable overriding the configured master seed.
pub const SEED_ENV: &str = "DEFDR_SEED";

/// Label used for the classifier in report rows.
pub const MODEL_NAME: &str = "ShapesCNN";

/// Horizontal stripes.
pub const DEFAULT_TARGET_CLASS: usize = 4;

// Lane indices for deriving stage seeds from the master seed.
const LANE_TRAIN_DATA: u64 = 0;
const LANE_TEST_DATA: u64 = 1;
const LANE_TUNE_DATA: u64 = 2;
const LANE_CLASSIFIER: u64 = 3;
const LANE_ATTACK: u64 = 1_000;
const LANE_TUNE: u64 = 2_000;
const LANE_EVAL: u64 = 3_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Fixed upper-right placement, no transforms.
    Lavan,
    /// Random placement with EOT transforms.
    Googleap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub target_class: usize,
    /// Number of training images the patch is optimised on.
    pub train_images: usize,
    /// Transforms for GoogleAp-style training; ignored for LaVAN.
    #[serde(default)]
    pub eot: EotParams,
    pub training: PatchTrainConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Googleap,
            target_class: DEFAULT_TARGET_CLASS,
            train_images: 1000,
            eot: EotParams::default(),
            training: PatchTrainConfig::default(),
        }
    }
}

/// Either `"start:stop:step"` / `"a,b,c"` or a JSON list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Text(String),
    Values(Vec<f64>),
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            GridSpec::Text(t) => parse_grid(t),
            GridSpec::Values(v) => {
                crate::tuning::validate_grid(v).map_err(|e| Error::Config(e.to_string()))?;
                Ok(v.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSweep {
    pub defense: DefenseMethod,
    pub grid: GridSpec,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub fine_tune: Option<TrainConfig>,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

impl DefenseSweep {
    pub fn tune_config(&self) -> Result<TuneConfig> {
        Ok(TuneConfig { grid: self.grid.values()?, tolerance: self.tolerance, fine_tune: self.fine_tune.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_side: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Clean images used to pick `I`; each is also scored with the patch.
    pub tune_size: usize,
    pub patch_sizes: Vec<usize>,
    pub attack: AttackConfig,
    pub defenses: Vec<DefenseSweep>,
    /// Its `seed` is combined with the master seed.
    pub classifier: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let grid = GridSpec::Text("0.90:0.99:0.01".into());
        ExperimentConfig {
            seed: 42,
            image_side: 32,
            train_size: 2000,
            test_size: 500,
            tune_size: 500,
            patch_sizes: vec![4, 6, 8, 10, 12],
            attack: AttackConfig::default(),
            defenses: vec![
                DefenseSweep {
                    defense: DefenseMethod::svd(),
                    grid: grid.clone(),
                    tolerance: DEFAULT_TOLERANCE,
                    fine_tune: None,
                },
                DefenseSweep { defense: DefenseMethod::tsne(), grid, tolerance: DEFAULT_TOLERANCE, fine_tune: None },
            ],
            classifier: TrainConfig::default(),
            output_dir: PathBuf::from("defdr-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    /// Reads, applies the seed override from the environment and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed =
                v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        let side = self.image_side;
        if side < MIN_SIDE || !side.is_multiple_of(4) {
            return cfg_err(format!("image_side {side} must be a multiple of 4 and at least {MIN_SIDE}"));
        }
        for (name, n) in [("train_size", self.train_size), ("test_size", self.test_size), ("tune_size", self.tune_size)]
        {
            if n < SHAPE_CLASSES {
                return cfg_err(format!("{name} must be at least {SHAPE_CLASSES}"));
            }
        }
        if self.patch_sizes.is_empty() {
            return cfg_err("patch_sizes must not be empty".into());
        }
        if let Some(&p) = self.patch_sizes.iter().find(|&&p| p == 0 || p > side) {
            return cfg_err(format!("patch size {p} does not fit a {side}x{side} image"));
        }
        let a = &self.attack;
        if a.target_class >= SHAPE_CLASSES {
            return cfg_err(format!("target_class must be below {SHAPE_CLASSES}"));
        }
        if a.train_images == 0 || a.train_images > self.train_size {
            return cfg_err("attack.train_images must lie in [1, train_size]".into());
        }
        if a.training.epochs == 0 || !(a.training.learning_rate > 0.0 && a.training.learning_rate.is_finite()) {
            return cfg_err("attack.training needs epochs >= 1 and a positive learning rate".into());
        }
        a.eot.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.defenses.is_empty() {
            return cfg_err("defenses must not be empty".into());
        }
        for d in &self.defenses {
            d.defense.validate(side).map_err(|e| Error::Config(e.to_string()))?;
            d.tune_config()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.classifier.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serialises");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage_seed(&self, lane: u64) -> u64 {
        Prng::lane(self.seed, lane).next_u64()
    }
}

/// The four accuracies of one evaluation, all on the same test images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub clean_acc: f64,
    pub attacked_acc: f64,
    pub robust_with_patch: f64,
    pub robust_without_patch: f64,
}

pub fn evaluate(
    model: &ClassifierModel,
    test: &LabeledDataset,
    patch: &TrainedPatch,
    defense: &DefenseConfig,
    prng: &mut Prng,
) -> Result<Evaluation> {
    evaluate_with(model, model, test, patch, defense, prng)
}

/// As [`evaluate`], but scoring defended images with `defended_model`.
pub fn evaluate_with(
    model: &ClassifierModel,
    defended_model: &ClassifierModel,
    test: &LabeledDataset,
    patch: &TrainedPatch,
    defense: &DefenseConfig,
    prng: &mut Prng,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::invalid("evaluation needs a non-empty test set"));
    }
    let patched = patch_images(patch, test, prng)?;
    let (mut clean, mut attacked, mut robust, mut robust_clean) = (0usize, 0usize, 0usize, 0usize);
    for ((img, label), (adv, _)) in test.items().iter().zip(&patched) {
        clean += (predict(model, img)? == *label) as usize;
        attacked += (predict(model, adv)? == *label) as usize;
        robust += (predict(defended_model, &defense.apply(adv)?)? == *label) as usize;
        robust_clean += (predict(defended_model, &defense.apply(img)?)? == *label) as usize;
    }
    let n = test.len() as f64;
    Ok(Evaluation {
        clean_acc: clean as f64 / n,
        attacked_acc: attacked as f64 / n,
        robust_with_patch: robust as f64 / n,
        robust_without_patch: robust_clean as f64 / n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub train_accuracy: f64,
    pub version: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub metadata: RunMetadata,
    /// One entry per (patch size, defense), in report row order.
    pub tuning: Vec<(usize, String, TuneResult)>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn train_patch_for(
    model: &ClassifierModel,
    images: &LabeledDataset,
    attack: &AttackConfig,
    side: usize,
    image_side: usize,
    prng: &mut Prng,
) -> Result<TrainedPatch> {
    match attack.kind {
        AttackKind::Lavan => {
            let spec = PatchSpec::upper_right(side, image_side, attack.target_class);
            train_patch_lavan(model, images, spec, &attack.training, prng)
        }
        AttackKind::Googleap => {
            let spec = PatchSpec::random(side, attack.target_class);
            train_patch_googleap(model, images, spec, &attack.eot, &attack.training, prng)
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generated data and the trained classifier shared by every patch size.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub tune: LabeledDataset,
    pub model: ClassifierModel,
    pub train_accuracy: f64,
}

/// The generate and train stages.
pub fn prepare_experiment(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    cfg.validate()?;
    let side = cfg.image_side;
    let (train_set, test, tune) = (|| {
        Ok::<_, Error>((
            gen_shapes_dataset(cfg.stage_seed(LANE_TRAIN_DATA), cfg.train_size, side)?,
            gen_shapes_dataset(cfg.stage_seed(LANE_TEST_DATA), cfg.test_size, side)?,
            gen_shapes_dataset(cfg.stage_seed(LANE_TUNE_DATA), cfg.tune_size, side)?,
        ))
    })()
    .map_err(|e| e.in_stage("generate"))?;

    let train_cfg =
        TrainConfig { seed: cfg.classifier.seed ^ cfg.stage_seed(LANE_CLASSIFIER), ..cfg.classifier.clone() };
    let (model, train_accuracy) = train(&train_set, &train_cfg)
        .and_then(|(m, _)| {
            let acc = accuracy(&m, &train_set)?;
            Ok((m, acc))
        })
        .map_err(|e| e.in_stage("train"))?;
    Ok(ExperimentData { train: train_set, test, tune, model, train_accuracy })
}

/// Seed of the attack stage for one patch size.
pub fn attack_seed(cfg: &ExperimentConfig, size: usize) -> u64 {
    cfg.stage_seed(LANE_ATTACK + size as u64)
}

/// The attack stage for one patch size.
pub fn attack_for_size(cfg: &ExperimentConfig, data: &ExperimentData, size: usize) -> Result<TrainedPatch> {
    let images = data.train.take(cfg.attack.train_images);
    let mut prng = Prng::new(attack_seed(cfg, size));
    train_patch_for(&data.model, &images, &cfg.attack, size, cfg.image_side, &mut prng)
        .map_err(|e| e.in_stage("attack"))
}

/// The tune and evaluate stages for one patch and one defense.
pub fn defend_for_size(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    patch: &TrainedPatch,
    sweep: &DefenseSweep,
) -> Result<(TuneResult, Evaluation)> {
    let size = patch.spec.side;
    let tune_cfg = sweep.tune_config()?;
    let mut tune_prng = Prng::new(cfg.stage_seed(LANE_TUNE + size as u64));
    let result = tune_info(&data.model, &data.tune, patch, &sweep.defense, &tune_cfg, &mut tune_prng)
        .map_err(|e| e.in_stage("tune"))?;
    let defense = DefenseConfig::new(sweep.defense.clone(), result.chosen_info)?;
    let defended_model = result.fine_tuned.as_ref().unwrap_or(&data.model);
    let ev = evaluate_with(&data.model, defended_model, &data.test, patch, &defense, &mut eval_prng(cfg, size))
        .map_err(|e| e.in_stage("evaluate"))?;
    Ok((result, ev))
}

fn eval_prng(cfg: &ExperimentConfig, size: usize) -> Prng {
    Prng::new(cfg.stage_seed(LANE_EVAL + size as u64))
}

/// Clean and attacked accuracy on the test set with no defense, using the
/// same placements as [`defend_for_size`].
pub fn undefended_for_size(cfg: &ExperimentConfig, data: &ExperimentData, patch: &TrainedPatch) -> Result<Evaluation> {
    let size = patch.spec.side;
    evaluate(&data.model, &data.test, patch, &DefenseConfig::identity(), &mut eval_prng(cfg, size))
        .map_err(|e| e.in_stage("evaluate"))
}

/// Runs every stage and writes the artifacts into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let started_unix = unix_now();
    let data = prepare_experiment(cfg)?;
    let hash = cfg.hash();

    let out = &cfg.output_dir;
    let patch_dir = out.join("patches");
    fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e).in_stage("write"))?;
    write(&out.join("model.ckpt"), save_checkpoint(&data.model)).map_err(|e| e.in_stage("write"))?;

    let mut rows = Vec::new();
    let mut tuning = Vec::new();
    for &size in &cfg.patch_sizes {
        let patch = attack_for_size(cfg, &data, size)?;
        patch.save(&patch_dir, &format!("patch_{size}"), attack_seed(cfg, size)).map_err(|e| e.in_stage("write"))?;

        for sweep in &cfg.defenses {
            let method = sweep.defense.name();
            let (result, ev) = defend_for_size(cfg, &data, &patch, sweep)?;
            write(&out.join(format!("tune_{method}_{size}.csv")), result.to_csv()).map_err(|e| e.in_stage("write"))?;
            rows.push(report_row(size, method, result.chosen_info, &ev, &hash)?);
            tuning.push((size, method.to_string(), result));
        }
    }

    let report = EvalReport::new(rows);
    let write_reports = || -> Result<()> {
        write(&out.join("report.csv"), report.render(ReportFormat::Csv)?)?;
        let md = format!("{}\n{}", report.render(ReportFormat::Markdown)?, render_published_comparison()?);
        write(&out.join("report.md"), md)?;
        write(&out.join("report.svg"), report.render(ReportFormat::Svg)?)?;
        write(&out.join("published_comparison.csv"), PUBLISHED_COMPARISON_CSV)?;
        Ok(())
    };
    write_reports().map_err(|e| e.in_stage("report"))?;

    let metadata = RunMetadata {
        seed: cfg.seed,
        config_hash: hash,
        started_unix,
        finished_unix: unix_now(),
        train_accuracy: data.train_accuracy,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write(&out.join("metadata.json"), serde_json::to_string_pretty(&metadata)?).map_err(|e| e.in_stage("write"))?;
    Ok(RunOutput { report, metadata, tuning })
}

fn report_row(size: usize, method: &str, info: f64, ev: &Evaluation, hash: &str) -> Result<ReportRow> {
    Ok(ReportRow {
        patch_size: size,
        model: MODEL_NAME.to_string(),
        method: method.to_string(),
        clean_acc: Percent::from_fraction(ev.clean_acc)?,
        attacked_acc: Percent::from_fraction(ev.attacked_acc)?,
        info: Percent::from_fraction(info)?,
        robust_with_patch: Percent::from_fraction(ev.robust_with_patch)?,
        robust_without_patch: Percent::from_fraction(ev.robust_without_patch)?,
        config_hash: hash.to_string(),
    })
}
