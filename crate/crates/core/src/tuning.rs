//! Sweep of the information fraction `I`.
//!
//! Every grid value is scored on the same base images twice: once clean and
//! once carrying the patch, both after the defense. The chosen value has the
//! best patched accuracy among those whose clean accuracy stays within the
//! tolerance of the undefended model.

use serde::{Deserialize, Serialize};

use crate::attacks::{patch_images, TrainedPatch};
use crate::classifier::{accuracy, fine_tune, predict, ClassifierModel, TrainConfig};
use crate::defense::{check_info, DefenseMethod, PreparedImage};
use crate::error::{Error, Result};
use crate::image::LabeledDataset;
use crate::prng::Prng;

pub const DEFAULT_TOLERANCE: f64 = 0.02;

/// Grid values are rounded to this many decimals after parsing.
const GRID_DECIMALS: i32 = 10;

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| -> Result<f64> {
        s.trim().parse::<f64>().map_err(|_| Error::Config(format!("invalid grid value {:?}", s.trim())))
    };
    let scale = 10f64.powi(GRID_DECIMALS);
    let grid: Vec<f64> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(Error::Config(format!("grid {text:?} must be start:stop:step")));
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if step.is_nan() || step <= 0.0 || stop < start {
            return Err(Error::Config(format!("grid {text:?} needs step > 0 and stop >= start")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|k| ((start + k as f64 * step) * scale).round() / scale).collect()
    } else {
        text.split(',').map(num).collect::<Result<_>>()?
    };
    validate_grid(&grid).map_err(|e| Error::Config(e.to_string()))?;
    Ok(grid)
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("grid must not be empty"));
    }
    grid.iter().try_for_each(|&i| check_info(i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub grid: Vec<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// When present, the model is fine-tuned on defended images before the
    /// sweep.
    #[serde(default)]
    pub fine_tune: Option<TrainConfig>,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

impl TuneConfig {
    pub fn new(grid: Vec<f64>) -> Self {
        TuneConfig { grid, tolerance: DEFAULT_TOLERANCE, fine_tune: None }
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.grid)?;
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance must be non-negative"));
        }
        if let Some(ft) = &self.fine_tune {
            ft.validate()?;
        }
        Ok(())
    }
}

/// Fine-tuning schedule used when none is given explicitly.
pub fn default_fine_tune(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 32, learning_rate: 0.01, momentum: 0.9, seed }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub info: f64,
    /// Accuracy on defended patched images.
    pub robust_acc: f64,
    /// Accuracy on defended clean images.
    pub clean_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub chosen_info: f64,
    pub rows: Vec<TuneRow>,
    pub baseline_clean_acc: f64,
    pub constraint_satisfied: bool,
    /// The fine-tuned model, when fine-tuning was enabled.
    pub fine_tuned: Option<ClassifierModel>,
}

impl TuneResult {
    pub fn chosen_row(&self) -> &TuneRow {
        self.rows.iter().find(|r| r.info == self.chosen_info).expect("chosen value comes from the rows")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("info,robust_acc,clean_acc,clean_drop,chosen\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.info,
                r.robust_acc,
                r.clean_acc,
                self.baseline_clean_acc - r.clean_acc,
                r.info == self.chosen_info
            ));
        }
        out
    }
}

/// Picks a row index: best robust accuracy among rows whose clean drop is
/// below `tolerance`, ties going to the larger `I`. With no admissible row the
/// smallest clean drop wins and the flag is false.
pub fn select_info(rows: &[TuneRow], baseline_clean: f64, tolerance: f64) -> Result<(usize, bool)> {
    if rows.is_empty() {
        return Err(Error::invalid("no rows to select from"));
    }
    let drop = |r: &TuneRow| baseline_clean - r.clean_acc;
    let ok = rows.iter().any(|r| drop(r) < tolerance);
    let score = |r: &TuneRow| if ok { r.robust_acc } else { -drop(r) };
    let best = (0..rows.len())
        .filter(|&i| !ok || drop(&rows[i]) < tolerance)
        .max_by(|&a, &b| {
            let (ra, rb) = (&rows[a], &rows[b]);
            score(ra).total_cmp(&score(rb)).then(ra.info.total_cmp(&rb.info))
        })
        .expect("rows are non-empty");
    Ok((best, ok))
}

fn fraction_correct(model: &ClassifierModel, prepared: &[PreparedImage], labels: &[usize], info: f64) -> Result<f64> {
    let mut correct = 0usize;
    for (p, &label) in prepared.iter().zip(labels) {
        correct += (predict(model, &p.reconstruct(info)?)? == label) as usize;
    }
    Ok(correct as f64 / labels.len() as f64)
}

pub fn tune_info(
    model: &ClassifierModel,
    clean: &LabeledDataset,
    patch: &TrainedPatch,
    method: &DefenseMethod,
    cfg: &TuneConfig,
    prng: &mut Prng,
) -> Result<TuneResult> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(Error::invalid("tuning needs a non-empty clean set"));
    }
    let baseline_clean_acc = accuracy(model, clean)?;
    let labels: Vec<usize> = clean.items().iter().map(|(_, l)| *l).collect();
    let patched = patch_images(patch, clean, prng)?;
    let clean_prep = method.prepare_all(clean.items().iter().map(|(x, _)| x))?;
    let adv_prep = method.prepare_all(patched.iter().map(|(x, _)| x))?;

    let fine_tuned = match &cfg.fine_tune {
        None => None,
        Some(ft) => {
            let mut items = Vec::with_capacity(2 * labels.len());
            for (prep, &label) in clean_prep.iter().chain(&adv_prep).zip(labels.iter().cycle()) {
                let info = cfg.grid[prng.below(cfg.grid.len())];
                items.push((prep.reconstruct(info)?, label));
            }
            let mix = LabeledDataset::new(items, clean.class_count())?;
            Some(fine_tune(model.clone(), &mix, ft)?.0)
        }
    };
    let eval_model = fine_tuned.as_ref().unwrap_or(model);

    let rows = cfg
        .grid
        .iter()
        .map(|&info| {
            Ok(TuneRow {
                info,
                robust_acc: fraction_correct(eval_model, &adv_prep, &labels, info)?,
                clean_acc: fraction_correct(eval_model, &clean_prep, &labels, info)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (best, constraint_satisfied) = select_info(&rows, baseline_clean_acc, cfg.tolerance)?;
    Ok(TuneResult { chosen_info: rows[best].info, rows, baseline_clean_acc, constraint_satisfied, fine_tuned })
}
