use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::prng::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Fixed { row: usize, col: usize },
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub side: usize,
    pub placement: Placement,
    pub target_class: usize,
}

impl PatchSpec {
    /// Fixed placement in the upper-right corner of an `image_side` image.
    pub fn upper_right(side: usize, image_side: usize, target_class: usize) -> Self {
        Self { side, placement: Placement::Fixed { row: 0, col: image_side.saturating_sub(side) }, target_class }
    }

    pub fn random(side: usize, target_class: usize) -> Self {
        Self { side, placement: Placement::Random, target_class }
    }

    /// Checks the spec against an image size.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.side < 2 {
            return Err(Error::invalid("patch side must be at least 2"));
        }
        if self.side > h.min(w) {
            return Err(Error::invalid(format!("patch side {} exceeds image {h}x{w}", self.side)));
        }
        if let Placement::Fixed { row, col } = self.placement {
            if row + self.side > h || col + self.side > w {
                return Err(Error::invalid(format!("fixed patch at ({row}, {col}) leaves the {h}x{w} image")));
            }
        }
        Ok(())
    }
}

/// Binary paste mask over an image grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    /// A single `side`×`side` square of ones with top-left corner (row, col).
    pub fn square(height: usize, width: usize, row: usize, col: usize, side: usize) -> Result<Self> {
        if row + side > height || col + side > width {
            return Err(Error::invalid("mask square out of bounds"));
        }
        let mut m = Self::zeros(height, width);
        for r in row..row + side {
            for c in col..col + side {
                m.bits[r * width + c] = true;
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Top-left corner for a patch: the fixed location, or uniform over every
/// fully in-bounds corner for random placement.
pub fn patch_corner(h: usize, w: usize, spec: &PatchSpec, prng: &mut Prng) -> Result<(usize, usize)> {
    spec.validate(h, w)?;
    Ok(match spec.placement {
        Placement::Fixed { row, col } => (row, col),
        Placement::Random => (prng.below(h - spec.side + 1), prng.below(w - spec.side + 1)),
    })
}

pub fn make_mask(h: usize, w: usize, spec: &PatchSpec, prng: &mut Prng) -> Result<(MaskMatrix, usize, usize)> {
    let (row, col) = patch_corner(h, w, spec, prng)?;
    Ok((MaskMatrix::square(h, w, row, col, spec.side)?, row, col))
}

/// side×side×3 patch samples in [0, 1], (row, col, channel) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPixels {
    side: usize,
    data: Vec<f64>,
}

impl PatchPixels {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * CHANNELS {
            return Err(Error::invalid("patch data length mismatch"));
        }
        let data = data.into_iter().map(crate::image::clamp_unit).collect();
        Ok(Self { side, data })
    }

    pub fn constant(side: usize, value: f64) -> Self {
        Self::new(side, vec![value; side * side * CHANNELS]).expect("sized")
    }

    pub fn random(side: usize, prng: &mut Prng) -> Self {
        let data = (0..side * side * CHANNELS).map(|_| prng.next_f64()).collect();
        Self { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.side + col) * CHANNELS + ch]
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::new(self.side, self.side, self.data.clone()).expect("valid patch")
    }

    pub fn from_image(img: &ImageTensor) -> Result<Self> {
        if img.height() != img.width() {
            return Err(Error::invalid("patch image must be square"));
        }
        Self::new(img.height(), img.data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPatch {
    pub pixels: PatchPixels,
    pub spec: PatchSpec,
    pub epochs_trained: usize,
    pub final_success_rate: f64,
}

/// JSON sidecar stored next to a patch PPM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSidecar {
    pub side: usize,
    pub placement: Placement,
    pub target_class: usize,
    pub epochs_trained: usize,
    pub seed: u64,
}

impl TrainedPatch {
    /// Writes `<stem>.ppm` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::ppm::write_ppm_file(&dir.join(format!("{stem}.ppm")), &self.pixels.to_image())?;
        let sidecar = PatchSidecar {
            side: self.spec.side,
            placement: self.spec.placement,
            target_class: self.spec.target_class,
            epochs_trained: self.epochs_trained,
            seed,
        };
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&sidecar)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a patch from its PPM and JSON sidecar paths. Pixels come back
    /// quantised to 1/255.
    pub fn load(ppm_path: &Path, sidecar_path: &Path) -> Result<(TrainedPatch, u64)> {
        let img = crate::ppm::read_ppm_file(ppm_path)?;
        let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let sidecar: PatchSidecar = serde_json::from_str(&text)?;
        if img.height() != sidecar.side || img.width() != sidecar.side {
            return Err(Error::invalid("patch image size disagrees with sidecar"));
        }
        let patch = TrainedPatch {
            pixels: PatchPixels::from_image(&img)?,
            spec: PatchSpec { side: sidecar.side, placement: sidecar.placement, target_class: sidecar.target_class },
            epochs_trained: sidecar.epochs_trained,
            final_success_rate: f64::NAN,
        };
        Ok((patch, sidecar.seed))
    }
}

/// The blend equation: wherever `mask` is 1 the output takes the patch
/// sample (the patch's top-left sits at `corner`), elsewhere the input.
pub fn apply_patch(
    x: &ImageTensor,
    patch: &PatchPixels,
    mask: &MaskMatrix,
    corner: (usize, usize),
) -> Result<ImageTensor> {
    let (h, w) = (x.height(), x.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::invalid("mask dimensions differ from image"));
    }
    let (r0, c0) = corner;
    let s = patch.side();
    let mut data = x.data().to_vec();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let inside = r >= r0 && r < r0 + s && c >= c0 && c < c0 + s;
            if !inside {
                return Err(Error::invalid(format!("mask pixel ({r}, {c}) is not covered by the patch at {corner:?}")));
            }
            for ch in 0..CHANNELS {
                data[(r * w + c) * CHANNELS + ch] = patch.get(r - r0, c - c0, ch);
            }
        }
    }
    ImageTensor::new(h, w, data)
}
