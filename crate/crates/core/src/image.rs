//! Image and dataset primitives.

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An H×W×3 image with samples in [0, 1], stored row-major as
/// (row, column, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, clamping every sample into [0, 1]. NaN becomes 0.
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::invalid(format!(
                "image data length {} does not match {height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width * CHANNELS]).expect("positive dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * CHANNELS + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    /// Sets a sample, clamped to [0, 1].
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = clamp_unit(value);
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// One colour channel as a row-major height×width matrix.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(CHANNELS).copied().collect()
    }

    /// Rebuilds an image from three row-major channel planes, clamping.
    pub fn from_channels(height: usize, width: usize, planes: [&[f64]; CHANNELS]) -> Result<Self> {
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::invalid("channel plane size mismatch"));
        }
        let mut data = Vec::with_capacity(n * CHANNELS);
        for i in 0..n {
            for plane in planes {
                data.push(plane[i]);
            }
        }
        Self::new(height, width, data)
    }

    /// Every sample rounded to the nearest multiple of 1/255 (half up).
    pub fn quantized(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize_sample(v) as f64 / 255.0).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// round(v × 255) with halves rounded up, saturating to 0..=255.
#[inline]
pub fn quantize_sample(v: f64) -> u8 {
    (clamp_unit(v) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Ordered labelled images sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    items: Vec<(ImageTensor, usize)>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(items: Vec<(ImageTensor, usize)>, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        if let Some((first, _)) = items.first() {
            for (i, (img, label)) in items.iter().enumerate() {
                if *label >= class_count {
                    return Err(Error::invalid(format!("item {i}: label {label} outside [0, {class_count})")));
                }
                if !img.same_shape(first) {
                    return Err(Error::invalid(format!("item {i}: dimension mismatch")));
                }
            }
        }
        Ok(Self { items, class_count })
    }

    pub fn items(&self) -> &[(ImageTensor, usize)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// (height, width) of the images, if any.
    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.items.first().map(|(img, _)| (img.height(), img.width()))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count];
        for (_, label) in &self.items {
            hist[*label] += 1;
        }
        hist
    }

    /// The first `n` items (or all of them).
    pub fn take(&self, n: usize) -> LabeledDataset {
        LabeledDataset { items: self.items.iter().take(n).cloned().collect(), class_count: self.class_count }
    }

    /// Concatenation; class count is the larger of the two.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        let mut items = self.items.clone();
        items.extend(other.items.iter().cloned());
        LabeledDataset::new(items, self.class_count.max(other.class_count))
    }

    /// Same labels, images replaced by `f(image)`.
    pub fn map_images<F>(&self, mut f: F) -> Result<LabeledDataset>
    where
        F: FnMut(&ImageTensor) -> Result<ImageTensor>,
    {
        let items = self.items.iter().map(|(img, label)| Ok((f(img)?, *label))).collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(items, self.class_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_clamps() {
        let img = ImageTensor::new(1, 1, vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(ImageTensor::new(2, 2, vec![0.0; 11]).is_err());
        assert!(ImageTensor::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn channel_round_trip() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let img = ImageTensor::new(2, 2, data).unwrap();
        let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
        assert_eq!(r, vec![0.0, 3.0 / 12.0, 6.0 / 12.0, 9.0 / 12.0]);
        let back = ImageTensor::from_channels(2, 2, [&r, &g, &b]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn dataset_rejects_bad_label_and_shape() {
        let a = ImageTensor::filled(4, 4, 0.1);
        let b = ImageTensor::filled(2, 2, 0.1);
        assert!(LabeledDataset::new(vec![(a.clone(), 5)], 5).is_err());
        assert!(LabeledDataset::new(vec![(a, 0), (b, 1)], 5).is_err());
    }

    #[test]
    fn quantize_half_up() {
        assert_eq!(quantize_sample(0.5), 128);
        assert_eq!(quantize_sample(1.0), 255);
        assert_eq!(quantize_sample(0.0), 0);
    }
}
