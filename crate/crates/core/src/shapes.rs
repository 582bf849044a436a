//! Synthetic five-class shapes dataset.
//!
//! Classes: 0 filled circle, 1 square outline, 2 filled triangle,
//! 3 plus-cross, 4 horizontal stripes. Each image draws a random
//! position, scale, and a dark background / bright foreground colour pair,
//! then adds uniform noise of amplitude 0.05.

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabeledDataset, CHANNELS};
use crate::prng::Prng;

pub const SHAPE_CLASSES: usize = 5;
pub const NOISE_AMPLITUDE: f64 = 0.05;
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    SquareOutline,
    Triangle,
    Cross,
    Stripes,
}

impl Shape {
    pub fn from_class(class: usize) -> Option<Shape> {
        Some(match class {
            0 => Shape::Circle,
            1 => Shape::SquareOutline,
            2 => Shape::Triangle,
            3 => Shape::Cross,
            4 => Shape::Stripes,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::SquareOutline => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Stripes => "stripes",
        }
    }
}

struct Placement {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Placement {
    /// Whether the pixel centred at (x, y) is covered by `shape`.
    fn covers(&self, shape: Shape, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let r = self.r;
        match shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::SquareOutline => {
                let t = (0.25 * r).max(1.5);
                let m = dx.abs().max(dy.abs());
                m <= r && m >= r - t
            }
            Shape::Triangle => {
                // Apex up, base down, spanning [-r, r] both ways.
                if dy < -r || dy > r {
                    return false;
                }
                let half_width = r * (dy + r) / (2.0 * r);
                dx.abs() <= half_width
            }
            Shape::Cross => {
                let w = (0.25 * r).max(1.0);
                (dx.abs() <= w && dy.abs() <= r) || (dy.abs() <= w && dx.abs() <= r)
            }
            Shape::Stripes => {
                if dx.abs() > r || dy.abs() > r {
                    return false;
                }
                let period = (r / 2.5).max(2.0);
                (((dy + r) / period).floor() as i64) % 2 == 0
            }
        }
    }
}

/// Renders a single image of `shape` using draws from `prng`.
pub fn render_shape(shape: Shape, side: usize, prng: &mut Prng) -> ImageTensor {
    let s = side as f64;
    let r = prng.uniform(0.2 * s, 0.35 * s);
    let cx = prng.uniform(r + 1.0, s - r - 1.0);
    let cy = prng.uniform(r + 1.0, s - r - 1.0);
    let place = Placement { cx, cy, r };
    let bg: [f64; CHANNELS] = std::array::from_fn(|_| prng.uniform(0.0, 0.4));
    let fg: [f64; CHANNELS] = std::array::from_fn(|_| prng.uniform(0.6, 1.0));

    let mut data = Vec::with_capacity(side * side * CHANNELS);
    for row in 0..side {
        for col in 0..side {
            let inside = place.covers(shape, col as f64 + 0.5, row as f64 + 0.5);
            let base = if inside { &fg } else { &bg };
            for &c in base {
                data.push(c + prng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE));
            }
        }
    }
    ImageTensor::new(side, side, data).expect("side checked by caller")
}

/// `n` images with labels balanced to within one per class, in shuffled
/// order. Deterministic in `seed`.
pub fn gen_shapes_dataset(seed: u64, n: usize, image_side: usize) -> Result<LabeledDataset> {
    if image_side < MIN_SIDE {
        return Err(Error::invalid(format!("image_side {image_side} below minimum {MIN_SIDE}")));
    }
    if n < SHAPE_CLASSES {
        return Err(Error::invalid(format!("need at least {SHAPE_CLASSES} images, got {n}")));
    }
    let mut prng = Prng::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % SHAPE_CLASSES).collect();
    prng.shuffle(&mut labels);
    let items = labels
        .into_iter()
        .map(|label| {
            let shape = Shape::from_class(label).expect("label < SHAPE_CLASSES");
            (render_shape(shape, image_side, &mut prng), label)
        })
        .collect();
    LabeledDataset::new(items, SHAPE_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_hundred() {
        let ds = gen_shapes_dataset(7, 100, 32).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.label_histogram(), vec![20; 5]);
    }

    #[test]
    fn unbalanced_count_within_one() {
        let ds = gen_shapes_dataset(1, 23, 16).unwrap();
        let h = ds.label_histogram();
        let (lo, hi) = (h.iter().min().unwrap(), h.iter().max().unwrap());
        assert!(hi - lo <= 1, "{h:?}");
    }

    #[test]
    fn deterministic_in_seed() {
        let a = gen_shapes_dataset(7, 20, 32).unwrap();
        let b = gen_shapes_dataset(7, 20, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_differ() {
        let a = gen_shapes_dataset(7, 20, 32).unwrap();
        let b = gen_shapes_dataset(8, 20, 32).unwrap();
        let differs =
            a.items().iter().zip(b.items()).any(|((x, _), (y, _))| x.data().iter().zip(y.data()).any(|(p, q)| p != q));
        assert!(differs);
    }

    #[test]
    fn small_side_rejected() {
        assert!(matches!(gen_shapes_dataset(1, 10, 15), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pixels_in_range() {
        let ds = gen_shapes_dataset(3, 50, 24).unwrap();
        for (img, label) in ds.items() {
            assert!(*label < SHAPE_CLASSES);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn every_shape_draws_foreground() {
        let mut p = Prng::new(2);
        for class in 0..SHAPE_CLASSES {
            let img = render_shape(Shape::from_class(class).unwrap(), 32, &mut p);
            // Foreground channels start at 0.6 and background tops out at 0.4;
            // with noise 0.05 the two ranges never meet.
            let bright = (0..32 * 32).filter(|&i| img.data()[i * 3] > 0.5).count();
            assert!(bright > 10, "class {class} has {bright} foreground pixels");
        }
    }
}
