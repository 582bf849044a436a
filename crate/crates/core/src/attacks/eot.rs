//! Expectation-over-Transformation transforms for patches.
//!
//! A transform rotates the patch about its centre (bilinear resampling,
//! reads outside the patch return neutral gray 0.5), scales brightness, and
//! clamps to [0, 1]. Translation is carried along and applied by the caller
//! as an offset of the paste corner.

use serde::{Deserialize, Serialize};

use super::patch::PatchPixels;
use crate::error::{Error, Result};
use crate::image::CHANNELS;
use crate::prng::Prng;

/// Sample value for bilinear taps that fall outside the patch.
pub const OUT_OF_SUPPORT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EotParams {
    /// Largest corner offset in pixels along each axis.
    pub max_translation: usize,
    /// Largest rotation magnitude in degrees, at most 45.
    pub max_rotation: f64,
    /// Multiplicative brightness range; `lo <= 1 <= hi`.
    pub brightness_range: (f64, f64),
}

impl EotParams {
    pub fn identity() -> Self {
        Self { max_translation: 0, max_rotation: 0.0, brightness_range: (1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.brightness_range;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("brightness range ({lo}, {hi}) must satisfy 0 < lo <= 1 <= hi")));
        }
        if !(0.0..=45.0).contains(&self.max_rotation) {
            return Err(Error::invalid("max_rotation must lie in [0, 45] degrees"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.max_translation == 0 && self.max_rotation == 0.0 && self.brightness_range == (1.0, 1.0)
    }
}

impl Default for EotParams {
    fn default() -> Self {
        Self { max_translation: 2, max_rotation: 20.0, brightness_range: (0.8, 1.2) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    /// Row offset of the paste corner.
    pub dy: i64,
    /// Column offset of the paste corner.
    pub dx: i64,
    /// Counter-clockwise rotation in degrees.
    pub angle_deg: f64,
    pub brightness: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self { dy: 0, dx: 0, angle_deg: 0.0, brightness: 1.0 }
    }
}

/// Independent uniform draws, in order: row offset, column offset, angle,
/// brightness.
pub fn sample_transform(prng: &mut Prng, eot: &EotParams) -> Transform {
    let t = eot.max_translation as i64;
    let dy = prng.range_inclusive(-t, t);
    let dx = prng.range_inclusive(-t, t);
    let angle_deg = prng.uniform(-eot.max_rotation, eot.max_rotation);
    let (lo, hi) = eot.brightness_range;
    let brightness = prng.uniform(lo, hi);
    Transform { dy, dx, angle_deg, brightness }
}

/// One bilinear tap: source pixel (or None when outside) and weight.
type Tap = (Option<(usize, usize)>, f64);

/// The four bilinear taps feeding output pixel (row, col) under a rotation.
fn taps(side: usize, row: usize, col: usize, cos: f64, sin: f64) -> [Tap; 4] {
    let ctr = (side as f64 - 1.0) / 2.0;
    // Image rows grow downward; rotate in a y-up frame.
    let x = col as f64 - ctr;
    let y = ctr - row as f64;
    let xs = x * cos + y * sin;
    let ys = -x * sin + y * cos;
    let sc = ctr + xs;
    let sr = ctr - ys;
    let (r0, c0) = (sr.floor(), sc.floor());
    let (fr, fc) = (sr - r0, sc - c0);
    let at = |r: f64, c: f64| {
        if r >= 0.0 && c >= 0.0 && r < side as f64 && c < side as f64 {
            Some((r as usize, c as usize))
        } else {
            None
        }
    };
    [
        (at(r0, c0), (1.0 - fr) * (1.0 - fc)),
        (at(r0, c0 + 1.0), (1.0 - fr) * fc),
        (at(r0 + 1.0, c0), fr * (1.0 - fc)),
        (at(r0 + 1.0, c0 + 1.0), fr * fc),
    ]
}

/// Rotated samples before brightness and clamping.
fn rotate(p: &PatchPixels, angle_deg: f64) -> Vec<f64> {
    if angle_deg == 0.0 {
        return p.data().to_vec();
    }
    let s = p.side();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = vec![0.0; p.data().len()];
    for row in 0..s {
        for col in 0..s {
            let taps = taps(s, row, col, cos, sin);
            for ch in 0..CHANNELS {
                let mut v = 0.0;
                for (src, w) in taps {
                    v += w * match src {
                        Some((r, c)) => p.get(r, c, ch),
                        None => OUT_OF_SUPPORT,
                    };
                }
                out[(row * s + col) * CHANNELS + ch] = v;
            }
        }
    }
    out
}

pub fn apply_transform(p: &PatchPixels, t: &Transform) -> PatchPixels {
    let data = rotate(p, t.angle_deg).into_iter().map(|v| (v * t.brightness).clamp(0.0, 1.0)).collect();
    PatchPixels::new(p.side(), data).expect("same size")
}

/// Transpose of [`apply_transform`]'s Jacobian applied to `grad_out`: maps a
/// gradient on the transformed patch back onto the source patch. Samples
/// pushed outside [0, 1] by brightness contribute no gradient.
pub fn apply_transform_backward(p: &PatchPixels, t: &Transform, grad_out: &[f64]) -> Vec<f64> {
    let s = p.side();
    let pre = rotate(p, t.angle_deg);
    let scaled: Vec<f64> = pre
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| {
            let b = v * t.brightness;
            if (0.0..=1.0).contains(&b) {
                g * t.brightness
            } else {
                0.0
            }
        })
        .collect();
    if t.angle_deg == 0.0 {
        return scaled;
    }
    let (sin, cos) = t.angle_deg.to_radians().sin_cos();
    let mut grad_in = vec![0.0; p.data().len()];
    for row in 0..s {
        for col in 0..s {
            let taps = taps(s, row, col, cos, sin);
            for ch in 0..CHANNELS {
                let g = scaled[(row * s + col) * CHANNELS + ch];
                if g == 0.0 {
                    continue;
                }
                for (src, w) in taps {
                    if let Some((r, c)) = src {
                        grad_in[(r * s + c) * CHANNELS + ch] += w * g;
                    }
                }
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_params_give_identity_transform() {
        let mut prng = Prng::new(3);
        for _ in 0..10 {
            assert_eq!(sample_transform(&mut prng, &EotParams::identity()), Transform::identity());
        }
    }

    #[test]
    fn brightness_mean() {
        let eot = EotParams { max_translation: 0, max_rotation: 0.0, brightness_range: (0.8, 1.2) };
        let mut prng = Prng::new(42);
        let n = 10_000;
        let mean = (0..n).map(|_| sample_transform(&mut prng, &eot).brightness).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn translations_in_range() {
        let eot = EotParams { max_translation: 3, max_rotation: 10.0, brightness_range: (0.9, 1.1) };
        let mut prng = Prng::new(8);
        let mut hit_edge = false;
        for _ in 0..2000 {
            let t = sample_transform(&mut prng, &eot);
            assert!(t.dx.abs() <= 3 && t.dy.abs() <= 3);
            assert!(t.angle_deg.abs() <= 10.0);
            assert!((0.9..=1.1).contains(&t.brightness));
            hit_edge |= t.dx == -3 || t.dy == 3;
        }
        assert!(hit_edge);
    }

    #[test]
    fn identity_transform_leaves_patch() {
        let p = PatchPixels::random(5, &mut Prng::new(1));
        assert_eq!(apply_transform(&p, &Transform::identity()), p);
    }

    #[test]
    fn quarter_turn_moves_hot_pixel() {
        let s = 5;
        let mut data = vec![0.0; s * s * 3];
        data[..3].copy_from_slice(&[1.0, 1.0, 1.0]);
        let p = PatchPixels::new(s, data).unwrap();
        let t = Transform { angle_deg: 90.0, ..Transform::identity() };
        let out = apply_transform(&p, &t);
        // Counter-clockwise quarter turn: (r, c) -> (s - 1 - c, r).
        let (hr, hc) = (s - 1, 0);
        for r in 0..s {
            for c in 0..s {
                let expect = if (r, c) == (hr, hc) { 1.0 } else { 0.0 };
                assert!((out.get(r, c, 0) - expect).abs() < 1e-9, "({r},{c}) = {}", out.get(r, c, 0));
            }
        }
    }

    #[test]
    fn brightness_clamps() {
        let p = PatchPixels::constant(4, 0.8);
        let t = Transform { brightness: 1.5, ..Transform::identity() };
        assert_eq!(apply_transform(&p, &t), PatchPixels::constant(4, 1.0));
    }

    #[test]
    fn rotation_reads_gray_outside() {
        // A 45-degree turn of a black patch pulls gray in at the corners.
        let p = PatchPixels::constant(6, 0.0);
        let t = Transform { angle_deg: 45.0, ..Transform::identity() };
        let out = apply_transform(&p, &t);
        assert!(out.get(0, 0, 0) > 0.1);
        assert!(out.get(3, 3, 0) < 1e-12);
    }

    #[test]
    fn backward_is_transpose() {
        // <J v, u> = <v, J^T u> for the linear (unclamped) part.
        let mut prng = Prng::new(12);
        let s = 6;
        let p = PatchPixels::new(s, (0..s * s * 3).map(|_| prng.uniform(0.3, 0.6)).collect()).unwrap();
        let t = Transform { angle_deg: 23.0, brightness: 1.1, ..Transform::identity() };
        let u: Vec<f64> = (0..s * s * 3).map(|_| prng.uniform(-1.0, 1.0)).collect();
        let jt_u = apply_transform_backward(&p, &t, &u);
        // Finite-difference directional derivative along a random v.
        let v: Vec<f64> = (0..s * s * 3).map(|_| prng.uniform(-1.0, 1.0)).collect();
        let h = 1e-6;
        let plus = PatchPixels::new(s, p.data().iter().zip(&v).map(|(a, b)| a + h * b).collect()).unwrap();
        let minus = PatchPixels::new(s, p.data().iter().zip(&v).map(|(a, b)| a - h * b).collect()).unwrap();
        let (fp, fm) = (apply_transform(&plus, &t), apply_transform(&minus, &t));
        let jv_u: f64 = fp.data().iter().zip(fm.data()).zip(&u).map(|((a, b), w)| (a - b) / (2.0 * h) * w).sum();
        let v_jtu: f64 = v.iter().zip(&jt_u).map(|(a, b)| a * b).sum();
        assert!((jv_u - v_jtu).abs() < 1e-6 * v_jtu.abs().max(1.0), "{jv_u} vs {v_jtu}");
    }

    #[test]
    fn invalid_params() {
        let e = EotParams { brightness_range: (1.1, 1.2), ..EotParams::default() };
        assert!(e.validate().is_err());
        let e = EotParams { max_rotation: 50.0, ..EotParams::default() };
        assert!(e.validate().is_err());
        assert!(EotParams::default().validate().is_ok());
    }
}
