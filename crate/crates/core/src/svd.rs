//! Truncated-SVD image defense.
//!
//! Each colour channel is factorised with one-sided (Hestenes) Jacobi,
//! truncated to the smallest rank whose singular values carry a fraction `I`
//! of the total mass, reconstructed, and clamped back into [0, 1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::matrix::Matrix;

/// Off-diagonal tolerance: a column pair is orthogonal once
/// |a_p · a_q| <= TOL * ‖a_p‖ ‖a_q‖.
const TOL: f64 = 1e-13;
const MAX_SWEEPS: usize = 80;

/// `M = U diag(sigma) Vᵀ` with `r = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// m×r, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    /// r×n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn m(&self) -> usize {
        self.u.rows()
    }

    pub fn n(&self) -> usize {
        self.vt.cols()
    }

    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonalises the columns of a tall (m >= n) matrix given as column
/// vectors. Returns (columns of A·V, columns of V).
fn hestenes(mut a: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                let (lo, hi) = v.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (a, v)
}

/// Modified Gram-Schmidt over `cols` in order; columns that vanish (or are
/// flagged missing) are replaced by completing the basis with unit vectors.
fn orthonormalise(cols: &mut [Option<Vec<f64>>], dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    let mut next_unit = 0;
    for col in cols.iter_mut() {
        let mut candidate = col.take();
        loop {
            let mut v = match candidate.take() {
                Some(v) => v,
                None => {
                    assert!(next_unit < dim, "basis completion ran out of unit vectors");
                    let mut e = vec![0.0; dim];
                    e[next_unit] = 1.0;
                    next_unit += 1;
                    e
                }
            };
            let before = dot(&v, &v).sqrt();
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let after = dot(&v, &v).sqrt();
            if after > 0.5 * before && after > 0.0 {
                v.iter_mut().for_each(|x| *x /= after);
                basis.push(v);
                break;
            }
        }
    }
    basis
}

/// Thin SVD of an arbitrary finite m×n matrix.
pub fn svd_channel(mat: &Matrix) -> Result<SvdFactors> {
    let (m, n) = (mat.rows(), mat.cols());
    if m == 0 || n == 0 {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    if !mat.is_finite() {
        return Err(Error::invalid("svd input has non-finite entries"));
    }
    if m < n {
        let t = svd_channel(&mat.transpose())?;
        return Ok(SvdFactors { u: t.vt.transpose(), sigma: t.sigma, vt: t.u.transpose() });
    }

    let cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| mat.get(i, j)).collect()).collect();
    let (a, v) = hestenes(cols);
    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal singular values in column order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let s = norms[j];
            (s > f64::MIN_POSITIVE).then(|| a[j].iter().map(|x| x / s).collect())
        })
        .collect();
    let u_cols = orthonormalise(&mut u_cols, m);
    let u = Matrix::from_fn(m, n, |i, l| u_cols[l][i]);
    let vt = Matrix::from_fn(n, n, |l, j| v[order[l]][j]);
    Ok(SvdFactors { u, sigma, vt })
}

/// How the retained fraction of a spectrum is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassMode {
    /// Σσ, the share of singular-value mass.
    #[default]
    Sigma,
    /// Σσ², the share of energy.
    Energy,
}

/// Smallest k in 1..=r whose leading singular values hold at least `info`
/// of the total mass.
pub fn rank_for_info(sigma: &[f64], info: f64) -> Result<usize> {
    rank_for_info_with(sigma, info, MassMode::Sigma)
}

pub fn rank_for_info_with(sigma: &[f64], info: f64, mode: MassMode) -> Result<usize> {
    if !(info > 0.0 && info <= 1.0) {
        return Err(Error::invalid(format!("information fraction {info} outside (0, 1]")));
    }
    if sigma.is_empty() || sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid("singular values must be finite and non-negative"));
    }
    let weight = |s: f64| match mode {
        MassMode::Sigma => s,
        MassMode::Energy => s * s,
    };
    let total: f64 = sigma.iter().map(|&s| weight(s)).sum();
    if total <= 0.0 {
        return Err(Error::invalid("all singular values are zero"));
    }
    // Relative slack absorbs rounding in the running sum.
    let goal = info * total - 1e-12 * total;
    let mut cum = 0.0;
    for (k, &s) in sigma.iter().enumerate() {
        cum += weight(s);
        if cum >= goal {
            return Ok(k + 1);
        }
    }
    Ok(sigma.len())
}

/// Σ_{l<k} σ_l u_l v_lᵀ.
pub fn reconstruct_rank_k(f: &SvdFactors, k: usize) -> Result<Matrix> {
    if k == 0 || k > f.rank_bound() {
        return Err(Error::invalid(format!("rank {k} outside 1..={}", f.rank_bound())));
    }
    let (m, n) = (f.m(), f.n());
    let mut out = Matrix::zeros(m, n);
    for l in 0..k {
        let s = f.sigma[l];
        if s == 0.0 {
            continue;
        }
        let vrow = f.vt.row(l);
        for i in 0..m {
            let coef = s * f.u.get(i, l);
            for (o, &v) in out.row_mut(i).iter_mut().zip(vrow) {
                *o += coef * v;
            }
        }
    }
    Ok(out)
}

/// Per-channel factorisations of one image, reusable across many `I`.
#[derive(Debug, Clone)]
pub struct PreparedSvd {
    height: usize,
    width: usize,
    factors: Vec<SvdFactors>,
}

impl PreparedSvd {
    pub fn new(x: &ImageTensor) -> Result<Self> {
        let factors = (0..CHANNELS)
            .map(|ch| svd_channel(&Matrix::from_vec(x.height(), x.width(), x.channel(ch))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { height: x.height(), width: x.width(), factors })
    }

    pub fn factors(&self) -> &[SvdFactors] {
        &self.factors
    }

    /// Rank chosen for each channel at `info`. A channel whose spectrum is
    /// entirely zero keeps rank 1 (it reconstructs to zero either way).
    pub fn ranks(&self, info: f64, mode: MassMode) -> Result<Vec<usize>> {
        self.factors
            .iter()
            .map(|f| match rank_for_info_with(&f.sigma, info, mode) {
                Err(_) if f.sigma.iter().all(|&s| s == 0.0) => Ok(1),
                other => other,
            })
            .collect()
    }

    pub fn reconstruct(&self, info: f64, mode: MassMode) -> Result<ImageTensor> {
        let ranks = self.ranks(info, mode)?;
        let planes = self
            .factors
            .iter()
            .zip(ranks)
            .map(|(f, k)| reconstruct_rank_k(f, k).map(Matrix::into_data))
            .collect::<Result<Vec<_>>>()?;
        ImageTensor::from_channels(self.height, self.width, [&planes[0], &planes[1], &planes[2]])
    }
}

/// Truncated-SVD projection of every channel at information fraction `info`
/// (σ-mass), clamped to [0, 1].
pub fn defend_svd(x: &ImageTensor, info: f64) -> Result<ImageTensor> {
    defend_svd_with(x, info, MassMode::Sigma)
}

pub fn defend_svd_with(x: &ImageTensor, info: f64, mode: MassMode) -> Result<ImageTensor> {
    if !(info > 0.0 && info <= 1.0) {
        return Err(Error::invalid(format!("information fraction {info} outside (0, 1]")));
    }
    PreparedSvd::new(x)?.reconstruct(info, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    fn random_matrix(m: usize, n: usize, prng: &mut Prng) -> Matrix {
        Matrix::from_fn(m, n, |_, _| prng.uniform(-1.0, 1.0))
    }

    fn reconstruct(f: &SvdFactors) -> Matrix {
        reconstruct_rank_k(f, f.rank_bound()).unwrap()
    }

    #[test]
    fn identity_three() {
        let f = svd_channel(&Matrix::identity(3)).unwrap();
        for s in &f.sigma {
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal() {
        let f = svd_channel(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0, 1.0]);
        let unordered = svd_channel(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(unordered.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn rank_one_truncation_of_diagonal() {
        let f = svd_channel(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        let r1 = reconstruct_rank_k(&f, 1).unwrap();
        assert!(r1.sub(&Matrix::diag(&[3.0, 0.0, 0.0])).max_abs() < 1e-15);
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        let mut prng = Prng::new(1);
        for (m, n) in [(5, 9), (9, 5), (1, 4), (4, 1), (1, 1)] {
            let a = random_matrix(m, n, &mut prng);
            let f = svd_channel(&a).unwrap();
            assert_eq!(f.sigma.len(), m.min(n));
            assert_eq!((f.u.rows(), f.u.cols()), (m, m.min(n)));
            assert_eq!((f.vt.rows(), f.vt.cols()), (m.min(n), n));
            assert!(reconstruct(&f).sub(&a).frobenius_norm() <= 1e-8 * a.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn zero_and_rank_deficient_matrices() {
        let z = svd_channel(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(z.sigma, vec![0.0; 3]);
        let utu = z.u.transpose().matmul(&z.u);
        assert!(utu.sub(&Matrix::identity(3)).max_abs() < 1e-12);

        let c = Matrix::from_fn(6, 6, |_, _| 0.4);
        let f = svd_channel(&c).unwrap();
        assert!((f.sigma[0] - 2.4).abs() < 1e-12);
        assert!(f.sigma[1..].iter().all(|&s| s < 1e-12));
        let utu = f.u.transpose().matmul(&f.u);
        assert!(utu.sub(&Matrix::identity(6)).max_abs() < 1e-8);
    }

    #[test]
    fn non_finite_rejected() {
        let mut a = Matrix::zeros(2, 2);
        a.set(0, 1, f64::NAN);
        assert!(matches!(svd_channel(&a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rank_for_info_cases() {
        assert_eq!(rank_for_info(&[10.0, 5.0, 3.0, 2.0], 0.75).unwrap(), 2);
        assert_eq!(rank_for_info(&[10.0, 5.0, 3.0, 2.0], 0.76).unwrap(), 3);
        assert_eq!(rank_for_info(&[10.0, 5.0, 0.0, 0.0], 1.0).unwrap(), 2);
        assert_eq!(rank_for_info(&[1.0], 0.3).unwrap(), 1);
        assert_eq!(rank_for_info(&[1.0], 1.0).unwrap(), 1);
        assert!(rank_for_info(&[0.0, 0.0], 0.5).is_err());
        assert!(rank_for_info(&[1.0], 0.0).is_err());
        assert!(rank_for_info(&[1.0], 1.1).is_err());
        // Energy: 100/138 < 0.75 <= 125/138.
        assert_eq!(rank_for_info_with(&[10.0, 5.0, 3.0, 2.0], 0.75, MassMode::Energy).unwrap(), 2);
        assert_eq!(rank_for_info_with(&[10.0, 5.0, 3.0, 2.0], 0.7, MassMode::Energy).unwrap(), 1);
    }

    #[test]
    fn reconstruct_rank_out_of_range() {
        let f = svd_channel(&Matrix::identity(3)).unwrap();
        assert!(reconstruct_rank_k(&f, 0).is_err());
        assert!(reconstruct_rank_k(&f, 4).is_err());
    }

    #[test]
    fn full_info_is_identity_up_to_quantisation() {
        let ds = crate::shapes::gen_shapes_dataset(3, 5, 32).unwrap();
        for (img, _) in ds.items() {
            let out = defend_svd(img, 1.0).unwrap();
            assert!(out.max_abs_diff(img) <= 1.0 / 255.0);
        }
    }

    #[test]
    fn constant_image_unchanged() {
        let img = ImageTensor::new(8, 8, (0..8 * 8).flat_map(|_| [0.2, 0.5, 0.9]).collect()).unwrap();
        for info in [0.1, 0.5, 0.9, 1.0] {
            assert!(defend_svd(&img, info).unwrap().max_abs_diff(&img) < 1e-12);
        }
    }

    #[test]
    fn lower_info_smooths_more() {
        let ds = crate::shapes::gen_shapes_dataset(3, 5, 32).unwrap();
        let img = &ds.items()[0].0;
        let prep = PreparedSvd::new(img).unwrap();
        let hi = prep.ranks(0.99, MassMode::Sigma).unwrap();
        let lo = prep.ranks(0.9, MassMode::Sigma).unwrap();
        assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
        assert!(lo.iter().sum::<usize>() < hi.iter().sum::<usize>());
    }
}
