#![allow(clippy::needless_range_loop)]

use defdr_core::matrix::Matrix;
use defdr_core::svd::{
    defend_svd, rank_for_info, rank_for_info_with, reconstruct_rank_k, svd_channel, MassMode, PreparedSvd,
};
use defdr_core::{ImageTensor, Prng};
use proptest::prelude::*;

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut prng = Prng::new(seed);
    Matrix::from_fn(rows, cols, |_, _| prng.uniform(-1.0, 1.0))
}

fn gram_defect(m: &Matrix) -> f64 {
    m.transpose().matmul(m).sub(&Matrix::identity(m.cols())).max_abs()
}

fn shape() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=12, 1usize..=12, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factors_are_orthonormal_and_reconstruct((m, n, seed) in shape()) {
        let a = random_matrix(m, n, seed);
        let f = svd_channel(&a).unwrap();
        let r = m.min(n);
        prop_assert_eq!(f.sigma.len(), r);
        prop_assert!(gram_defect(&f.u) <= 1e-8);
        prop_assert!(gram_defect(&f.vt.transpose()) <= 1e-8);
        prop_assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(f.sigma.iter().all(|&s| s >= 0.0));
        let back = reconstruct_rank_k(&f, r).unwrap();
        prop_assert!(back.sub(&a).max_abs() <= 1e-8);
    }

    #[test]
    fn singular_values_match_gram_eigenvalues((m, n, seed) in shape()) {
        let a = random_matrix(m, n, seed);
        let f = svd_channel(&a).unwrap();
        let gram = if m >= n { a.transpose().matmul(&a) } else { a.matmul(&a.transpose()) };
        let eig = jacobi_eigenvalues(&gram);
        for (s, e) in f.sigma.iter().zip(&eig) {
            prop_assert!((s * s - e.max(0.0)).abs() <= 1e-8 * (1.0 + e.abs()), "{} vs {}", s * s, e);
        }
    }

    #[test]
    fn eckart_young_tail((m, n, seed) in shape(), pick in any::<prop::sample::Index>()) {
        let a = random_matrix(m, n, seed);
        let f = svd_channel(&a).unwrap();
        let k = 1 + pick.index(f.sigma.len());
        let err = reconstruct_rank_k(&f, k).unwrap().sub(&a).frobenius_norm().powi(2);
        let tail: f64 = f.sigma[k..].iter().map(|s| s * s).sum();
        prop_assert!((err - tail).abs() <= 1e-6, "{err} vs {tail}");
    }

    #[test]
    fn rank_is_monotone_in_info(
        mut sigma in prop::collection::vec(0.0f64..10.0, 1..20),
        a in 0.001f64..=1.0,
        b in 0.001f64..=1.0,
    ) {
        sigma.sort_by(|x, y| y.total_cmp(x));
        prop_assume!(sigma[0] > 0.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for mode in [MassMode::Sigma, MassMode::Energy] {
            let (k_lo, k_hi) = (
                rank_for_info_with(&sigma, lo, mode).unwrap(),
                rank_for_info_with(&sigma, hi, mode).unwrap(),
            );
            prop_assert!(1 <= k_lo && k_lo <= k_hi && k_hi <= sigma.len());
        }
    }

    #[test]
    fn reconstruction_error_shrinks_with_info((side, seed) in (2usize..=10, any::<u64>())) {
        let mut prng = Prng::new(seed);
        let data = (0..side * side * 3).map(|_| prng.next_f64()).collect();
        let x = ImageTensor::new(side, side, data).unwrap();
        let prepared = PreparedSvd::new(&x).unwrap();
        let mut last = f64::INFINITY;
        for info in [0.3, 0.6, 0.9, 1.0] {
            let channel_err: f64 = prepared
                .factors()
                .iter()
                .zip(prepared.ranks(info, MassMode::Sigma).unwrap())
                .map(|(f, k)| f.sigma[k..].iter().map(|s| s * s).sum::<f64>())
                .sum();
            prop_assert!(channel_err <= last + 1e-12);
            last = channel_err;
        }
        prop_assert!(last <= 1e-20);
    }
}

#[test]
fn rank_for_info_hand_values() {
    let sigma = [4.0, 3.0, 2.0, 1.0];
    assert_eq!(rank_for_info(&sigma, 0.4).unwrap(), 1);
    assert_eq!(rank_for_info(&sigma, 0.41).unwrap(), 2);
    assert_eq!(rank_for_info(&sigma, 0.7).unwrap(), 2);
    assert_eq!(rank_for_info(&sigma, 0.9).unwrap(), 3);
    assert_eq!(rank_for_info(&sigma, 1.0).unwrap(), 4);
    assert_eq!(rank_for_info_with(&sigma, 16.0 / 30.0, MassMode::Energy).unwrap(), 1);
}

#[test]
fn defended_pixels_stay_in_range() {
    let mut prng = Prng::new(9);
    let data = (0..16 * 16 * 3).map(|_| prng.next_f64()).collect();
    let x = ImageTensor::new(16, 16, data).unwrap();
    for info in [0.1, 0.5, 0.95] {
        let y = defend_svd(&x, info).unwrap();
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
