//! Exact t-SNE and the tile-blend image defense built on it.
//!
//! Affinities are computed densely (O(n²)); the optimiser is plain gradient
//! descent with momentum and early exaggeration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_unit, ImageTensor, CHANNELS};
use crate::matrix::Matrix;
use crate::prng::Prng;

const SIGMA_LO: f64 = 1e-10;
const SIGMA_HI: f64 = 1e10;
const BISECTION_STEPS: usize = 50;
const PERPLEXITY_RTOL: f64 = 1e-3;
const EARLY_STOP_RTOL: f64 = 1e-9;
const DUPLICATE_EPS: f64 = 1e-12;
const Q_FLOOR: f64 = 1e-12;
const INIT_SCALE: f64 = 1e-2;

/// Similarity kernel used in the embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    /// `(1 + d²)⁻¹`
    #[default]
    StudentT,
    /// `exp(−d²)`
    Gaussian,
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student-t" | "studentt" | "t" => Ok(Kernel::StudentT),
            "gaussian" => Ok(Kernel::Gaussian),
            other => Err(Error::invalid(format!("unknown kernel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub embed_dim: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches to `final_momentum`.
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub kernel: Kernel,
    /// Seed for the embedding initialisation inside `defend_tsne`.
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 10.0,
            embed_dim: 2,
            iterations: 500,
            learning_rate: 100.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 4.0,
            exaggeration_iters: 100,
            kernel: Kernel::StudentT,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity.is_finite() && self.perplexity > 0.0) {
            return Err(Error::invalid("perplexity must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        for (name, m) in [("initial_momentum", self.initial_momentum), ("final_momentum", self.final_momentum)] {
            if !(m.is_finite() && (0.0..1.0).contains(&m)) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.exaggeration.is_finite() && self.exaggeration > 0.0) {
            return Err(Error::invalid("exaggeration must be positive"));
        }
        Ok(())
    }
}

/// Symmetric, non-negative, zero-diagonal matrix summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(Matrix);

impl AffinityMatrix {
    /// Checks the affinity invariants to within `1e-9`.
    pub fn new(m: Matrix) -> Result<Self> {
        let n = m.rows();
        if n != m.cols() || !m.is_finite() {
            return Err(Error::invalid("affinities must be a finite square matrix"));
        }
        for i in 0..n {
            if m.get(i, i) != 0.0 {
                return Err(Error::invalid("affinity diagonal must be zero"));
            }
            for j in 0..n {
                if m.get(i, j) < 0.0 || (m.get(i, j) - m.get(j, i)).abs() > 1e-9 {
                    return Err(Error::invalid("affinities must be symmetric and non-negative"));
                }
            }
        }
        let total: f64 = m.data().iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("affinities sum to {total}, not 1")));
        }
        Ok(AffinityMatrix(m))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.data().iter().sum()
    }
}

/// Outcome of the per-point bandwidth search.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSearch {
    pub sigma: f64,
    /// Conditional probabilities, aligned with the input row.
    pub probs: Vec<f64>,
    /// `2^H` of `probs` (equivalently `e^H` with `H` in nats).
    pub perplexity: f64,
    /// Set when the target could not be reached and `sigma` fell back to the
    /// bracket midpoint.
    pub unattained: bool,
}

fn conditional_row(sq: &[f64], sigma: f64) -> (Vec<f64>, f64) {
    let min = sq.iter().copied().fold(f64::INFINITY, f64::min);
    let beta = 1.0 / (2.0 * sigma * sigma);
    let mut p: Vec<f64> = sq.iter().map(|&d| (-(d - min) * beta).exp()).collect();
    let total: f64 = p.iter().sum();
    let mut weighted = 0.0;
    for (v, d) in p.iter_mut().zip(sq) {
        *v /= total;
        weighted += *v * (d - min);
    }
    // Entropy in nats: ln Z + β E[d − min].
    let h = total.ln() + beta * weighted;
    (p, h.exp())
}

/// Finds σ such that the conditional distribution over `sq_dists_row` has the
/// requested perplexity, by bisection in log-space.
pub fn sigma_for_perplexity(sq_dists_row: &[f64], target_perplexity: f64) -> Result<SigmaSearch> {
    if sq_dists_row.len() < 2 {
        return Err(Error::invalid("distance row needs at least two entries"));
    }
    if sq_dists_row.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::invalid("squared distances must be finite and non-negative"));
    }
    if !(target_perplexity.is_finite() && target_perplexity > 0.0) {
        return Err(Error::invalid("target perplexity must be positive"));
    }
    if target_perplexity > sq_dists_row.len() as f64 {
        return Err(Error::invalid(format!(
            "perplexity {target_perplexity} exceeds the {} available neighbours",
            sq_dists_row.len()
        )));
    }
    let (mut lo, mut hi) = (SIGMA_LO, SIGMA_HI);
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for _ in 0..BISECTION_STEPS {
        let mid = (lo * hi).sqrt();
        let (p, perp) = conditional_row(sq_dists_row, mid);
        let err = (perp - target_perplexity).abs();
        if best.as_ref().is_none_or(|b| err < (b.2 - target_perplexity).abs()) {
            best = Some((mid, p, perp));
        }
        if err <= EARLY_STOP_RTOL * target_perplexity {
            break;
        }
        if perp > target_perplexity {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (sigma, probs, perplexity) = best.expect("at least one bisection step");
    if (perplexity - target_perplexity).abs() <= PERPLEXITY_RTOL * target_perplexity {
        return Ok(SigmaSearch { sigma, probs, perplexity, unattained: false });
    }
    let sigma = (SIGMA_LO * SIGMA_HI).sqrt();
    let (probs, perplexity) = conditional_row(sq_dists_row, sigma);
    Ok(SigmaSearch { sigma, probs, perplexity, unattained: true })
}

/// High-dimensional affinities together with the per-row bandwidth searches.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub p: AffinityMatrix,
    pub rows: Vec<SigmaSearch>,
}

impl Affinities {
    pub fn unattained_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.unattained).count()
    }
}

/// Squared Euclidean distances with zero off-diagonal entries nudged up.
pub fn squared_distances(points: &Matrix) -> Matrix {
    let n = points.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s: f64 = points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if s == 0.0 {
                s = DUPLICATE_EPS;
            }
            d.set(i, j, s);
            d.set(j, i, s);
        }
    }
    d
}

pub fn pairwise_affinities(points: &Matrix, perplexity: f64) -> Result<Affinities> {
    let n = points.rows();
    if n < 3 {
        return Err(Error::invalid("t-SNE needs at least three points"));
    }
    if !points.is_finite() {
        return Err(Error::invalid("points must be finite"));
    }
    let d = squared_distances(points);
    let mut cond = Matrix::zeros(n, n);
    let mut rows = Vec::with_capacity(n);
    let mut others = Vec::with_capacity(n - 1);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&j| j != i).map(|j| d.get(i, j)));
        let search = sigma_for_perplexity(&others, perplexity)?;
        for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
            cond.set(i, j, search.probs[k]);
        }
        rows.push(search);
    }
    let scale = 1.0 / (2.0 * n as f64);
    let p = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (cond.get(i, j) + cond.get(j, i)) * scale });
    Ok(Affinities { p: AffinityMatrix(p), rows })
}

/// Returns `Q` and the unnormalised kernel values. Gaussian values share a
/// common scale factor chosen to avoid underflow.
pub fn low_dim_affinities(y: &Matrix, kernel: Kernel) -> Result<(AffinityMatrix, Matrix)> {
    let n = y.rows();
    if n < 3 {
        return Err(Error::invalid("t-SNE needs at least three points"));
    }
    let mut d = Matrix::zeros(n, n);
    let mut dmin = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.set(i, j, s);
            d.set(j, i, s);
            dmin = dmin.min(s);
        }
    }
    let terms = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            match kernel {
                Kernel::StudentT => 1.0 / (1.0 + d.get(i, j)),
                Kernel::Gaussian => (-(d.get(i, j) - dmin)).exp(),
            }
        }
    });
    let total: f64 = terms.data().iter().sum();
    let q = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (terms.get(i, j) / total).max(Q_FLOOR) });
    Ok((AffinityMatrix(q), terms))
}

/// `KL(P‖Q)` in nats over off-diagonal pairs.
pub fn kl_cost(p: &AffinityMatrix, q: &AffinityMatrix) -> Result<f64> {
    if p.n() != q.n() {
        return Err(Error::invalid("P and Q must have the same size"));
    }
    let mut c = 0.0;
    for (pv, qv) in p.0.data().iter().zip(q.0.data()) {
        if *pv > 0.0 {
            c += pv * (pv / qv).ln();
        }
    }
    Ok(c)
}

fn gradient_into(p: &Matrix, p_scale: f64, q: &Matrix, terms: &Matrix, y: &Matrix, kernel: Kernel, grad: &mut Matrix) {
    let n = y.rows();
    let e = y.cols();
    for i in 0..n {
        let gi = grad.row_mut(i);
        gi.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut coeff = p_scale * p.get(i, j) - q.get(i, j);
            if kernel == Kernel::StudentT {
                coeff *= terms.get(i, j);
            }
            let (yi, yj) = (y.row(i), y.row(j));
            for k in 0..e {
                gi[k] += 4.0 * coeff * (yi[k] - yj[k]);
            }
        }
    }
}

/// Analytic gradient of `KL(P‖Q(Y))` with respect to `Y`.
pub fn kl_gradient(p: &AffinityMatrix, y: &Matrix, kernel: Kernel) -> Result<Matrix> {
    if p.n() != y.rows() {
        return Err(Error::invalid("P and Y disagree on the number of points"));
    }
    let (q, terms) = low_dim_affinities(y, kernel)?;
    let mut g = Matrix::zeros(y.rows(), y.cols());
    gradient_into(&p.0, 1.0, &q.0, &terms, y, kernel, &mut g);
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub y: Matrix,
    /// KL against the unexaggerated `P`, one entry per iteration.
    pub cost_history: Vec<f64>,
    pub unattained_rows: usize,
}

/// One optimiser step's worth of work over the upper triangle: fills `grad`
/// for the exaggerated `P` and returns the KL cost for the plain `P`.
struct StepBuffers {
    terms: Vec<f64>,
    grad: Vec<f64>,
}

fn kl_step(p: &Matrix, p_entropy: f64, alpha: f64, y: &[f64], e: usize, kernel: Kernel, buf: &mut StepBuffers) -> f64 {
    let n = p.rows();
    let mut idx = 0;
    let mut dmin = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d = 0.0;
            for k in 0..e {
                let t = y[i * e + k] - y[j * e + k];
                d += t * t;
            }
            buf.terms[idx] = d;
            dmin = dmin.min(d);
            idx += 1;
        }
    }
    let mut z = 0.0;
    for t in &mut buf.terms[..idx] {
        *t = match kernel {
            Kernel::StudentT => 1.0 / (1.0 + *t),
            Kernel::Gaussian => (-(*t - dmin)).exp(),
        };
        z += 2.0 * *t;
    }
    let ln_z = z.ln();
    buf.grad.iter_mut().for_each(|g| *g = 0.0);
    let mut cross = 0.0;
    idx = 0;
    for i in 0..n {
        let prow = p.row(i);
        for j in (i + 1)..n {
            let term = buf.terms[idx];
            idx += 1;
            let q = term / z;
            let pij = prow[j];
            if pij > 0.0 {
                let ln_q = if q >= Q_FLOOR { term.ln() - ln_z } else { Q_FLOOR.ln() };
                cross += pij * ln_q;
            }
            let mut coeff = 4.0 * (alpha * pij - q);
            if kernel == Kernel::StudentT {
                coeff *= term;
            }
            for k in 0..e {
                let g = coeff * (y[i * e + k] - y[j * e + k]);
                buf.grad[i * e + k] += g;
                buf.grad[j * e + k] -= g;
            }
        }
    }
    p_entropy - 2.0 * cross
}

/// Student-t specialisation of `kl_step` that needs a single pass for the
/// gradient, using `Σ_j (αp − t/Z) t Δ = α Σ_j p t Δ − (1/Z) Σ_j t² Δ`.
fn kl_step_student(p: &Matrix, p_entropy: f64, alpha: f64, y: &[f64], e: usize, buf: &mut StepBuffers) -> f64 {
    let n = p.rows();
    let half = buf.grad.len();
    let (attract, repel) = buf.grad.split_at_mut(half / 2);
    attract.iter_mut().for_each(|g| *g = 0.0);
    repel.iter_mut().for_each(|g| *g = 0.0);
    let mut z = 0.0;
    let mut idx = 0;
    let mut diff = vec![0.0; e];
    for i in 0..n {
        let prow = p.row(i);
        let yi = &y[i * e..(i + 1) * e];
        for j in (i + 1)..n {
            let yj = &y[j * e..(j + 1) * e];
            let mut d = 0.0;
            for ((t, a), b) in diff.iter_mut().zip(yi).zip(yj) {
                *t = a - b;
                d += *t * *t;
            }
            let term = 1.0 / (1.0 + d);
            buf.terms[idx] = term;
            idx += 1;
            z += 2.0 * term;
            let a = prow[j] * term;
            let r = term * term;
            for (k, t) in diff.iter().enumerate() {
                attract[i * e + k] += a * t;
                attract[j * e + k] -= a * t;
                repel[i * e + k] += r * t;
                repel[j * e + k] -= r * t;
            }
        }
    }
    let inv_z = 1.0 / z;
    for (a, r) in attract.iter_mut().zip(repel.iter()) {
        *a = 4.0 * (alpha * *a - r * inv_z);
    }
    student_cost(p, p_entropy, z, &buf.terms)
}

/// `kl_step_student` for a compile-time embedding dimension.
fn kl_step_student_fixed<const E: usize>(
    p: &Matrix,
    p_entropy: f64,
    alpha: f64,
    y: &[f64],
    buf: &mut StepBuffers,
) -> f64 {
    let n = p.rows();
    let pts: Vec<[f64; E]> = y.chunks_exact(E).map(|c| c.try_into().expect("chunk of E")).collect();
    let mut attract = vec![[0.0; E]; n];
    let mut repel = vec![[0.0; E]; n];
    let mut z = 0.0;
    let mut idx = 0;
    for i in 0..n {
        let prow = p.row(i);
        let yi = pts[i];
        let (mut ai, mut ri) = ([0.0; E], [0.0; E]);
        for j in (i + 1)..n {
            let yj = pts[j];
            let mut diff = [0.0; E];
            let mut d = 0.0;
            for k in 0..E {
                diff[k] = yi[k] - yj[k];
                d += diff[k] * diff[k];
            }
            let term = 1.0 / (1.0 + d);
            buf.terms[idx] = term;
            idx += 1;
            z += 2.0 * term;
            let a = prow[j] * term;
            let r = term * term;
            for k in 0..E {
                ai[k] += a * diff[k];
                ri[k] += r * diff[k];
                attract[j][k] -= a * diff[k];
                repel[j][k] -= r * diff[k];
            }
        }
        for k in 0..E {
            attract[i][k] += ai[k];
            repel[i][k] += ri[k];
        }
    }
    let inv_z = 1.0 / z;
    for i in 0..n {
        for k in 0..E {
            buf.grad[i * E + k] = 4.0 * (alpha * attract[i][k] - repel[i][k] * inv_z);
        }
    }
    student_cost(p, p_entropy, z, &buf.terms)
}

fn student_cost(p: &Matrix, p_entropy: f64, z: f64, terms: &[f64]) -> f64 {
    let n = p.rows();
    let (ln_z, inv_z) = (z.ln(), 1.0 / z);
    let mut cross = 0.0;
    let mut offset = 0;
    for i in 0..n {
        let upper = &p.row(i)[i + 1..];
        for (&pij, &term) in upper.iter().zip(&terms[offset..offset + upper.len()]) {
            if pij > 0.0 {
                cross += pij * if term * inv_z >= Q_FLOOR { term.ln() - ln_z } else { Q_FLOOR.ln() };
            }
        }
        offset += upper.len();
    }
    p_entropy - 2.0 * cross
}

pub fn tsne_embed(points: &Matrix, cfg: &TsneConfig, prng: &mut Prng) -> Result<Embedding> {
    cfg.validate()?;
    let n = points.rows();
    if n < 3 {
        return Err(Error::invalid("t-SNE needs at least three points"));
    }
    if cfg.perplexity >= n as f64 {
        return Err(Error::invalid(format!("perplexity {} must be below the number of points {n}", cfg.perplexity)));
    }
    let aff = pairwise_affinities(points, cfg.perplexity)?;
    let p = aff.p.matrix();
    let p_entropy: f64 = p.data().iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum();
    let e = cfg.embed_dim;
    let mut y: Vec<f64> = (0..n * e).map(|_| INIT_SCALE * prng.normal()).collect();
    let mut velocity = vec![0.0; n * e];
    let mut buf = StepBuffers { terms: vec![0.0; n * (n - 1) / 2], grad: vec![0.0; n * e] };
    let mut student = StepBuffers { terms: vec![0.0; n * (n - 1) / 2], grad: vec![0.0; 2 * n * e] };
    let mut cost_history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let alpha = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let cost = match cfg.kernel {
            Kernel::StudentT => match e {
                2 => kl_step_student_fixed::<2>(p, p_entropy, alpha, &y, &mut student),
                3 => kl_step_student_fixed::<3>(p, p_entropy, alpha, &y, &mut student),
                _ => kl_step_student(p, p_entropy, alpha, &y, e, &mut student),
            },
            Kernel::Gaussian => kl_step(p, p_entropy, alpha, &y, e, cfg.kernel, &mut buf),
        };
        cost_history.push(cost);
        let grad = match cfg.kernel {
            Kernel::StudentT => &student.grad[..n * e],
            Kernel::Gaussian => &buf.grad[..],
        };
        let mu = if it < cfg.momentum_switch { cfg.initial_momentum } else { cfg.final_momentum };
        for ((yk, vk), gk) in y.iter_mut().zip(&mut velocity).zip(grad) {
            *vk = mu * *vk - cfg.learning_rate * gk;
            *yk += *vk;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("t-SNE diverged at iteration {it}")));
        }
    }
    let y = Matrix::from_vec(n, e, y)?;
    Ok(Embedding { y, cost_history, unattained_rows: aff.unattained_rows() })
}

/// Per-image tile embedding, reusable across information fractions.
#[derive(Debug, Clone)]
pub struct PreparedTsne {
    height: usize,
    width: usize,
    block: usize,
    tiles: Matrix,
    /// Row-normalised neighbour weights with zero diagonal.
    weights: Option<Matrix>,
}

fn check_block(x: &ImageTensor, block: usize) -> Result<(usize, usize)> {
    if block == 0 || !x.height().is_multiple_of(block) || !x.width().is_multiple_of(block) {
        return Err(Error::invalid(format!("block {block} must divide the {}x{} image", x.height(), x.width())));
    }
    let (th, tw) = (x.height() / block, x.width() / block);
    if th * tw < 3 {
        return Err(Error::invalid("tile-blend defense needs at least three tiles"));
    }
    Ok((th, tw))
}

fn tiles_of(x: &ImageTensor, block: usize, th: usize, tw: usize) -> Matrix {
    let len = block * block * CHANNELS;
    let mut m = Matrix::zeros(th * tw, len);
    for t in 0..th * tw {
        let (r0, c0) = ((t / tw) * block, (t % tw) * block);
        let row = m.row_mut(t);
        let mut k = 0;
        for r in 0..block {
            for c in 0..block {
                for ch in 0..CHANNELS {
                    row[k] = x.get(r0 + r, c0 + c, ch);
                    k += 1;
                }
            }
        }
    }
    m
}

fn embedding_weights(y: &Matrix, kernel: Kernel) -> Matrix {
    let n = y.rows();
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let d: Vec<f64> = (0..n).map(|j| y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
        let dmin = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
        let row = w.row_mut(i);
        for j in 0..n {
            if j != i {
                row[j] = match kernel {
                    Kernel::StudentT => 1.0 / (1.0 + d[j]),
                    Kernel::Gaussian => (-(d[j] - dmin)).exp(),
                };
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    w
}

impl PreparedTsne {
    pub fn new(x: &ImageTensor, cfg: &TsneConfig, block: usize) -> Result<Self> {
        let (th, tw) = check_block(x, block)?;
        let tiles = tiles_of(x, block, th, tw);
        let mut prng = Prng::new(cfg.seed);
        let emb = tsne_embed(&tiles, cfg, &mut prng)?;
        let weights = Some(embedding_weights(&emb.y, cfg.kernel));
        Ok(PreparedTsne { height: x.height(), width: x.width(), block, tiles, weights })
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.rows()
    }

    pub fn weights(&self) -> Option<&Matrix> {
        self.weights.as_ref()
    }

    /// Blends each tile toward its embedding-space neighbours with weight
    /// `1 − info`.
    pub fn reconstruct(&self, info: f64) -> Result<ImageTensor> {
        check_info(info)?;
        let n = self.tiles.rows();
        let len = self.tiles.cols();
        let tw = self.width / self.block;
        let w = self.weights.as_ref().expect("weights computed at construction");
        let mut out = vec![0.0; self.height * self.width * CHANNELS];
        let mut blended = vec![0.0; len];
        for i in 0..n {
            if info == 1.0 {
                blended.copy_from_slice(self.tiles.row(i));
            } else {
                blended.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..n {
                    let wij = w.get(i, j);
                    if wij != 0.0 {
                        for (b, t) in blended.iter_mut().zip(self.tiles.row(j)) {
                            *b += wij * t;
                        }
                    }
                }
                for (b, t) in blended.iter_mut().zip(self.tiles.row(i)) {
                    *b = clamp_unit(info * t + (1.0 - info) * *b);
                }
            }
            let (r0, c0) = ((i / tw) * self.block, (i % tw) * self.block);
            let mut k = 0;
            for r in 0..self.block {
                for c in 0..self.block {
                    let base = ((r0 + r) * self.width + c0 + c) * CHANNELS;
                    out[base..base + CHANNELS].copy_from_slice(&blended[k..k + CHANNELS]);
                    k += CHANNELS;
                }
            }
        }
        ImageTensor::new(self.height, self.width, out)
    }
}

fn check_info(info: f64) -> Result<()> {
    if !(info.is_finite() && info > 0.0 && info <= 1.0) {
        return Err(Error::invalid(format!("information fraction {info} must lie in (0, 1]")));
    }
    Ok(())
}

pub fn defend_tsne(x: &ImageTensor, cfg: &TsneConfig, info: f64, block: usize) -> Result<ImageTensor> {
    check_info(info)?;
    check_block(x, block)?;
    if info == 1.0 {
        return Ok(x.clone());
    }
    PreparedTsne::new(x, cfg, block)?.reconstruct(info)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_points(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = Prng::new(seed);
        Matrix::from_fn(n, d, |_, _| r.normal())
    }

    #[test]
    fn two_equidistant_neighbours() {
        let s = sigma_for_perplexity(&[1.0, 1.0], 2.0).unwrap();
        assert!(!s.unattained);
        assert!((s.probs[0] - 0.5).abs() < 1e-12);
        assert!((s.perplexity - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_is_reached_and_recomputable() {
        let pts = random_points(30, 5, 3);
        let d = squared_distances(&pts);
        for i in 0..30 {
            let row: Vec<f64> = (0..30).filter(|&j| j != i).map(|j| d.get(i, j)).collect();
            let s = sigma_for_perplexity(&row, 7.0).unwrap();
            let (_, perp) = conditional_row(&row, s.sigma);
            assert!((perp - 7.0).abs() / 7.0 < 1e-3, "row {i}: {perp}");
        }
    }

    #[test]
    fn sigma_scales_with_distance() {
        let row = [0.5, 1.0, 2.0, 3.5, 4.0];
        let a = sigma_for_perplexity(&row, 3.0).unwrap();
        let scaled: Vec<f64> = row.iter().map(|v| v * 9.0).collect();
        let b = sigma_for_perplexity(&scaled, 3.0).unwrap();
        assert!((b.sigma / a.sigma - 3.0).abs() < 1e-3);
        for (p, q) in a.probs.iter().zip(&b.probs) {
            assert!((p - q).abs() < 1e-3);
        }
    }

    #[test]
    fn degenerate_rows_fall_back() {
        let s = sigma_for_perplexity(&[1.0, 1.0, 1.0, 1.0], 2.0).unwrap();
        assert!(s.unattained);
        assert_eq!(s.sigma, 1.0);
        assert!(sigma_for_perplexity(&[1.0], 1.0).is_err());
        assert!(sigma_for_perplexity(&[1.0, 2.0], 3.0).is_err());
    }

    #[test]
    fn equilateral_triangle() {
        let s3 = 3f64.sqrt() / 2.0;
        let pts = Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.5, s3]).unwrap();
        let a = pairwise_affinities(&pts, 2.0).unwrap();
        for i in 0..3 {
            assert_eq!(a.p.get(i, i), 0.0);
            for j in 0..3 {
                if i != j {
                    assert!((a.p.get(i, j) - 1.0 / 6.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn coincident_embedding_is_uniform() {
        let y = Matrix::zeros(5, 2);
        for kernel in [Kernel::StudentT, Kernel::Gaussian] {
            let (q, _) = low_dim_affinities(&y, kernel).unwrap();
            assert!((q.sum() - 1.0).abs() < 1e-12);
            assert!((q.get(0, 1) - 1.0 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let a = pairwise_affinities(&random_points(8, 3, 1), 3.0).unwrap();
        assert!(kl_cost(&a.p, &a.p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn embed_rejects_bad_config() {
        let pts = random_points(5, 2, 1);
        let cfg = TsneConfig { perplexity: 5.0, ..TsneConfig::default() };
        assert!(tsne_embed(&pts, &cfg, &mut Prng::new(0)).is_err());
        let cfg = TsneConfig { iterations: 0, perplexity: 2.0, ..TsneConfig::default() };
        assert!(tsne_embed(&pts, &cfg, &mut Prng::new(0)).is_err());
    }

    #[test]
    fn identity_at_full_information() {
        let ds = crate::shapes::gen_shapes_dataset(1, 5, 16).unwrap();
        let x = &ds.items()[0].0;
        let cfg = TsneConfig { perplexity: 5.0, iterations: 50, ..TsneConfig::default() };
        assert_eq!(&defend_tsne(x, &cfg, 1.0, 4).unwrap(), x);
        let prepared = PreparedTsne::new(x, &cfg, 4).unwrap();
        assert_eq!(&prepared.reconstruct(1.0).unwrap(), x);
        assert!(defend_tsne(x, &cfg, 0.9, 5).is_err());
        assert!(defend_tsne(x, &cfg, 0.0, 4).is_err());
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let x = ImageTensor::filled(16, 16, 0.3);
        let cfg = TsneConfig { perplexity: 5.0, iterations: 50, ..TsneConfig::default() };
        for info in [0.2, 0.9] {
            let y = defend_tsne(&x, &cfg, info, 4).unwrap();
            assert!(y.max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn fused_steps_match_reference() {
        let pts = random_points(12, 4, 9);
        let aff = pairwise_affinities(&pts, 4.0).unwrap();
        let p = aff.p.matrix();
        let h: f64 = p.data().iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum();
        for e in [2, 3, 4] {
            for kernel in [Kernel::StudentT, Kernel::Gaussian] {
                let y = random_points(12, e, 5 + e as u64);
                let mut buf = StepBuffers { terms: vec![0.0; 66], grad: vec![0.0; 2 * 12 * e] };
                let cost = match (kernel, e) {
                    (Kernel::StudentT, 2) => kl_step_student_fixed::<2>(p, h, 1.0, y.data(), &mut buf),
                    (Kernel::StudentT, 3) => kl_step_student_fixed::<3>(p, h, 1.0, y.data(), &mut buf),
                    (Kernel::StudentT, _) => kl_step_student(p, h, 1.0, y.data(), e, &mut buf),
                    (Kernel::Gaussian, _) => kl_step(p, h, 1.0, y.data(), e, kernel, &mut buf),
                };
                let (q, _) = low_dim_affinities(&y, kernel).unwrap();
                assert!((cost - kl_cost(&aff.p, &q).unwrap()).abs() < 1e-12);
                let g = kl_gradient(&aff.p, &y, kernel).unwrap();
                for (a, b) in g.data().iter().zip(&buf.grad) {
                    assert!((a - b).abs() < 1e-9, "e={e} {kernel:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn kernel_parses() {
        assert_eq!("student-t".parse::<Kernel>().unwrap(), Kernel::StudentT);
        assert_eq!("gaussian".parse::<Kernel>().unwrap(), Kernel::Gaussian);
        assert!("cauchy".parse::<Kernel>().is_err());
    }
}
