//! Numerical checks on the theory behind the training objective: a
//! noise-contrastive mutual-information estimate over matched group pairs,
//! an information-bottleneck estimate from log determinants, Gaussian
//! entropy, the eigenvalue form of the Jensen bound, and norm concentration
//! of a latent block.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Matched samples (z⁰_i, z¹_i) from the two sensitive groups, sharing a
/// label. Rows are pairs.
#[derive(Clone, Debug)]
pub struct PairedGroups {
    z0: Tensor,
    z1: Tensor,
}

impl PairedGroups {
    pub fn new(z0: Tensor, z1: Tensor) -> Result<Self> {
        if !z0.same_shape(&z1) {
            return Err(Error::Shape("paired groups must have equal shapes".into()));
        }
        if z0.rows() == 0 {
            return Err(Error::Shape("paired groups need K >= 1".into()));
        }
        Ok(PairedGroups { z0, z1 })
    }

    pub fn k(&self) -> usize {
        self.z0.rows()
    }
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|&s| (s - m).exp()).sum::<f64>().ln()
}

/// Noise-contrastive MI lower bound over K pairs:
/// (1/K)·Σ_i [s_ii − LSE_j(s_ij)] + log K with s_ij = z⁰_i·z¹_j.
/// Always at most log K.
pub fn i_nce(pairs: &PairedGroups) -> f64 {
    let k = pairs.k();
    let d = pairs.z0.cols();
    let mut total = 0.0;
    for i in 0..k {
        let scores: Vec<f64> = (0..k)
            .map(|j| (0..d).map(|c| pairs.z0.at(i, c) * pairs.z1.at(j, c)).sum())
            .collect();
        total += scores[i] - log_sum_exp(&scores);
    }
    total / k as f64 + (k as f64).ln()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotation, iterated
/// until the off-diagonal Frobenius norm drops below 1e-12.
pub fn symmetric_eigenvalues(c: &Tensor) -> Result<Vec<f64>> {
    let d = c.rows();
    if c.cols() != d {
        return Err(Error::Shape("eigenvalues need a square matrix".into()));
    }
    for i in 0..d {
        for j in 0..i {
            if (c.at(i, j) - c.at(j, i)).abs() > 1e-9 * c.at(i, j).abs().max(1.0) {
                return Err(Error::Contract("matrix is not symmetric".into()));
            }
        }
    }
    let mut a = c.clone();
    for _sweep in 0..200 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.at(i, j) * a.at(i, j))
            .sum();
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                // Rotation angle zeroing a_pq: tan(2φ) = 2a_pq/(a_pp − a_qq).
                let phi = 0.5 * (2.0 * apq).atan2(app - aqq);
                let (s, co) = phi.sin_cos();
                for k in 0..d {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, co * akp + s * akq);
                    a.set(k, q, -s * akp + co * akq);
                }
                for k in 0..d {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, co * apk + s * aqk);
                    a.set(q, k, -s * apk + co * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| a.at(i, i)).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

fn log_det_psd(c: &Tensor) -> Result<f64> {
    let eig = symmetric_eigenvalues(c)?;
    let max = eig.iter().cloned().fold(0.0f64, f64::max);
    let floor = 1e-12 * max.max(1.0);
    let mut acc = 0.0;
    for &l in &eig {
        if l <= floor {
            return Err(Error::Domain(format!(
                "log det of a singular or indefinite matrix (eigenvalue {l:.3e})"
            )));
        }
        acc += l.ln();
    }
    Ok(acc)
}

fn covariance_of(rows: &[Vec<f64>]) -> Result<Tensor> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut c = Tensor::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                let v = c.at(i, j) + (r[i] - mean[i]) * (r[j] - mean[j]) / n as f64;
                c.set(i, j, v);
            }
        }
    }
    Ok(c)
}

/// Information-bottleneck estimate from log determinants: the class-weighted
/// mean of log det(per-class covariance + δI) minus λ·log det(overall
/// covariance + δI).
pub fn ib_estimate(z_block: &Tensor, y: &[usize], lambda: f64, delta: f64) -> Result<f64> {
    if y.len() != z_block.rows() {
        return Err(Error::Shape("ib_estimate: label count mismatch".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Config("lambda must be positive".into()));
    }
    let n = z_block.rows();
    let d = z_block.cols();
    let classes = y.iter().max().map(|&m| m + 1).unwrap_or(0);
    let ridge = |mut c: Tensor| {
        for i in 0..d {
            c.set(i, i, c.at(i, i) + delta);
        }
        c
    };
    let all_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|j| z_block.at(i, j)).collect())
        .collect();
    let mut conditional = 0.0;
    for cls in 0..classes {
        let rows: Vec<Vec<f64>> = (0..n)
            .filter(|&i| y[i] == cls)
            .map(|i| all_rows[i].clone())
            .collect();
        if rows.len() < 2 {
            return Err(Error::InsufficientClass(format!(
                "class {cls} has {} sample(s)",
                rows.len()
            )));
        }
        let weight = rows.len() as f64 / n as f64;
        conditional += weight * log_det_psd(&ridge(covariance_of(&rows)?))?;
    }
    let marginal = log_det_psd(&ridge(covariance_of(&all_rows)?))?;
    Ok(conditional - lambda * marginal)
}

/// Differential entropy of N(μ, C) in d dimensions:
/// d/2 + d·log(2π)/2 + log det(C)/2.
pub fn gaussian_entropy(c: &Tensor, d: usize) -> Result<f64> {
    if c.rows() != d || c.cols() != d {
        return Err(Error::Shape("gaussian_entropy: covariance is not d×d".into()));
    }
    Ok(d as f64 / 2.0
        + d as f64 * (2.0 * std::f64::consts::PI).ln() / 2.0
        + log_det_psd(c)? / 2.0)
}

/// Both sides of the eigenvalue bound Σ log λᵢ ≤ d·log(mean λᵢ) and their
/// nonnegative gap.
#[derive(Clone, Copy, Debug)]
pub struct JensenGap {
    pub sum_log: f64,
    pub bound: f64,
    pub gap: f64,
}

pub fn jensen_gap(c: &Tensor) -> Result<JensenGap> {
    let eig = symmetric_eigenvalues(c)?;
    if eig.iter().any(|&l| l <= 0.0) {
        return Err(Error::Domain("jensen_gap needs positive eigenvalues".into()));
    }
    let d = eig.len() as f64;
    let sum_log: f64 = eig.iter().map(|l| l.ln()).sum();
    let mean: f64 = eig.iter().sum::<f64>() / d;
    let bound = d * mean.ln();
    Ok(JensenGap {
        sum_log,
        bound,
        gap: bound - sum_log,
    })
}

/// Mean squared row norm of a latent block against its concentration target
/// R = d·c, with the relative deviation |mean − R|/R.
#[derive(Clone, Copy, Debug)]
pub struct NormConcentration {
    pub mean_sq_norm: f64,
    pub target: f64,
    pub relative_deviation: f64,
}

pub fn norm_concentration(z_block: &Tensor, c: f64) -> Result<NormConcentration> {
    if !(c > 0.0) {
        return Err(Error::Config("c must be positive".into()));
    }
    let n = z_block.rows();
    if n == 0 {
        return Err(Error::Shape("norm_concentration needs rows".into()));
    }
    let d = z_block.cols();
    let mean_sq: f64 = (0..n)
        .map(|i| (0..d).map(|j| z_block.at(i, j).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let target = d as f64 * c;
    Ok(NormConcentration {
        mean_sq_norm: mean_sq,
        target,
        relative_deviation: (mean_sq - target).abs() / target,
    })
}

/// Synthetic check that shrinking within-pair distance raises the MI bound:
/// K orthogonal pairs on a sphere of squared radius `radius`, with the
/// within-pair angle swept over `angles_deg` and cross-pair scores held at
/// zero. Returns (pair distance, i_nce) rows.
pub fn thm2_monotonicity(radius: f64, angles_deg: &[f64], k: usize) -> Result<Vec<(f64, f64)>> {
    if !(radius > 0.0) {
        return Err(Error::Config("radius must be positive".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let d = 2 * k;
    let r = radius.sqrt();
    let mut out = Vec::with_capacity(angles_deg.len());
    for &deg in angles_deg {
        let theta = deg.to_radians();
        let mut z0 = Tensor::zeros(k, d);
        let mut z1 = Tensor::zeros(k, d);
        for i in 0..k {
            z0.set(i, 2 * i, r);
            z1.set(i, 2 * i, r * theta.cos());
            z1.set(i, 2 * i + 1, r * theta.sin());
        }
        let pairs = PairedGroups::new(z0, z1)?;
        let distance = (2.0 * radius * (1.0 - theta.cos())).sqrt();
        out.push((distance, i_nce(&pairs)));
    }
    Ok(out)
}
