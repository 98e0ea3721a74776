//! Distribution and retrieval metrics over evaluator features (`f64` rows).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_data::{to_joint_positions, MotionSequence};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Added to both covariances when a set has fewer than `F + 1` samples.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fid {
    pub value: f64,
    /// Whether the covariance ridge was applied.
    pub regularized: bool,
}

fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Sample mean and unbiased covariance of the rows.
pub fn mean_and_covariance(x: &Matrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let a = to_na(x);
    let n = a.nrows();
    let mean = a.row_mean().transpose();
    let mut centered = a;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians with the given moments.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> f64 {
    let diff = mu1 - mu2;
    // Tr sqrt(S1 S2) = Tr sqrt(S1^1/2 S2 S1^1/2), whose argument is symmetric.
    let r1 = sqrt_psd(cov1);
    let inner = &r1 * cov2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    (diff.norm_squared() + cov1.trace() + cov2.trace() - 2.0 * cross).max(0.0)
}

/// FID between two feature sets.
pub fn fid(real: &Matrix<f64>, generated: &Matrix<f64>) -> Result<Fid> {
    if real.cols() != generated.cols() {
        return Err(Error::Shape(format!("feature widths {} and {}", real.cols(), generated.cols())));
    }
    if real.rows() < 2 || generated.rows() < 2 {
        return Err(Error::Invalid("FID needs at least two samples per set".into()));
    }
    if !real.is_finite() || !generated.is_finite() {
        return Err(Error::Numerical("non-finite features".into()));
    }
    let (mu1, mut c1) = mean_and_covariance(real);
    let (mu2, mut c2) = mean_and_covariance(generated);
    let f = real.cols();
    let regularized = real.rows() < f + 1 || generated.rows() < f + 1;
    if regularized {
        for i in 0..f {
            c1[(i, i)] += COVARIANCE_RIDGE;
            c2[(i, i)] += COVARIANCE_RIDGE;
        }
    }
    Ok(Fid { value: frechet_distance(&mu1, &c1, &mu2, &c2), regularized })
}

/// Rows scaled to unit length (zero rows stay zero).
pub fn unit_rows(x: &Matrix<f64>) -> Matrix<f64> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    /// Fraction of queries whose paired text ranks first, within two, within three.
    pub top: [f64; 3],
    /// Mean distance between paired unit features.
    pub matching_score: f64,
    pub queries: usize,
}

/// R-precision with pools of `pool` pairs: each motion ranks the pool's texts
/// by cosine similarity. With `pools = None` the pairs are shuffled and split
/// into disjoint pools (the remainder is dropped); otherwise that many pools
/// are drawn independently, each without repeated pairs.
pub fn r_precision(
    motion: &Matrix<f64>,
    text: &Matrix<f64>,
    pool: usize,
    pools: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Retrieval> {
    if motion.shape() != text.shape() {
        return Err(Error::Shape(format!("{:?} motion features vs {:?} text features", motion.shape(), text.shape())));
    }
    let n = motion.rows();
    if pool < 2 || n < pool {
        return Err(Error::Invalid(format!("retrieval needs at least {pool} pairs (pool size >= 2), got {n}")));
    }
    let m = unit_rows(motion);
    let t = unit_rows(text);
    let groups: Vec<Vec<usize>> = match pools {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.chunks_exact(pool).map(<[usize]>::to_vec).collect()
        }
        Some(k) => (0..k).map(|_| rand::seq::index::sample(rng, n, pool).into_vec()).collect(),
    };
    let mut hits = [0usize; 3];
    let mut queries = 0;
    for g in &groups {
        for &i in g {
            let own = dot(m.row(i), t.row(i));
            let better = g.iter().filter(|&&j| j != i && dot(m.row(i), t.row(j)) > own).count();
            for (k, h) in hits.iter_mut().enumerate() {
                if better <= k {
                    *h += 1;
                }
            }
            queries += 1;
        }
    }
    let q = queries as f64;
    Ok(Retrieval {
        top: [hits[0] as f64 / q, hits[1] as f64 / q, hits[2] as f64 / q],
        matching_score: matching_score(motion, text)?,
        queries,
    })
}

/// Mean Euclidean distance between paired unit features.
pub fn matching_score(motion: &Matrix<f64>, text: &Matrix<f64>) -> Result<f64> {
    if motion.shape() != text.shape() || motion.rows() == 0 {
        return Err(Error::Invalid("matching score needs equally many non-zero pairs".into()));
    }
    let (m, t) = (unit_rows(motion), unit_rows(text));
    Ok((0..m.rows()).map(|i| distance(m.row(i), t.row(i))).sum::<f64>() / m.rows() as f64)
}

/// Mean cosine similarity between paired features.
pub fn clip_score(motion: &Matrix<f64>, text: &Matrix<f64>) -> Result<f64> {
    if motion.shape() != text.shape() || motion.rows() == 0 {
        return Err(Error::Invalid("clip score needs equally many non-zero pairs".into()));
    }
    let (m, t) = (unit_rows(motion), unit_rows(text));
    Ok((0..m.rows()).map(|i| dot(m.row(i), t.row(i))).sum::<f64>() / m.rows() as f64)
}

/// Mean distance between disjoint random pairs of samples drawn for the same
/// prompt, averaged over prompts. Each group holds one prompt's features.
pub fn mmodality(groups: &[Matrix<f64>], rng: &mut impl Rng) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Invalid("mmodality needs at least one prompt".into()));
    }
    let mut total = 0.0;
    for g in groups {
        if g.rows() < 2 {
            return Err(Error::Invalid(format!("mmodality needs at least 2 repeats per prompt, got {}", g.rows())));
        }
        let mut order: Vec<usize> = (0..g.rows()).collect();
        order.shuffle(rng);
        let pairs: Vec<f64> = order.chunks_exact(2).map(|p| distance(g.row(p[0]), g.row(p[1]))).collect();
        total += pairs.iter().sum::<f64>() / pairs.len() as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Mean per-frame, per-joint position error in millimetres.
pub fn mpjpe<T: Scalar>(x: &MotionSequence<T>, x_hat: &MotionSequence<T>) -> Result<f64> {
    if x.frames.shape() != x_hat.frames.shape() || x.spec != x_hat.spec {
        return Err(Error::Shape(format!("motions {:?} and {:?} differ in shape", x.frames.shape(), x_hat.frames.shape())));
    }
    let (a, b) = (to_joint_positions(x)?, to_joint_positions(x_hat)?);
    let mut total = 0.0;
    for f in 0..a.frames() {
        for j in 0..a.joints {
            let (p, q) = (a.joint(f, j), b.joint(f, j));
            total += (0..3).map(|k| (p[k].as_f64() - q[k].as_f64()).powi(2)).sum::<f64>().sqrt();
        }
    }
    Ok(1000.0 * total / (a.frames() * a.joints) as f64)
}

/// Mean and 95% normal-approximation half-width; `None` for a single run.
pub fn mean_and_half_width(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(1.96 * var.sqrt() / n.sqrt()))
}
