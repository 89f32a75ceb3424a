//! Distribution and retrieval metrics over evaluator embeddings, plus foot
//! skating on recovered positions.
//!
//! Embedding sets are `samples × width` arrays. Reductions run in a fixed
//! order so equal inputs give equal outputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{recover_positions_3d, MotionFeatures};
use crate::skeleton::Skeleton;

/// Ridge added to both covariances before the square root.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;
/// Eigenvalues above `-NEGATIVE_FLOOR` are clamped to zero.
pub const NEGATIVE_FLOOR: f64 = 1e-8;
pub const R_PRECISION_BATCH: usize = 32;

fn to_matrix(x: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

fn mean_and_cov(x: ArrayView2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = to_matrix(x);
    let n = m.nrows() as f64;
    let mean = DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n);
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (m.nrows().max(2) - 1) as f64;
    let mut cov = centered.transpose() * &centered / denom;
    cov = 0.5 * (&cov + cov.transpose());
    for i in 0..cov.nrows() {
        cov[(i, i)] += COVARIANCE_SHRINKAGE;
    }
    (mean, cov)
}

fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = 0.5 * (m + m.transpose());
    let mut eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -NEGATIVE_FLOOR * max.max(1.0) {
        return Err(Error::Numerical(format!(
            "{what} is not positive semi-definite: eigenvalues in [{min:.3e}, {max:.3e}]"
        )));
    }
    eig.eigenvalues.apply(|v| *v = v.max(0.0));
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m, what)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `Tr((A B)^{1/2})` as `Tr((A^{1/2} B A^{1/2})^{1/2})`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = sqrt_psd(a, "covariance")?;
    let inner = &ra * b * &ra;
    let eig = clamped_eigen(&inner, "covariance product")?;
    Ok(eig.eigenvalues.iter().map(|v| v.sqrt()).sum())
}

/// Fréchet distance between Gaussians fitted to two embedding sets.
pub fn fid(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Validation(format!(
            "embedding widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Data("FID needs at least two samples per set".into()));
    }
    let (ma, ca) = mean_and_cov(a);
    let (mb, cb) = mean_and_cov(b);
    let mean_term = (&ma - &mb).norm_squared();
    // Both orderings agree analytically; averaging them makes the result
    // symmetric to the last bit.
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb)? + trace_sqrt_product(&cb, &ca)?);
    let value = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    if value < -NEGATIVE_FLOOR * (1.0 + ca.trace() + cb.trace()) {
        return Err(Error::Numerical(format!("FID came out negative: {value:.3e}")));
    }
    Ok(value.max(0.0))
}

fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Top-1/2/3 retrieval rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RPrecision {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub batches: usize,
}

/// Rows `i` of `motion` and `text` are matched. Consecutive batches of 32
/// are scored; a trailing partial batch is discarded.
pub fn r_precision(motion: ArrayView2<f64>, text: ArrayView2<f64>) -> Result<RPrecision> {
    if motion.dim() != text.dim() {
        return Err(Error::Validation(format!(
            "motion {:?} and text {:?} embeddings differ in shape",
            motion.dim(),
            text.dim()
        )));
    }
    let batches = motion.nrows() / R_PRECISION_BATCH;
    if batches == 0 {
        return Err(Error::Protocol(format!(
            "R-precision needs batches of {R_PRECISION_BATCH}, got {} samples",
            motion.nrows()
        )));
    }
    let mut hits = [0usize; 3];
    for b in 0..batches {
        let lo = b * R_PRECISION_BATCH;
        for i in lo..lo + R_PRECISION_BATCH {
            let own = distance(motion.row(i), text.row(i));
            let rank = (lo..lo + R_PRECISION_BATCH)
                .filter(|&j| j != i && distance(motion.row(i), text.row(j)) < own)
                .count();
            for (k, h) in hits.iter_mut().enumerate() {
                if rank <= k {
                    *h += 1;
                }
            }
        }
    }
    let total = (batches * R_PRECISION_BATCH) as f64;
    Ok(RPrecision {
        top1: hits[0] as f64 / total,
        top2: hits[1] as f64 / total,
        top3: hits[2] as f64 / total,
        batches,
    })
}

/// Mean matched-pair Euclidean distance.
pub fn mm_dist(motion: ArrayView2<f64>, text: ArrayView2<f64>) -> Result<f64> {
    if motion.dim() != text.dim() {
        return Err(Error::Validation("matched embeddings differ in shape".into()));
    }
    if motion.nrows() == 0 {
        return Err(Error::Data("no matched pairs".into()));
    }
    let sum: f64 = motion
        .axis_iter(Axis(0))
        .zip(text.axis_iter(Axis(0)))
        .map(|(m, t)| distance(m, t))
        .sum();
    Ok(sum / motion.nrows() as f64)
}

/// Mean distance over `pairs` disjoint random pairs.
pub fn diversity<R: Rng + ?Sized>(features: ArrayView2<f64>, pairs: usize, rng: &mut R) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::Validation("pair count must be positive".into()));
    }
    if features.nrows() < 2 * pairs {
        return Err(Error::Data(format!(
            "{pairs} disjoint pairs need {} samples, got {}",
            2 * pairs,
            features.nrows()
        )));
    }
    let mut idx: Vec<usize> = (0..features.nrows()).collect();
    idx.shuffle(rng);
    let sum: f64 = idx[..2 * pairs]
        .chunks_exact(2)
        .map(|p| distance(features.row(p[0]), features.row(p[1])))
        .sum();
    Ok(sum / pairs as f64)
}

/// Average over texts of the within-text diversity. Each group offers
/// `min(pairs, len / 2)` disjoint pairs.
pub fn mmodality<R: Rng + ?Sized>(groups: &[Array2<f64>], pairs: usize, rng: &mut R) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Data("no generation groups".into()));
    }
    let mut sum = 0.0;
    for (i, g) in groups.iter().enumerate() {
        if g.nrows() < 2 {
            return Err(Error::Data(format!(
                "text group {i} has {} generations, need 2",
                g.nrows()
            )));
        }
        sum += diversity(g.view(), pairs.min(g.nrows() / 2), rng)?;
    }
    Ok(sum / groups.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkateThresholds {
    /// Meters above the ground plane.
    pub height: f64,
    /// Meters per frame in the ground plane.
    pub speed: f64,
}

impl Default for SkateThresholds {
    fn default() -> Self {
        Self {
            height: 0.05,
            speed: 0.025,
        }
    }
}

/// Fraction of frame transitions where some foot joint stays below the
/// height threshold while sliding faster than the speed threshold.
pub fn foot_skate_ratio(motion: &MotionFeatures, skeleton: &Skeleton, thresholds: SkateThresholds) -> Result<f64> {
    let positions = recover_positions_3d(motion, skeleton)?;
    Ok(skate_ratio_positions(&positions, skeleton, thresholds))
}

pub fn skate_ratio_positions(positions: &ndarray::Array3<f64>, skeleton: &Skeleton, th: SkateThresholds) -> f64 {
    let n = positions.dim().0;
    if n < 2 {
        return 0.0;
    }
    let feet = skeleton.foot_joints();
    let skating = (0..n - 1)
        .filter(|&k| {
            feet.iter().any(|&j| {
                let low = positions[[k, j, 1]] < th.height && positions[[k + 1, j, 1]] < th.height;
                let dx = positions[[k + 1, j, 0]] - positions[[k, j, 0]];
                let dz = positions[[k + 1, j, 2]] - positions[[k, j, 2]];
                low && dx.hypot(dz) > th.speed
            })
        })
        .count();
    skating as f64 / (n - 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub r_precision_top1: f64,
    pub r_precision_top2: f64,
    pub r_precision_top3: f64,
    pub mm_dist: f64,
    pub diversity: f64,
    pub mmodality: f64,
    pub fid_upper: f64,
    pub fid_lower: f64,
    pub foot_skate_ratio: f64,
    pub generated: usize,
    pub reference: usize,
    pub runs: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let values = [
            self.fid,
            self.r_precision_top1,
            self.r_precision_top2,
            self.r_precision_top3,
            self.mm_dist,
            self.diversity,
            self.mmodality,
            self.fid_upper,
            self.fid_lower,
            self.foot_skate_ratio,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("evaluation report has a non-finite entry".into()));
        }
        let rp = [self.r_precision_top1, self.r_precision_top2, self.r_precision_top3];
        if rp.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numerical("R-precision outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Mean of each field over runs; counts and seed come from the first.
    pub fn average(runs: &[EvalReport]) -> Result<EvalReport> {
        let first = runs.first().ok_or_else(|| Error::Data("no evaluation runs".into()))?;
        let n = runs.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            fid: avg(|r| r.fid),
            r_precision_top1: avg(|r| r.r_precision_top1),
            r_precision_top2: avg(|r| r.r_precision_top2),
            r_precision_top3: avg(|r| r.r_precision_top3),
            mm_dist: avg(|r| r.mm_dist),
            diversity: avg(|r| r.diversity),
            mmodality: avg(|r| r.mmodality),
            fid_upper: avg(|r| r.fid_upper),
            fid_lower: avg(|r| r.fid_lower),
            foot_skate_ratio: avg(|r| r.foot_skate_ratio),
            runs: runs.len(),
            ..first.clone()
        })
    }
}
