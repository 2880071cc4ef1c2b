//! Evaluation metrics over feature matrices (one row per sample):
//! R-precision, FID, MM-Dist, diversity and multimodality.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{euclidean, Mat};

pub const DEFAULT_POOL: usize = 32;
const COV_RIDGE: f64 = 1e-6;

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} features")))
    }
}

fn check_aligned(text: &Mat, motion: &Mat) -> Result<()> {
    if text.shape() != motion.shape() {
        return Err(Error::MisalignedIds);
    }
    Ok(())
}

/// Top-1/2/3 retrieval rates. For each motion the true text competes with
/// `pool - 1` distinct mismatched texts; ties go to the true text.
pub fn r_precision(text: &Mat, motion: &Mat, pool: usize, rng: &mut impl Rng) -> Result<[f64; 3]> {
    check_aligned(text, motion)?;
    check_finite(text, "text")?;
    check_finite(motion, "motion")?;
    let n = motion.rows();
    if pool < 2 || n < pool {
        return Err(Error::InsufficientRows { needed: pool.max(2), got: n });
    }
    let mut hits = [0usize; 3];
    for i in 0..n {
        let truth = euclidean(motion.row(i), text.row(i));
        let mut better = 0;
        for c in sample(rng, n - 1, pool - 1) {
            let j = if c >= i { c + 1 } else { c };
            if euclidean(motion.row(i), text.row(j)) < truth {
                better += 1;
            }
        }
        for (k, h) in hits.iter_mut().enumerate() {
            if better <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}

pub fn mm_dist(text: &Mat, motion: &Mat) -> Result<f64> {
    check_aligned(text, motion)?;
    if text.rows() == 0 {
        return Err(Error::InsufficientRows { needed: 1, got: 0 });
    }
    let total: f64 = (0..text.rows()).map(|i| euclidean(text.row(i), motion.row(i))).sum();
    Ok(total / text.rows() as f64)
}

/// Mean distance between two disjoint random subsets of `subset` rows each.
pub fn diversity(features: &Mat, subset: usize, rng: &mut impl Rng) -> Result<f64> {
    check_finite(features, "motion")?;
    let n = features.rows();
    if subset == 0 || n < 2 * subset {
        return Err(Error::InsufficientRows { needed: 2 * subset.max(1), got: n });
    }
    let idx = sample(rng, n, 2 * subset).into_vec();
    let total: f64 = (0..subset).map(|i| euclidean(features.row(idx[i]), features.row(idx[subset + i]))).sum();
    Ok(total / subset as f64)
}

/// Each group holds `2 * pairs` rows paired as (2i, 2i+1).
pub fn multimodality(groups: &[Mat], pairs: usize) -> Result<f64> {
    if groups.is_empty() || pairs == 0 {
        return Err(Error::InsufficientRows { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for g in groups {
        if g.rows() != 2 * pairs {
            return Err(Error::RaggedGroups { expected: 2 * pairs });
        }
        check_finite(g, "motion")?;
        total += (0..pairs).map(|i| euclidean(g.row(2 * i), g.row(2 * i + 1))).sum::<f64>();
    }
    Ok(total / (groups.len() * pairs) as f64)
}

/// Sample mean and covariance (`N - 1` normalization), with a small ridge
/// when the sample does not determine a full-rank covariance.
pub fn moments(features: &Mat) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_finite(features, "fid")?;
    let (n, d) = features.shape();
    if n < 2 {
        return Err(Error::InsufficientRows { needed: 2, got: n });
    }
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = DVector::from_iterator(d, (0..d).map(|c| x.column(c).mean()));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    if n <= d {
        cov += DMatrix::identity(d, d) * COV_RIDGE;
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn fid_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let root_a = psd_sqrt(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt
}

pub fn fid(a: &Mat, b: &Mat) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!("feature widths {} and {}", a.cols(), b.cols())));
    }
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    Ok(fid_from_moments(&mu_a, &cov_a, &mu_b, &cov_b))
}

/// Mean with a 95% normal-approximation confidence half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let ci95 = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        Self { mean, ci95, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r_precision_top1: Summary,
    pub r_precision_top2: Summary,
    pub r_precision_top3: Summary,
    pub fid: Summary,
    pub mm_dist: Summary,
    pub diversity: Summary,
    pub multimodality: Option<Summary>,
}

impl MetricReport {
    /// Table with the usual column order.
    pub fn table(&self) -> String {
        let cell = |s: &Summary| format!("{:.3}±{:.3}", s.mean, s.ci95);
        let mm = self.multimodality.as_ref().map_or("-".to_string(), cell);
        format!(
            "{:<14}{:<14}{:<14}{:<14}{:<14}{:<14}{:<14}\n{:<14}{:<14}{:<14}{:<14}{:<14}{:<14}{:<14}",
            "R-Prec Top1",
            "R-Prec Top2",
            "R-Prec Top3",
            "FID",
            "MM-Dist",
            "Diversity",
            "MModality",
            cell(&self.r_precision_top1),
            cell(&self.r_precision_top2),
            cell(&self.r_precision_top3),
            cell(&self.fid),
            cell(&self.mm_dist),
            cell(&self.diversity),
            mm
        )
    }
}

/// Per-repeat metric values computed on one draw of generated features.
#[derive(Clone, Debug, PartialEq)]
pub struct RepeatMetrics {
    pub r_precision: [f64; 3],
    pub fid: f64,
    pub mm_dist: f64,
    pub diversity: f64,
    pub multimodality: Option<f64>,
}

pub fn summarize(repeats: &[RepeatMetrics]) -> MetricReport {
    let col = |f: &dyn Fn(&RepeatMetrics) -> f64| Summary::from_values(repeats.iter().map(f).collect());
    let mm: Option<Vec<f64>> = repeats.iter().map(|r| r.multimodality).collect();
    MetricReport {
        r_precision_top1: col(&|r| r.r_precision[0]),
        r_precision_top2: col(&|r| r.r_precision[1]),
        r_precision_top3: col(&|r| r.r_precision[2]),
        fid: col(&|r| r.fid),
        mm_dist: col(&|r| r.mm_dist),
        diversity: col(&|r| r.diversity),
        multimodality: mm.map(Summary::from_values),
    }
}
