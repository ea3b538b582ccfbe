//! Fréchet distance between Gaussian fits of embedding sets.
//!
//! `d = |mu_g - mu_r|^2 + Tr(S_g + S_r - 2 (S_g^{1/2} S_r S_g^{1/2})^{1/2})`,
//! with matrix square roots via symmetric eigendecomposition and an
//! eigenvalue floor so nearly-degenerate covariances stay PSD.

use nalgebra::{DMatrix, SymmetricEigen};

use super::EmbeddingSet;
use crate::error::{Error, Result};

/// Eigenvalues below this are treated as exactly zero inside matrix roots.
const EIG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance, unbiased (N-1 denominator).
    pub cov: Vec<f64>,
    pub d: usize,
}

/// Empirical mean and unbiased covariance of an embedding set.
pub fn gaussian_stats(set: &EmbeddingSet) -> Result<GaussianStats> {
    if set.n < 2 {
        return Err(Error::invalid(
            "gaussian_stats",
            format!("need at least 2 rows, got {}", set.n),
        ));
    }
    let (n, d) = (set.n, set.d);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(set.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = set.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(GaussianStats { mean, cov, d })
}

fn to_matrix(stats: &GaussianStats) -> DMatrix<f64> {
    DMatrix::from_row_slice(stats.d, stats.d, &stats.cov)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()).scale(0.5)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if !v.is_finite() {
            return Err(Error::invalid("matrix_sqrt", "non-finite eigenvalue"));
        }
        *v = if *v < EIG_FLOOR { 0.0 } else { v.sqrt() };
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Fréchet distance between two Gaussians given their moments. Symmetric
/// and nonnegative after regularization.
pub fn frechet_distance(g: &GaussianStats, r: &GaussianStats) -> Result<f64> {
    if g.d != r.d {
        return Err(Error::shape("frechet", format!("dims {} vs {}", g.d, r.d)));
    }
    let mean_term: f64 = g
        .mean
        .iter()
        .zip(&r.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sg = to_matrix(g);
    let sr = to_matrix(r);
    let root_g = sqrt_psd(&sg)?;
    let inner = &root_g * &sr * &root_g;
    let cross = sqrt_psd(&inner)?;
    let trace_term = sg.trace() + sr.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace_term).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Role;
    use crate::rng::RngStream;

    fn set(rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::from_rows(rows, Role::Video).unwrap()
    }

    fn gauss_1d(mu: f64, var: f64) -> GaussianStats {
        GaussianStats { mean: vec![mu], cov: vec![var], d: 1 }
    }

    #[test]
    fn identical_rows_zero_covariance() {
        let s = set(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let stats = gaussian_stats(&s).unwrap();
        assert!(stats.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_covariance_example() {
        let s = set(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        let stats = gaussian_stats(&s).unwrap();
        assert_eq!(stats.mean, vec![1.0, 0.0]);
        assert_eq!(stats.cov, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardized_gaussian_mean_near_zero() {
        let mut rng = RngStream::new(120);
        let n = 4000;
        let d = 3;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let stats = gaussian_stats(&set(&rows)).unwrap();
        let bound = 3.0 / (n as f64).sqrt();
        for m in stats.mean {
            assert!(m.abs() < bound, "mean {m} vs bound {bound}");
        }
    }

    #[test]
    fn single_row_errors() {
        let s = set(&[vec![1.0]]);
        assert!(gaussian_stats(&s).is_err());
    }

    #[test]
    fn frechet_identical_zero() {
        let g = gauss_1d(0.3, 1.7);
        assert!(frechet_distance(&g, &g).unwrap() < 1e-12);
    }

    #[test]
    fn frechet_closed_form_mean_shift() {
        // N(0,1) vs N(1,1): (mu1-mu2)^2 + (sqrt 1 - sqrt 1)^2 = 1.
        let d = frechet_distance(&gauss_1d(0.0, 1.0), &gauss_1d(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn frechet_closed_form_variance_change() {
        // N(0,1) vs N(0,4): (sqrt 1 - sqrt 4)^2 = 1.
        let d = frechet_distance(&gauss_1d(0.0, 1.0), &gauss_1d(0.0, 4.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn frechet_symmetric_and_nonnegative() {
        let mut rng = RngStream::new(121);
        for _ in 0..5 {
            let d = 4;
            let rows_a: Vec<Vec<f64>> = (0..32).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            let rows_b: Vec<Vec<f64>> =
                (0..32).map(|_| (0..d).map(|_| 0.5 + 1.5 * rng.normal()).collect()).collect();
            let ga = gaussian_stats(&set(&rows_a)).unwrap();
            let gb = gaussian_stats(&set(&rows_b)).unwrap();
            let ab = frechet_distance(&ga, &gb).unwrap();
            let ba = frechet_distance(&gb, &ga).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        }
    }

    #[test]
    fn frechet_on_identical_empirical_sets() {
        let mut rng = RngStream::new(122);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let g = gaussian_stats(&set(&rows)).unwrap();
        let d = frechet_distance(&g, &g.clone()).unwrap();
        assert!(d < 1e-8, "{d}");
    }
}
