//! Multivariate Gaussians, sample covariance and regularized log-determinants.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normal_vector;
use crate::Real;

/// Diagonal jitter used before factorizing a PSD matrix:
/// `1e-9 * trace / d`, floored at `1e-12`. For `f32` the relative factor is
/// raised to a few ulps so the jitter stays representable.
pub fn jitter<T: Real>(m: &DMatrix<T>) -> T {
    let d = m.nrows().max(1);
    let rel = T::lit(1e-9).max(T::lit(10.0) * T::machine_eps());
    let eps = rel * m.trace() / T::lit(d as f64);
    eps.max(T::lit(1e-12))
}

fn symmetric_tolerance<T: Real>(m: &DMatrix<T>) -> T {
    let scale = m.iter().fold(T::one(), |acc, v| acc.max(v.abs()));
    T::lit(1e-12).max(T::lit(10.0) * T::machine_eps()) * scale
}

pub(crate) fn check_symmetric<T: Real>(m: &DMatrix<T>, context: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dims(context, m.nrows(), m.ncols()));
    }
    let tol = symmetric_tolerance(m);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::invalid(context, format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Cholesky factor of a PSD matrix; retries once with [`jitter`] on the
/// diagonal when the plain factorization fails.
pub fn cholesky_psd<T: Real>(m: &DMatrix<T>, context: &'static str) -> Result<Cholesky<T, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let eps = jitter(m);
    let n = m.nrows();
    (m + DMatrix::<T>::identity(n, n) * eps)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context })
}

/// `log |m + eps I|` via a Cholesky factorization, with `eps` from [`jitter`].
///
/// The jitter is always applied so that the result scales exactly as
/// `log |c m| = d log c + log |m|`, including for rank-deficient sample
/// covariances.
pub fn log_det_psd<T: Real>(m: &DMatrix<T>) -> Result<T> {
    check_symmetric(m, "log_det_psd")?;
    let n = m.nrows();
    let eps = jitter(m);
    let chol = (m + DMatrix::<T>::identity(n, n) * eps)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context: "log_det_psd" })?;
    Ok(chol_log_det(&chol))
}

pub(crate) fn chol_log_det<T: Real>(c: &Cholesky<T, Dyn>) -> T {
    c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<T>() * T::lit(2.0)
}

/// Unbiased sample covariance (divisor `n - 1`).
pub fn sample_covariance<T: Real>(samples: &[DVector<T>]) -> Result<DMatrix<T>> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: samples.len(),
        });
    }
    let n = T::lit(samples.len() as f64);
    let uniform = vec![T::one() / n; samples.len()];
    weighted_covariance(samples, &uniform)
}

/// Weighted covariance with the reliability-weights correction
/// `1 / (1 - sum w_i^2)`; equals [`sample_covariance`] for uniform weights.
/// Weights must be normalized.
pub fn weighted_covariance<T: Real>(samples: &[DVector<T>], weights: &[T]) -> Result<DMatrix<T>> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: samples.len(),
        });
    }
    if weights.len() != samples.len() {
        return Err(Error::dims("weighted_covariance weights", samples.len(), weights.len()));
    }
    let d = samples[0].len();
    let mut mean = DVector::<T>::zeros(d);
    for (s, &w) in samples.iter().zip(weights) {
        if s.len() != d {
            return Err(Error::dims("weighted_covariance sample", d, s.len()));
        }
        mean.axpy(w, s, T::one());
    }
    let sum_sq: T = weights.iter().map(|&w| w * w).sum();
    let denom = T::one() - sum_sq;
    if denom <= T::zero() {
        return Err(Error::TooFewSamples { needed: 2, found: 1 });
    }
    let mut x = DMatrix::<T>::zeros(d, samples.len());
    let mut xw = DMatrix::<T>::zeros(d, samples.len());
    for (j, (s, &w)) in samples.iter().zip(weights).enumerate() {
        let c = s - &mean;
        xw.column_mut(j).copy_from(&(&c * w));
        x.column_mut(j).copy_from(&c);
    }
    let cov = &xw * x.transpose();
    Ok((&cov + cov.transpose()) / (denom * T::lit(2.0)))
}

/// Symmetric square root `V diag(sqrt(max(l, 0)))` of a PSD matrix, used to
/// draw Gaussian samples. Exact zeros stay zero, so a zero covariance yields
/// deterministic draws.
pub fn psd_sqrt<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    if m.iter().all(|v| *v == T::zero()) {
        return m.clone();
    }
    let eig = SymmetricEigen::new(m.clone());
    let scales = eig.eigenvalues.map(|l| l.max(T::zero()).sqrt());
    let mut f = eig.eigenvectors;
    for (j, s) in scales.iter().enumerate() {
        f.column_mut(j).scale_mut(*s);
    }
    f
}

/// Multivariate normal density with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct GaussianDensity<T: Real> {
    mean: DVector<T>,
    cov: DMatrix<T>,
    chol: Cholesky<T, Dyn>,
    log_det: T,
}

impl<T: Real> GaussianDensity<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dims("GaussianDensity covariance", mean.len(), cov.nrows()));
        }
        check_symmetric(&cov, "GaussianDensity covariance")?;
        let chol = cholesky_psd(&cov, "GaussianDensity covariance")?;
        let log_det = chol_log_det(&chol);
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    pub fn isotropic(mean: DVector<T>, variance: T) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn standard(dim: usize) -> Self {
        Self::isotropic(DVector::zeros(dim), T::one()).expect("identity covariance is PD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<T> {
        &self.cov
    }

    /// `log |cov|` of the (possibly jittered) factorized covariance.
    pub fn log_det(&self) -> T {
        self.log_det
    }

    fn check_dim(&self, x: &DVector<T>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dims("Gaussian argument", self.dim(), x.len()));
        }
        Ok(())
    }

    pub fn log_pdf(&self, x: &DVector<T>) -> Result<T> {
        self.check_dim(x)?;
        let diff = x - &self.mean;
        let z = self.chol.l_dirty().solve_lower_triangular(&diff).expect("non-singular factor");
        let d = T::lit(self.dim() as f64);
        Ok(-(z.norm_squared() + self.log_det + d * T::two_pi().ln()) / T::lit(2.0))
    }

    /// `-cov^-1 (x - mean)`.
    pub fn score(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check_dim(x)?;
        Ok(-self.chol.solve(&(x - &self.mean)))
    }

    /// Differential entropy `(d/2) log(2 pi e) + (1/2) log |cov|`.
    pub fn entropy(&self) -> T {
        let d = T::lit(self.dim() as f64);
        (d * (T::two_pi() * T::e()).ln() + self.log_det) / T::lit(2.0)
    }

    /// `KL(self || other)`.
    pub fn kl_divergence(&self, other: &Self) -> Result<T> {
        if other.dim() != self.dim() {
            return Err(Error::dims("kl_divergence", self.dim(), other.dim()));
        }
        let trace = other.chol.solve(&self.cov).trace();
        let diff = &other.mean - &self.mean;
        let maha = diff.dot(&other.chol.solve(&diff));
        let d = T::lit(self.dim() as f64);
        Ok((trace + maha - d + other.log_det - self.log_det) / T::lit(2.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<T>> {
        let factor = psd_sqrt(&self.cov);
        (0..n)
            .map(|_| &self.mean + &factor * normal_vector::<T, R>(rng, self.dim()))
            .collect()
    }
}

/// `log N(x; g.mean, g.cov)`.
pub fn mvn_logpdf<T: Real>(x: &DVector<T>, g: &GaussianDensity<T>) -> Result<T> {
    g.log_pdf(x)
}

/// Closed-form entropy of a Gaussian with the given covariance.
pub fn gaussian_entropy<T: Real>(cov: &DMatrix<T>) -> Result<T> {
    let d = T::lit(cov.nrows() as f64);
    Ok((d * (T::two_pi() * T::e()).ln() + log_det_psd(cov)?) / T::lit(2.0))
}
