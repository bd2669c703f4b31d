//! Gaussian mixtures with exact log-density, score and sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gaussian::{psd_sqrt, GaussianDensity};
use crate::rng::normal_vector;
use crate::scalar::log_sum_exp;
use crate::Real;

#[derive(Clone, Debug)]
pub struct GmmDensity<T: Real> {
    weights: Vec<T>,
    log_weights: Vec<T>,
    components: Vec<GaussianDensity<T>>,
}

pub(crate) fn check_probability_vector<T: Real>(w: &[T], name: &str, tol: f64) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid(name, "empty weight vector"));
    }
    if w.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::invalid(name, "weights must be finite and non-negative"));
    }
    let sum: T = w.iter().copied().sum();
    let tol = T::lit(tol).max(T::lit(w.len() as f64) * T::machine_eps() * T::lit(4.0));
    if (sum - T::one()).abs() > tol {
        return Err(Error::invalid(name, format!("weights sum to {}", sum.to_f64_lossy())));
    }
    Ok(())
}

impl<T: Real> GmmDensity<T> {
    pub fn new(weights: Vec<T>, components: Vec<GaussianDensity<T>>) -> Result<Self> {
        if weights.len() != components.len() {
            return Err(Error::dims("GmmDensity weights", components.len(), weights.len()));
        }
        check_probability_vector(&weights, "GmmDensity weights", 1e-12)?;
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::dims("GmmDensity component", d, c.dim()));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            components,
        })
    }

    /// Mixture whose components all share the isotropic covariance `variance * I`.
    pub fn isotropic(means: Vec<DVector<T>>, weights: Vec<T>, variance: T) -> Result<Self> {
        let comps = means
            .into_iter()
            .map(|m| GaussianDensity::isotropic(m, variance))
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights, comps)
    }

    pub fn single(g: GaussianDensity<T>) -> Self {
        Self::new(vec![T::one()], vec![g]).expect("single component is valid")
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianDensity<T>] {
        &self.components
    }

    fn component_log_joint(&self, x: &DVector<T>) -> Result<Vec<T>> {
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| Ok(*lw + c.log_pdf(x)?))
            .collect()
    }

    pub fn log_pdf(&self, x: &DVector<T>) -> Result<T> {
        Ok(log_sum_exp(&self.component_log_joint(x)?))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &DVector<T>) -> Result<Vec<T>> {
        let lj = self.component_log_joint(x)?;
        let norm = log_sum_exp(&lj);
        Ok(lj.into_iter().map(|v| (v - norm).exp()).collect())
    }

    /// `grad_x log p(x) = sum_k r_k(x) * (-cov_k^-1 (x - mean_k))`.
    pub fn score(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let r = self.responsibilities(x)?;
        let mut s = DVector::zeros(self.dim());
        for (c, rk) in self.components.iter().zip(r) {
            if rk > T::zero() {
                s.axpy(rk, &c.score(x)?, T::one());
            }
        }
        Ok(s)
    }

    /// Mixture mean `sum_k w_k mean_k`.
    pub fn mean(&self) -> DVector<T> {
        let mut m = DVector::zeros(self.dim());
        for (c, w) in self.components.iter().zip(&self.weights) {
            m.axpy(*w, c.mean(), T::one());
        }
        m
    }

    /// Mixture covariance (law of total covariance).
    pub fn covariance(&self) -> DMatrix<T> {
        let mu = self.mean();
        let d = self.dim();
        let mut cov = DMatrix::zeros(d, d);
        for (c, w) in self.components.iter().zip(&self.weights) {
            let diff = c.mean() - &mu;
            cov += (c.cov() + &diff * diff.transpose()) * *w;
        }
        cov
    }

    /// Draws the component index by inverse CDF on the weights, then a
    /// Gaussian sample from that component.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<T>> {
        self.sample_labeled(n, rng).into_iter().map(|(_, x)| x).collect()
    }

    /// Like [`Self::sample`], returning the drawn component index with each sample.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, DVector<T>)> {
        let factors: Vec<DMatrix<T>> = self.components.iter().map(|c| psd_sqrt(c.cov())).collect();
        (0..n)
            .map(|_| {
                let k = self.draw_component(rng);
                let z = normal_vector::<T, R>(rng, self.dim());
                (k, self.components[k].mean() + &factors[k] * z)
            })
            .collect()
    }

    pub(crate) fn draw_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = T::lit(rng.random::<f64>());
        let mut acc = T::zero();
        for (k, w) in self.weights.iter().enumerate() {
            acc += *w;
            if u < acc {
                return k;
            }
        }
        // rounding: land on the last component with positive weight
        self.weights.iter().rposition(|w| *w > T::zero()).unwrap_or(0)
    }
}

pub fn gmm_logpdf<T: Real>(x: &DVector<T>, p: &GmmDensity<T>) -> Result<T> {
    p.log_pdf(x)
}

pub fn gmm_score<T: Real>(x: &DVector<T>, p: &GmmDensity<T>) -> Result<DVector<T>> {
    p.score(x)
}

pub fn gmm_sample<T: Real>(p: &GmmDensity<T>, n: usize, rng: &crate::RngStream) -> Vec<DVector<T>> {
    p.sample(n, &mut rng.rng())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::mvn_logpdf;
    use crate::RngStream;
    use nalgebra::{dmatrix, dvector};

    fn three_component() -> GmmDensity<f64> {
        GmmDensity::new(
            vec![0.2, 0.5, 0.3],
            vec![
                GaussianDensity::new(dvector![0.0, 1.0], dmatrix![1.0, 0.3; 0.3, 0.5]).unwrap(),
                GaussianDensity::new(dvector![-2.0, 0.5], dmatrix![0.4, -0.1; -0.1, 0.8]).unwrap(),
                GaussianDensity::new(dvector![1.5, -1.0], dmatrix![2.0, 0.0; 0.0, 0.3]).unwrap(),
            ],
        )
        .unwrap()
    }

    /// Independent log-sum-exp evaluation straight from the density formula.
    fn oracle_logpdf(x: &DVector<f64>, p: &GmmDensity<f64>) -> f64 {
        let terms: Vec<f64> = p
            .components()
            .iter()
            .zip(p.weights())
            .map(|(c, w)| {
                let inv = c.cov().clone().try_inverse().unwrap();
                let diff = x - c.mean();
                let q = (diff.transpose() * inv * &diff)[(0, 0)];
                let d = x.len() as f64;
                w.ln() - 0.5 * (q + c.cov().determinant().ln() + d * (2.0 * std::f64::consts::PI).ln())
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn single_component_reduces_to_gaussian() {
        let g = GaussianDensity::new(dvector![1.0f64, 2.0], dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
        let p = GmmDensity::single(g.clone());
        let x = dvector![0.3, -0.7];
        assert!((p.log_pdf(&x).unwrap() - mvn_logpdf(&x, &g).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn symmetric_mixture_symmetric_values() {
        let p = GmmDensity::isotropic(vec![dvector![2.0f64], dvector![-2.0]], vec![0.5, 0.5], 0.5).unwrap();
        let a = p.log_pdf(&dvector![2.0]).unwrap();
        let b = p.log_pdf(&dvector![-2.0]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(p.score(&dvector![0.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn matches_direct_evaluation() {
        let p = three_component();
        let mut rng = RngStream::new(5).rng();
        for _ in 0..20 {
            let x = dvector![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            assert!((p.log_pdf(&x).unwrap() - oracle_logpdf(&x, &p)).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_score_is_negative_identity() {
        let p = GmmDensity::single(GaussianDensity::<f64>::standard(1));
        for x in [-2.0, 0.3, 4.0] {
            assert!((p.score(&dvector![x]).unwrap()[0] + x).abs() < 1e-14);
        }
    }

    #[test]
    fn score_matches_central_differences() {
        let p = three_component();
        let mut rng = RngStream::new(9).rng();
        let h = 1e-5;
        for _ in 0..20 {
            let x = dvector![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let s = p.score(&x).unwrap();
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (oracle_logpdf(&xp, &p) - oracle_logpdf(&xm, &p)) / (2.0 * h);
                assert!((fd - s[i]).abs() < 1e-5, "fd {fd} vs {}", s[i]);
            }
        }
    }

    #[test]
    fn degenerate_component_sampling() {
        let p = GmmDensity::single(GaussianDensity::new(dvector![3.0], DMatrix::zeros(1, 1)).unwrap());
        assert!(gmm_sample(&p, 50, &RngStream::new(1)).iter().all(|s| s[0] == 3.0));
    }

    #[test]
    fn empirical_weights() {
        let p = GmmDensity::isotropic(
            vec![dvector![-5.0], dvector![0.0], dvector![5.0]],
            vec![0.2, 0.3, 0.5],
            0.01,
        )
        .unwrap();
        let s = gmm_sample(&p, 100_000, &RngStream::new(2));
        let frac = |lo: f64, hi: f64| s.iter().filter(|v| v[0] > lo && v[0] < hi).count() as f64 / 1e5;
        assert!((frac(-10.0, -2.5) - 0.2).abs() < 0.01);
        assert!((frac(-2.5, 2.5) - 0.3).abs() < 0.01);
        assert!((frac(2.5, 10.0) - 0.5).abs() < 0.01);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = three_component();
        assert_eq!(gmm_sample(&p, 10, &RngStream::new(4)), gmm_sample(&p, 10, &RngStream::new(4)));
    }

    #[test]
    fn rejects_bad_weights() {
        let g = GaussianDensity::<f64>::standard(1);
        assert!(GmmDensity::new(vec![0.5, 0.6], vec![g.clone(), g.clone()]).is_err());
        assert!(GmmDensity::new(vec![1.2, -0.2], vec![g.clone(), g.clone()]).is_err());
        let g2 = GaussianDensity::<f64>::standard(2);
        assert!(GmmDensity::new(vec![0.5, 0.5], vec![g, g2]).is_err());
    }
}
