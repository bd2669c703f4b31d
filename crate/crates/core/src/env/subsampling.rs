use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::GmmScore;
use crate::error::{Error, Result};
use crate::gaussian::{psd_sqrt, GaussianDensity};
use crate::gmm::{check_probability_vector, GmmDensity};
use crate::rng::normal_vector;
use crate::RngStream;

/// Selected scanlines of an `n_z x n_y` frame. Frames are vectorized
/// column-major: pixel `(z, line)` sits at `line * n_z + z`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsamplingMask {
    lines: Vec<usize>,
    n_z: usize,
    n_y: usize,
}

impl SubsamplingMask {
    /// Lines are sorted; duplicates and out-of-range indices are rejected.
    pub fn new(mut lines: Vec<usize>, n_z: usize, n_y: usize) -> Result<Self> {
        if let Some(&l) = lines.iter().find(|&&l| l >= n_y) {
            return Err(Error::IndexOutOfRange { index: l, bound: n_y });
        }
        lines.sort_unstable();
        if lines.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("mask lines", "duplicate line index"));
        }
        Ok(Self { lines, n_z, n_y })
    }

    pub fn full(n_z: usize, n_y: usize) -> Self {
        Self {
            lines: (0..n_y).collect(),
            n_z,
            n_y,
        }
    }

    pub fn lines(&self) -> &[usize] {
        &self.lines
    }

    pub fn k(&self) -> usize {
        self.lines.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_z, self.n_y)
    }

    /// Vector indices of the selected pixels, line by line.
    pub fn pixel_indices(&self) -> Vec<usize> {
        self.lines
            .iter()
            .flat_map(|&l| (0..self.n_z).map(move |z| l * self.n_z + z))
            .collect()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.n_z * self.n_y {
            return Err(Error::dims("frame", self.n_z * self.n_y, len));
        }
        Ok(())
    }
}

/// The selected lines of `x`, concatenated.
pub fn apply_mask(x: &DVector<f64>, mask: &SubsamplingMask) -> Result<DVector<f64>> {
    mask.check(x.len())?;
    let idx = mask.pixel_indices();
    Ok(DVector::from_iterator(idx.len(), idx.iter().map(|&i| x[i])))
}

/// [`apply_mask`] plus `N(0, noise_std^2)` on every acquired sample.
pub fn apply_mask_noisy(x: &DVector<f64>, mask: &SubsamplingMask, noise_std: f64, rng: &RngStream) -> Result<DVector<f64>> {
    let y = apply_mask(x, mask)?;
    let n = y.len();
    Ok(y + normal_vector::<f64, _>(&mut rng.rng(), n) * noise_std)
}

/// Places acquired lines back into a zero frame.
pub fn embed(y: &DVector<f64>, mask: &SubsamplingMask) -> Result<DVector<f64>> {
    let idx = mask.pixel_indices();
    if y.len() != idx.len() {
        return Err(Error::dims("masked observation", idx.len(), y.len()));
    }
    let mut x = DVector::zeros(mask.n_z * mask.n_y);
    for (v, &i) in y.iter().zip(&idx) {
        x[i] = *v;
    }
    Ok(x)
}

/// Per-frame mixture with a shared spatial covariance `S_y (x) S_z` and
/// component-conditional AR(1) dynamics
/// `x_{t+1} = m_k + a (x_t - m_k) + sqrt(1 - a^2) e`, `e ~ N(0, S)`,
/// so every frame has the mixture as its marginal and `a = 1` freezes the
/// sequence.
#[derive(Clone, Debug)]
pub struct ImageSequencePrior {
    n_z: usize,
    n_y: usize,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    cov_z: DMatrix<f64>,
    cov_y: DMatrix<f64>,
    ar: f64,
    eig_z: SymmetricEigen<f64, nalgebra::Dyn>,
    eig_y: SymmetricEigen<f64, nalgebra::Dyn>,
    frame_sqrt: DMatrix<f64>,
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(Error::invalid(name, "must be square"));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::invalid(name, "must be symmetric"));
    }
    let e = SymmetricEigen::new(m.clone());
    if e.eigenvalues.min() < -1e-10 * m.amax().max(1.0) {
        return Err(Error::invalid(name, "must be positive semidefinite"));
    }
    Ok(e)
}

impl ImageSequencePrior {
    pub fn new(
        n_z: usize,
        n_y: usize,
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        cov_z: DMatrix<f64>,
        cov_y: DMatrix<f64>,
        ar: f64,
    ) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::dims("prior weights", means.len(), weights.len()));
        }
        check_probability_vector(&weights, "prior weights", 1e-9)?;
        if let Some(m) = means.iter().find(|m| m.len() != n_z * n_y) {
            return Err(Error::dims("prior mean", n_z * n_y, m.len()));
        }
        if cov_z.nrows() != n_z || cov_y.nrows() != n_y {
            return Err(Error::dims("spatial covariance factor", n_z, cov_z.nrows()));
        }
        let eig_z = check_psd(&cov_z, "cov_z")?;
        let eig_y = check_psd(&cov_y, "cov_y")?;
        if !(0.0..=1.0).contains(&ar) {
            return Err(Error::invalid("ar", "must lie in [0, 1]"));
        }
        let frame_sqrt = psd_sqrt(&cov_y.kronecker(&cov_z));
        Ok(Self {
            n_z,
            n_y,
            weights,
            means,
            cov_z,
            cov_y,
            ar,
            eig_z,
            eig_y,
            frame_sqrt,
        })
    }

    /// Random anatomy-like prior: each component is a bright blob at a random
    /// position over a textured background whose variance differs per line.
    pub fn synthetic(p: &SyntheticPriorParams, rng: &RngStream) -> Result<Self> {
        p.validate()?;
        let mut r = rng.rng();
        let (n_z, n_y) = (p.n_z, p.n_y);
        let means = (0..p.n_components)
            .map(|_| {
                let cz = r.random_range(0.0..(n_z - 1) as f64);
                let cy = r.random_range(0.0..(n_y - 1) as f64);
                DVector::from_fn(n_z * n_y, |i, _| {
                    let (z, y) = ((i % n_z) as f64, (i / n_z) as f64);
                    p.blob_amplitude * (-((z - cz).powi(2) + (y - cy).powi(2)) / (2.0 * p.blob_width.powi(2))).exp()
                })
            })
            .collect();
        let se = |n: usize, ell: f64| DMatrix::from_fn(n, n, |i, j| (-((i as f64 - j as f64).powi(2)) / (2.0 * ell * ell)).exp());
        let (lo, hi) = (p.line_std_min.ln(), p.line_std_max.ln());
        let line_std = DVector::from_fn(n_y, |_, _| r.random_range(lo..=hi).exp());
        let d = DMatrix::from_diagonal(&line_std);
        let cov_y = &d * se(n_y, p.length_scale) * &d + DMatrix::identity(n_y, n_y) * p.nugget;
        let cov_z = se(n_z, p.length_scale) + DMatrix::identity(n_z, n_z) * p.nugget;
        let w = vec![1.0 / p.n_components as f64; p.n_components];
        Self::new(n_z, n_y, w, means, cov_z, cov_y, p.ar)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_z, self.n_y)
    }

    pub fn frame_dim(&self) -> usize {
        self.n_z * self.n_y
    }

    pub fn ar(&self) -> f64 {
        self.ar
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    /// `S_y (x) S_z`.
    pub fn frame_covariance(&self) -> DMatrix<f64> {
        self.cov_y.kronecker(&self.cov_z)
    }

    /// Marginal density of a single frame.
    pub fn frame_prior(&self) -> Result<GmmDensity<f64>> {
        let cov = self.frame_covariance();
        let comps = self
            .means
            .iter()
            .map(|m| GaussianDensity::new(m.clone(), cov.clone()))
            .collect::<Result<_>>()?;
        GmmDensity::new(self.weights.clone(), comps)
    }

    /// Exact score of `len` consecutive frames stacked frame after frame:
    /// a mixture with means `1 (x) m_k` and covariance `C (x) S_y (x) S_z`,
    /// `C_st = a^|s - t|`.
    pub fn window_score(&self, len: usize) -> Result<GmmScore<f64>> {
        if len == 0 {
            return Err(Error::invalid("window", "must be >= 1"));
        }
        let c = DMatrix::from_fn(len, len, |s, t| self.ar.powi((s as i32 - t as i32).abs()));
        let eig_c = SymmetricEigen::new(c);
        let means: Vec<DVector<f64>> = self
            .means
            .iter()
            .map(|m| DVector::from_iterator(m.len() * len, (0..len).flat_map(|_| m.iter().copied())))
            .collect();
        GmmScore::shared_kronecker(
            &self.weights,
            &means,
            vec![
                (self.eig_z.eigenvectors.clone(), self.eig_z.eigenvalues.clone()),
                (self.eig_y.eigenvectors.clone(), self.eig_y.eigenvalues.clone()),
                (eig_c.eigenvectors, eig_c.eigenvalues.map(|l| l.max(0.0))),
            ],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPriorParams {
    pub n_z: usize,
    pub n_y: usize,
    pub n_components: usize,
    pub blob_amplitude: f64,
    pub blob_width: f64,
    /// Per-line texture std is log-uniform in `[line_std_min, line_std_max]`.
    pub line_std_min: f64,
    pub line_std_max: f64,
    pub length_scale: f64,
    pub nugget: f64,
    pub ar: f64,
}

impl Default for SyntheticPriorParams {
    fn default() -> Self {
        Self {
            n_z: 8,
            n_y: 8,
            n_components: 6,
            blob_amplitude: 1.0,
            blob_width: 1.5,
            line_std_min: 0.02,
            line_std_max: 1.0,
            length_scale: 0.5,
            nugget: 1e-3,
            ar: 0.9,
        }
    }
}

impl SyntheticPriorParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_z < 2 || self.n_y < 2 {
            return Err(Error::invalid("n_z/n_y", "frames must be at least 2 x 2"));
        }
        if self.n_components == 0 {
            return Err(Error::invalid("n_components", "must be >= 1"));
        }
        if !(self.line_std_min > 0.0 && self.line_std_min <= self.line_std_max) {
            return Err(Error::invalid("line_std_min", "need 0 < line_std_min <= line_std_max"));
        }
        for (name, v) in [("blob_width", self.blob_width), ("length_scale", self.length_scale)] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::invalid(name, "must be > 0"));
            }
        }
        if self.nugget.is_nan() || self.nugget < 0.0 {
            return Err(Error::invalid("nugget", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.ar) {
            return Err(Error::invalid("ar", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Draws a component, then `t_len` frames of its AR(1) chain.
pub fn sample_sequence(prior: &ImageSequencePrior, t_len: usize, rng: &RngStream) -> Vec<DVector<f64>> {
    let mut r = rng.rng();
    let u: f64 = r.random();
    let mut acc = 0.0;
    let mut k = prior.weights.len() - 1;
    for (i, w) in prior.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    let m = &prior.means[k];
    let d = prior.frame_dim();
    let innov = (1.0 - prior.ar * prior.ar).max(0.0).sqrt();
    let mut frames = Vec::with_capacity(t_len);
    let mut x = m + &prior.frame_sqrt * normal_vector::<f64, _>(&mut r, d);
    for _ in 0..t_len {
        frames.push(x.clone());
        x = m + (&x - m) * prior.ar + &prior.frame_sqrt * normal_vector::<f64, _>(&mut r, d) * innov;
    }
    frames
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScoreFunction;
    use nalgebra::dvector;

    fn frame() -> DVector<f64> {
        DVector::from_fn(12, |i, _| i as f64)
    }

    #[test]
    fn full_mask_is_identity_and_single_line_is_column() {
        let x = frame();
        assert_eq!(apply_mask(&x, &SubsamplingMask::full(3, 4)).unwrap(), x);
        let m = SubsamplingMask::new(vec![2], 3, 4).unwrap();
        assert_eq!(apply_mask(&x, &m).unwrap(), dvector![6.0, 7.0, 8.0]);
    }

    #[test]
    fn embed_is_adjoint_of_mask() {
        let x = frame();
        let m = SubsamplingMask::new(vec![3, 1], 3, 4).unwrap();
        assert_eq!(m.lines(), &[1, 3]);
        let e = embed(&apply_mask(&x, &m).unwrap(), &m).unwrap();
        for i in 0..12 {
            let selected = m.pixel_indices().contains(&i);
            assert_eq!(e[i], if selected { x[i] } else { 0.0 });
        }
    }

    #[test]
    fn mask_validation() {
        assert!(SubsamplingMask::new(vec![4], 3, 4).is_err());
        assert!(SubsamplingMask::new(vec![1, 1], 3, 4).is_err());
        assert!(apply_mask(&DVector::zeros(5), &SubsamplingMask::full(3, 4)).is_err());
    }

    #[test]
    fn frozen_chain_is_constant() {
        let p = ImageSequencePrior::synthetic(
            &SyntheticPriorParams {
                ar: 1.0,
                ..Default::default()
            },
            &RngStream::new(1),
        )
        .unwrap();
        let s = sample_sequence(&p, 5, &RngStream::new(2));
        assert!(s.iter().all(|f| f == &s[0]));
        assert_eq!(s, sample_sequence(&p, 5, &RngStream::new(2)));
    }

    #[test]
    fn window_score_matches_dense_window_density() {
        let p = ImageSequencePrior::synthetic(
            &SyntheticPriorParams {
                n_z: 3,
                n_y: 2,
                n_components: 2,
                ..Default::default()
            },
            &RngStream::new(3),
        )
        .unwrap();
        let len = 3;
        let c = DMatrix::from_fn(len, len, |s, t| p.ar().powi((s as i32 - t as i32).abs()));
        let ab = 0.5;
        let cov = c.kronecker(&p.frame_covariance()) * ab + DMatrix::identity(18, 18) * (1.0 - ab);
        let dense = GmmDensity::new(
            p.weights().to_vec(),
            p.means()
                .iter()
                .map(|m| {
                    let mm = DVector::from_iterator(18, (0..len).flat_map(|_| m.iter().copied()));
                    GaussianDensity::new(mm * ab.sqrt(), cov.clone()).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let x = DVector::from_fn(18, |i, _| (i as f64 * 0.7).sin());
        let got = p.window_score(len).unwrap().score(&x, ab).unwrap();
        assert!((got - dense.score(&x).unwrap()).amax() < 1e-10);
    }

    #[test]
    fn frame_marginals_match_prior() {
        let p = ImageSequencePrior::synthetic(
            &SyntheticPriorParams {
                n_z: 3,
                n_y: 3,
                n_components: 2,
                ..Default::default()
            },
            &RngStream::new(5),
        )
        .unwrap();
        let prior = p.frame_prior().unwrap();
        let n = 10_000;
        let frames: Vec<DVector<f64>> = (0..n).map(|i| sample_sequence(&p, 3, &RngStream::new(6).substream(i))[2].clone()).collect();
        let mean = frames.iter().fold(DVector::zeros(9), |a, f| a + f) / n as f64;
        let cov = crate::gaussian::sample_covariance(&frames).unwrap();
        assert!((mean - prior.mean()).amax() < 0.05);
        assert!((cov - prior.covariance()).amax() < 0.06);
    }
}
