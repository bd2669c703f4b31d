//! Score functions of noise-perturbed densities.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::gmm::GmmDensity;
use crate::scalar::log_sum_exp;
use crate::Real;

/// `grad_x log p_t(x)` of the density perturbed to noise level `alpha_bar`,
/// i.e. of `x = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) n`.
pub trait ScoreFunction<T: Real>: Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &DVector<T>, alpha_bar: T) -> Result<DVector<T>>;

    /// Score at `x` together with the Hessian of `log p_t` applied to a
    /// direction. The direction is produced from the score by `direction`,
    /// which lets callers build it from the Tweedie estimate without a second
    /// score evaluation.
    ///
    /// The default uses a central finite difference of [`Self::score`].
    fn score_hvp(
        &self,
        x: &DVector<T>,
        alpha_bar: T,
        direction: &mut dyn FnMut(&DVector<T>) -> Result<DVector<T>>,
    ) -> Result<(DVector<T>, DVector<T>)> {
        let s = self.score(x, alpha_bar)?;
        let v = direction(&s)?;
        let vmax = v.amax();
        if vmax == T::zero() {
            return Ok((s, DVector::zeros(x.len())));
        }
        let h = T::machine_eps().cbrt() * (T::one() + x.amax()) / vmax;
        let plus = self.score(&(x + &v * h), alpha_bar)?;
        let minus = self.score(&(x - &v * h), alpha_bar)?;
        Ok((s, (plus - minus) / (h + h)))
    }
}

/// Score given by a closure; Hessian products use finite differences.
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F> FnScore<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T: Real, F> ScoreFunction<T> for FnScore<F>
where
    F: Fn(&DVector<T>, T) -> DVector<T> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &DVector<T>, alpha_bar: T) -> Result<DVector<T>> {
        if x.len() != self.dim {
            return Err(Error::dims("score input", self.dim, x.len()));
        }
        Ok((self.f)(x, alpha_bar))
    }
}

#[derive(Clone, Debug)]
struct Component<T: Real> {
    basis: usize,
    mean: DVector<T>,
    eig: DVector<T>,
}

type ComponentTerms<T> = (Vec<T>, Vec<DVector<T>>, Vec<DVector<T>>);

/// Exact score of a perturbed Gaussian mixture. The perturbed mixture has
/// means `sqrt(ab) m_k` and covariances `ab S_k + (1 - ab) I`; each `S_k` is
/// kept in its eigenbasis so every noise level costs one rotation per
/// distinct basis plus `O(K d)`.
#[derive(Clone, Debug)]
pub struct GmmScore<T: Real> {
    dim: usize,
    log_weights: Vec<T>,
    bases: Vec<Basis<T>>,
    comps: Vec<Component<T>>,
}

#[derive(Clone, Debug)]
enum Basis<T: Real> {
    Identity,
    Dense(DMatrix<T>),
    /// `U_{m-1} (x) ... (x) U_0`, acting on vectors whose first mode varies fastest.
    Kron(Vec<DMatrix<T>>),
}

/// Applies `U_{m-1} (x) ... (x) U_0` (or its transpose) by mode products.
fn kron_apply<T: Real>(factors: &[DMatrix<T>], v: &DVector<T>, transpose: bool) -> DVector<T> {
    let total = v.len();
    let mut cur = v.clone();
    let mut next = DVector::zeros(total);
    let mut inner = 1;
    for f in factors {
        let n = f.nrows();
        let outer = total / (inner * n);
        for o in 0..outer {
            let base = inner * n * o;
            for i in 0..inner {
                for r in 0..n {
                    let mut acc = T::zero();
                    for j in 0..n {
                        let m = if transpose { f[(j, r)] } else { f[(r, j)] };
                        acc += m * cur[base + i + inner * j];
                    }
                    next[base + i + inner * r] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
        inner *= n;
    }
    cur
}

impl<T: Real> Basis<T> {
    fn to_local(&self, v: &DVector<T>) -> DVector<T> {
        match self {
            Self::Identity => v.clone(),
            Self::Dense(u) => u.tr_mul(v),
            Self::Kron(f) => kron_apply(f, v, true),
        }
    }

    fn add_global(&self, out: &mut DVector<T>, p: DVector<T>) {
        match self {
            Self::Identity => *out += p,
            Self::Dense(u) => out.gemv(T::one(), u, &p, T::one()),
            Self::Kron(f) => *out += kron_apply(f, &p, false),
        }
    }
}

fn is_diagonal<T: Real>(m: &DMatrix<T>) -> bool {
    m.iter()
        .enumerate()
        .all(|(idx, v)| idx % m.nrows() == idx / m.nrows() || *v == T::zero())
}

impl<T: Real> GmmScore<T> {
    pub fn new(prior: &GmmDensity<T>) -> Self {
        let dim = prior.dim();
        let mut bases: Vec<Basis<T>> = Vec::new();
        let mut seen: Vec<(DMatrix<T>, usize)> = Vec::new();
        let mut comps = Vec::with_capacity(prior.len());
        for c in prior.components() {
            let cov = c.cov();
            let (basis, eig) = if is_diagonal(cov) {
                let idx = match bases.iter().position(|b| matches!(b, Basis::Identity)) {
                    Some(i) => i,
                    None => {
                        bases.push(Basis::Identity);
                        bases.len() - 1
                    }
                };
                (idx, cov.diagonal())
            } else if let Some((_, idx)) = seen.iter().find(|(m, _)| m == cov) {
                let Basis::Dense(u) = &bases[*idx] else {
                    unreachable!("non-diagonal covariances get dense bases")
                };
                (*idx, (u.transpose() * cov * u).diagonal())
            } else {
                let e = SymmetricEigen::new(cov.clone());
                bases.push(Basis::Dense(e.eigenvectors));
                seen.push((cov.clone(), bases.len() - 1));
                (bases.len() - 1, e.eigenvalues)
            };
            let mean = bases[basis].to_local(c.mean());
            comps.push(Component {
                basis,
                mean,
                eig: eig.map(|l| l.max(T::zero())),
            });
        }
        let log_weights = prior.weights().iter().map(|w| w.ln()).collect();
        Self {
            dim,
            log_weights,
            bases,
            comps,
        }
    }

    /// Mixture with one shared covariance given directly by its eigenbasis
    /// `u` and eigenvalues, avoiding a dense decomposition.
    pub fn shared_eigen(weights: &[T], means: &[DVector<T>], u: DMatrix<T>, eig: DVector<T>) -> Result<Self> {
        if u.nrows() != eig.len() || u.ncols() != eig.len() {
            return Err(Error::dims("eigenbasis", eig.len(), u.nrows()));
        }
        Self::shared(weights, means, Basis::Dense(u), eig)
    }

    /// Mixture with one shared covariance `S_{m-1} (x) ... (x) S_0`, given the
    /// eigendecomposition `(U_i, l_i)` of each factor. Vectors are laid out
    /// with the index of factor 0 varying fastest.
    pub fn shared_kronecker(weights: &[T], means: &[DVector<T>], factors: Vec<(DMatrix<T>, DVector<T>)>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Empty("Kronecker factors"));
        }
        let mut eig = DVector::from_element(1, T::one());
        let mut bases = Vec::with_capacity(factors.len());
        for (u, l) in factors {
            if !u.is_square() || u.nrows() != l.len() {
                return Err(Error::dims("Kronecker factor", l.len(), u.nrows()));
            }
            // new factor varies slowest
            eig = DVector::from_iterator(eig.len() * l.len(), l.iter().flat_map(|li| eig.iter().map(move |e| *e * *li)));
            bases.push(u);
        }
        Self::shared(weights, means, Basis::Kron(bases), eig)
    }

    fn shared(weights: &[T], means: &[DVector<T>], basis: Basis<T>, eig: DVector<T>) -> Result<Self> {
        let dim = eig.len();
        if weights.len() != means.len() || means.is_empty() {
            return Err(Error::dims("mixture weights", means.len(), weights.len()));
        }
        crate::gmm::check_probability_vector(weights, "mixture weights", 1e-9)?;
        let comps = means
            .iter()
            .map(|m| {
                if m.len() != dim {
                    return Err(Error::dims("mixture mean", dim, m.len()));
                }
                Ok(Component {
                    basis: 0,
                    mean: basis.to_local(m),
                    eig: eig.map(|l| l.max(T::zero())),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dim,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            bases: vec![basis],
            comps,
        })
    }

    /// The dense orthonormal basis shared by every component, if there is exactly one.
    pub fn shared_basis(&self) -> Option<&DMatrix<T>> {
        match self.bases.as_slice() {
            [Basis::Dense(u)] => Some(u),
            _ => None,
        }
    }

    /// Maps `x` into the coordinates of the single shared basis.
    pub fn to_shared_coords(&self, x: &DVector<T>) -> Option<DVector<T>> {
        match self.bases.as_slice() {
            [b] => Some(b.to_local(x)),
            _ => None,
        }
    }

    /// Inverse of [`Self::to_shared_coords`].
    pub fn from_shared_coords(&self, z: &DVector<T>) -> Option<DVector<T>> {
        match self.bases.as_slice() {
            [b] => {
                let mut out = DVector::zeros(self.dim);
                b.add_global(&mut out, z.clone());
                Some(out)
            }
            _ => None,
        }
    }

    /// The same mixture expressed in the coordinates of its shared basis,
    /// where every component covariance is diagonal.
    pub fn rotated(&self) -> Option<Self> {
        if self.bases.len() != 1 {
            return None;
        }
        Some(Self {
            dim: self.dim,
            log_weights: self.log_weights.clone(),
            bases: vec![Basis::Identity],
            comps: self
                .comps
                .iter()
                .map(|c| Component {
                    basis: 0,
                    ..c.clone()
                })
                .collect(),
        })
    }

    fn rotate_in(&self, v: &DVector<T>) -> Vec<DVector<T>> {
        self.bases.iter().map(|b| b.to_local(v)).collect()
    }

    fn rotate_out(&self, parts: Vec<DVector<T>>) -> DVector<T> {
        let mut out = DVector::zeros(self.dim);
        for (b, p) in self.bases.iter().zip(parts) {
            b.add_global(&mut out, p);
        }
        out
    }

    /// Responsibilities, per-component scores (rotated) and blurred variances.
    fn components_at(&self, xr: &[DVector<T>], alpha_bar: T) -> Result<ComponentTerms<T>> {
        let sa = alpha_bar.sqrt();
        let noise = T::one() - alpha_bar;
        let floor = T::machine_eps();
        let mut logs = Vec::with_capacity(self.comps.len());
        let mut grads = Vec::with_capacity(self.comps.len());
        let mut lams = Vec::with_capacity(self.comps.len());
        for (c, lw) in self.comps.iter().zip(&self.log_weights) {
            let lam = c.eig.map(|l| (alpha_bar * l + noise).max(floor));
            let z = &xr[c.basis] - &c.mean * sa;
            let mut quad = T::zero();
            let mut logdet = T::zero();
            let g = DVector::from_iterator(
                self.dim,
                z.iter().zip(lam.iter()).map(|(zi, li)| {
                    quad += *zi * *zi / *li;
                    logdet += li.ln();
                    -*zi / *li
                }),
            );
            logs.push(*lw - (quad + logdet) / T::lit(2.0));
            grads.push(g);
            lams.push(lam);
        }
        let norm = log_sum_exp(&logs);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "mixture score normalizer",
                step: 0,
            });
        }
        let resp = logs.iter().map(|l| (*l - norm).exp()).collect();
        Ok((resp, grads, lams))
    }

    fn check_dim(&self, x: &DVector<T>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dims("score input", self.dim, x.len()));
        }
        Ok(())
    }
}

impl<T: Real> ScoreFunction<T> for GmmScore<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &DVector<T>, alpha_bar: T) -> Result<DVector<T>> {
        self.check_dim(x)?;
        let xr = self.rotate_in(x);
        let (resp, grads, _) = self.components_at(&xr, alpha_bar)?;
        let mut parts = vec![DVector::zeros(self.dim); self.bases.len()];
        for ((c, r), g) in self.comps.iter().zip(&resp).zip(&grads) {
            parts[c.basis].axpy(*r, g, T::one());
        }
        Ok(self.rotate_out(parts))
    }

    /// `H v = sum_k r_k (-P_k v + g_k (g_k . v)) - s (s . v)`.
    fn score_hvp(
        &self,
        x: &DVector<T>,
        alpha_bar: T,
        direction: &mut dyn FnMut(&DVector<T>) -> Result<DVector<T>>,
    ) -> Result<(DVector<T>, DVector<T>)> {
        self.check_dim(x)?;
        let xr = self.rotate_in(x);
        let (resp, grads, lams) = self.components_at(&xr, alpha_bar)?;
        let mut parts = vec![DVector::zeros(self.dim); self.bases.len()];
        for ((c, r), g) in self.comps.iter().zip(&resp).zip(&grads) {
            parts[c.basis].axpy(*r, g, T::one());
        }
        let s = self.rotate_out(parts);
        let v = direction(&s)?;
        if v.len() != self.dim {
            return Err(Error::dims("Hessian direction", self.dim, v.len()));
        }
        let vr = self.rotate_in(&v);
        let mut parts = vec![DVector::zeros(self.dim); self.bases.len()];
        for (((c, r), g), lam) in self.comps.iter().zip(&resp).zip(&grads).zip(&lams) {
            if *r == T::zero() {
                continue;
            }
            let vb = &vr[c.basis];
            let gv = g.dot(vb);
            let p = &mut parts[c.basis];
            for i in 0..self.dim {
                p[i] += *r * (g[i] * gv - vb[i] / lam[i]);
            }
        }
        let sv = s.dot(&v);
        let hv = self.rotate_out(parts) - &s * sv;
        Ok((s, hv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianDensity;
    use nalgebra::{dmatrix, dvector};

    fn blurred(prior: &GmmDensity<f64>, ab: f64) -> GmmDensity<f64> {
        let d = prior.dim();
        let comps = prior
            .components()
            .iter()
            .map(|c| {
                GaussianDensity::new(
                    c.mean() * ab.sqrt(),
                    c.cov() * ab + DMatrix::identity(d, d) * (1.0 - ab),
                )
                .unwrap()
            })
            .collect();
        GmmDensity::new(prior.weights().to_vec(), comps).unwrap()
    }

    fn mixed_prior() -> GmmDensity<f64> {
        let a = GaussianDensity::new(dvector![1.0, -1.0], dmatrix![0.5, 0.2; 0.2, 0.3]).unwrap();
        let b = GaussianDensity::new(dvector![-1.0, 0.5], dmatrix![0.2, 0.0; 0.0, 0.4]).unwrap();
        let c = GaussianDensity::new(dvector![0.0, 2.0], dmatrix![0.5, 0.2; 0.2, 0.3]).unwrap();
        GmmDensity::new(vec![0.3, 0.5, 0.2], vec![a, b, c]).unwrap()
    }

    #[test]
    fn matches_density_score_of_blurred_mixture() {
        let prior = mixed_prior();
        let s = GmmScore::new(&prior);
        assert_eq!(s.bases.len(), 2);
        for ab in [0.999, 0.7, 0.2, 1e-4] {
            let b = blurred(&prior, ab);
            for x in [dvector![0.3, 0.1], dvector![-2.0, 1.5], dvector![4.0, -3.0]] {
                let got = s.score(&x, ab).unwrap();
                let want = b.score(&x).unwrap();
                assert!((got - want).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn hvp_matches_finite_difference() {
        let prior = mixed_prior();
        let s = GmmScore::new(&prior);
        let fd = FnScore::new(2, |x: &DVector<f64>, ab: f64| s.score(x, ab).unwrap());
        for ab in [0.9, 0.3] {
            let x = dvector![0.2, 0.4];
            let dir = |sc: &DVector<f64>| -> Result<DVector<f64>> { Ok(dvector![1.0, -0.5] + sc) };
            let (s1, h1) = s.score_hvp(&x, ab, &mut dir.clone()).unwrap();
            let (s2, h2) = fd.score_hvp(&x, ab, &mut dir.clone()).unwrap();
            assert!((s1 - s2).amax() < 1e-14);
            assert!((&h1 - &h2).amax() < 1e-6, "{h1} vs {h2}");
        }
    }

    #[test]
    fn gaussian_hessian_is_negative_precision() {
        let g = GaussianDensity::new(dvector![0.0], dmatrix![4.0]).unwrap();
        let s = GmmScore::new(&GmmDensity::single(g));
        let ab = 0.5;
        let (_, hv) = s.score_hvp(&dvector![1.0], ab, &mut |_: &DVector<f64>| -> Result<DVector<f64>> { Ok(dvector![1.0]) }).unwrap();
        assert!((hv[0] + 1.0 / (ab * 4.0 + 1.0 - ab)).abs() < 1e-14);
    }

    #[test]
    fn rotated_score_is_rotation_of_score() {
        let a = GaussianDensity::new(dvector![1.0, 0.0], dmatrix![0.5, 0.2; 0.2, 0.3]).unwrap();
        let b = GaussianDensity::new(dvector![-1.0, 0.5], dmatrix![0.5, 0.2; 0.2, 0.3]).unwrap();
        let s = GmmScore::new(&GmmDensity::new(vec![0.4, 0.6], vec![a, b]).unwrap());
        let u = s.shared_basis().unwrap().clone();
        let r = s.rotated().unwrap();
        let x = dvector![0.3, -0.2];
        let direct = u.tr_mul(&s.score(&x, 0.6).unwrap());
        let rot = r.score(&u.tr_mul(&x), 0.6).unwrap();
        assert!((direct - rot).amax() < 1e-12);
    }

    #[test]
    fn shared_eigen_matches_dense() {
        let cov = dmatrix![0.5, 0.2; 0.2, 0.3];
        let e = SymmetricEigen::new(cov.clone());
        let means = vec![dvector![1.0, 0.0], dvector![-1.0, 0.5]];
        let s = GmmScore::shared_eigen(&[0.4, 0.6], &means, e.eigenvectors, e.eigenvalues).unwrap();
        let dense = GmmDensity::new(
            vec![0.4, 0.6],
            means.iter().map(|m| GaussianDensity::new(m.clone(), cov.clone()).unwrap()).collect(),
        )
        .unwrap();
        let x = dvector![0.7, 0.7];
        assert!((s.score(&x, 0.8).unwrap() - blurred(&dense, 0.8).score(&x).unwrap()).amax() < 1e-10);
    }

    #[test]
    fn kronecker_matches_dense() {
        let a = dmatrix![0.5, 0.2; 0.2, 0.3];
        let b = dmatrix![1.0, 0.4, 0.1; 0.4, 0.8, 0.3; 0.1, 0.3, 0.6];
        let cov = b.kronecker(&a);
        let means = vec![DVector::from_fn(6, |i, _| i as f64 * 0.1), DVector::from_fn(6, |i, _| 1.0 - i as f64 * 0.2)];
        let ea = SymmetricEigen::new(a);
        let eb = SymmetricEigen::new(b);
        let s = GmmScore::shared_kronecker(
            &[0.3, 0.7],
            &means,
            vec![(ea.eigenvectors, ea.eigenvalues), (eb.eigenvectors, eb.eigenvalues)],
        )
        .unwrap();
        let dense = GmmDensity::new(
            vec![0.3, 0.7],
            means.iter().map(|m| GaussianDensity::new(m.clone(), cov.clone()).unwrap()).collect(),
        )
        .unwrap();
        let x = DVector::from_fn(6, |i, _| (i as f64).sin());
        for ab in [0.9, 0.2] {
            assert!((s.score(&x, ab).unwrap() - blurred(&dense, ab).score(&x).unwrap()).amax() < 1e-10);
        }
        let z = s.to_shared_coords(&x).unwrap();
        assert!((s.from_shared_coords(&z).unwrap() - &x).amax() < 1e-12);
        let r = s.rotated().unwrap();
        let direct = s.to_shared_coords(&s.score(&x, 0.5).unwrap()).unwrap();
        assert!((r.score(&z, 0.5).unwrap() - direct).amax() < 1e-12);
    }

    #[test]
    fn dimension_checked() {
        let s = GmmScore::new(&GmmDensity::single(GaussianDensity::<f64>::standard(2)));
        assert!(s.score(&dvector![1.0], 0.5).is_err());
    }
}
