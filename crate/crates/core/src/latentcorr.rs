//! Diagonal and part-correlated Gaussians over latent variables.
//!
//! The correlated family couples the K part-latents coordinate by coordinate:
//! for coordinate `j`,
//!
//! ```text
//! w_ij = mu_ij + sigma_ij * (eps_ij - rho_ij * sum_i' eps_i'j)
//! ```
//!
//! which is `N(mu_j, D_j S_j S_j^T D_j)` with `D_j = diag(sigma_.j)` and
//! `S_j = I - rho_j 1^T`. The matrix determinant lemma gives
//! `|S_j| = 1 - sum_i rho_ij`, so the KL divergence against a diagonal Gaussian
//! has a closed form.
//!
//! All tensors are laid out `(..., K, d)`: parts on the second-to-last axis,
//! latent coordinates on the last. Leading axes are batch axes.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Lower clamp applied to `1 - sum_i rho_ij` before taking its log.
pub const DET_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal normal parametrized by mean and log-variance.
#[derive(Clone, Debug)]
pub struct DiagGaussian {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl DiagGaussian {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.dims() != log_var.dims() {
            return Err(Error::Shape(format!(
                "mean {:?} vs log-variance {:?}",
                mu.dims(),
                log_var.dims()
            )));
        }
        Ok(Self { mu, log_var })
    }

    /// Splits the last axis of `raw` in two halves `(mu, log_var)`.
    pub fn from_chunks(raw: &Tensor) -> Result<Self> {
        let n = raw.dim(D::Minus1)?;
        if n % 2 != 0 {
            return Err(Error::Shape(format!(
                "cannot split odd width {n} into (mu, nu)"
            )));
        }
        let mu = raw.narrow(D::Minus1, 0, n / 2)?;
        let log_var = raw.narrow(D::Minus1, n / 2, n / 2)?;
        Self::new(mu, log_var)
    }

    /// Clamps the log-variance so that every standard deviation is at least
    /// `sigma_min`.
    pub fn with_sigma_floor(self, sigma_min: f64) -> Result<Self> {
        let floor = 2.0 * sigma_min.ln();
        let log_var = self.log_var.maximum(floor)?;
        Ok(Self {
            mu: self.mu,
            log_var,
        })
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok((&self.log_var * 0.5)?.exp()?)
    }

    /// Reparametrized draw `mu + sigma * eps`.
    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        if eps.dims() != self.mu.dims() {
            return Err(Error::Shape(format!(
                "noise {:?} vs distribution {:?}",
                eps.dims(),
                self.mu.dims()
            )));
        }
        Ok((&self.mu + (self.std()? * eps)?)?)
    }

    /// Elementwise log-density of `x` (broadcast against the parameters).
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        let diff = x.broadcast_sub(&self.mu)?;
        let maha = diff.sqr()?.broadcast_mul(&self.log_var.neg()?.exp()?)?;
        let lp = ((maha.broadcast_add(&self.log_var)? + LN_2PI)? * -0.5)?;
        Ok(lp)
    }

    /// Elementwise `KL(self || other)`.
    pub fn kl(&self, other: &DiagGaussian) -> Result<Tensor> {
        let inv_var_p = other.log_var.neg()?.exp()?;
        let ratio = (&self.log_var - &other.log_var)?.exp()?;
        let maha = (&self.mu - &other.mu)?.sqr()?.mul(&inv_var_p)?;
        let log_term = (&other.log_var - &self.log_var)?;
        Ok((((ratio + maha)? + log_term)? - 1.0)?.affine(0.5, 0.0)?)
    }
}

/// Part-correlated multivariate normal over K part-latents.
#[derive(Clone, Debug)]
pub struct CorrGaussianFamily {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    /// Pre-activation correlation logits.
    pub rho_pre: Tensor,
}

impl CorrGaussianFamily {
    pub fn new(mu: Tensor, log_sigma: Tensor, rho_pre: Tensor) -> Result<Self> {
        if mu.dims() != log_sigma.dims() || mu.dims() != rho_pre.dims() {
            return Err(Error::Shape(format!(
                "family parameters disagree: {:?}, {:?}, {:?}",
                mu.dims(),
                log_sigma.dims(),
                rho_pre.dims()
            )));
        }
        if mu.rank() < 2 {
            return Err(Error::Shape(
                "family tensors must be at least (K, d)".into(),
            ));
        }
        Ok(Self {
            mu,
            log_sigma,
            rho_pre,
        })
    }

    pub fn parts(&self) -> usize {
        self.mu.dims()[self.mu.rank() - 2]
    }

    pub fn sigma(&self) -> Result<Tensor> {
        Ok(self.log_sigma.exp()?)
    }

    pub fn rho(&self) -> Result<Tensor> {
        activate_rho(&self.rho_pre)
    }
}

/// `rho_ij = exp(r_ij) / (1 + sum_i' exp(r_i'j))`, computed with the running
/// maximum (including the implicit zero logit) subtracted.
pub fn activate_rho(rho_pre: &Tensor) -> Result<Tensor> {
    let m = rho_pre.max_keepdim(D::Minus2)?.maximum(0.0)?.detach();
    let e = rho_pre.broadcast_sub(&m)?.exp()?;
    let denom = (e.sum_keepdim(D::Minus2)? + m.neg()?.exp()?)?;
    Ok(e.broadcast_div(&denom)?)
}

/// Reparametrized draw from the correlated family given standard-normal
/// noise of the same shape.
pub fn sample_correlated(family: &CorrGaussianFamily, eps: &Tensor) -> Result<Tensor> {
    if eps.dims() != family.mu.dims() {
        return Err(Error::Shape(format!(
            "noise {:?} vs family {:?}",
            eps.dims(),
            family.mu.dims()
        )));
    }
    let rho = family.rho()?;
    let eps_sum = eps.sum_keepdim(D::Minus2)?;
    let centered = (eps - rho.broadcast_mul(&eps_sum)?)?;
    Ok((&family.mu + family.sigma()?.mul(&centered)?)?)
}

/// Analytic `Var(sum_i w_ij)` per coordinate.
///
/// The sum equals `sum_i (sigma_ij - c_j) eps_ij` with
/// `c_j = sum_k sigma_kj rho_kj`, hence `sum_i (sigma_ij - c_j)^2`. With equal
/// `sigma_.j` this is `(sum_i sigma_ij^2)(1 - sum_i rho_ij)^2`.
pub fn variance_of_sum(family: &CorrGaussianFamily) -> Result<Tensor> {
    let sigma = family.sigma()?;
    let c = (&sigma * family.rho()?)?.sum_keepdim(D::Minus2)?;
    Ok(sigma.broadcast_sub(&c)?.sqr()?.sum(D::Minus2)?)
}

/// `log |S_j| = log(1 - sum_i rho_ij)` per coordinate. Fails when some
/// coordinate has `sum_i rho_ij >= 1`.
pub fn log_det_s(rho: &Tensor) -> Result<Tensor> {
    let one_minus = rho.sum(D::Minus2)?.affine(-1.0, 1.0)?;
    let worst = one_minus
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !(worst > 0.0) {
        return Err(Error::RhoSum(1.0 - worst));
    }
    Ok(one_minus.maximum(DET_FLOOR)?.log()?)
}

fn log_det_s_clamped(rho: &Tensor) -> Result<Tensor> {
    Ok(rho
        .sum(D::Minus2)?
        .affine(-1.0, 1.0)?
        .maximum(DET_FLOOR)?
        .log()?)
}

/// Per-element KL contributions without the summation, shape `(..., K, d)`,
/// plus the log-determinant term of shape `(..., d)`.
fn kl_terms(q: &CorrGaussianFamily, p: &DiagGaussian) -> Result<(Tensor, Tensor)> {
    if p.mu.dims() != q.mu.dims() {
        return Err(Error::Shape(format!(
            "prior {:?} vs family {:?}",
            p.mu.dims(),
            q.mu.dims()
        )));
    }
    let k = q.parts() as f64;
    let rho = q.rho()?;
    // diagonal of S S^T: 1 - 2 rho + K rho^2
    let ssd = ((rho.sqr()? * k)? - (&rho * 2.0)?)?.affine(1.0, 1.0)?;
    let inv_var_p = p.log_var.neg()?.exp()?;
    let var_q = (&q.log_sigma * 2.0)?.exp()?;
    let trace = (ssd * var_q)?.mul(&inv_var_p)?;
    let maha = (&p.mu - &q.mu)?.sqr()?.mul(&inv_var_p)?;
    let log_ratio = (&p.log_var - (&q.log_sigma * 2.0)?)?;
    let per_elem = ((((trace + maha)? + log_ratio)? - 1.0)? * 0.5)?;
    Ok((per_elem, log_det_s_clamped(&rho)?))
}

/// Exact `KL(q || prod_i p_i)` summed over parts and coordinates; the output
/// keeps the leading batch axes (a scalar for `(K, d)` inputs).
pub fn kl_corr_vs_diag_batched(q: &CorrGaussianFamily, p: &DiagGaussian) -> Result<Tensor> {
    let (per_elem, log_det) = kl_terms(q, p)?;
    let kl = (per_elem.sum(D::Minus1)?.sum(D::Minus1)? - log_det.sum(D::Minus1)?)?;
    Ok(kl)
}

/// Exact KL summed over everything; errors on a non-finite result.
pub fn kl_corr_vs_diag(q: &CorrGaussianFamily, p: &DiagGaussian) -> Result<Tensor> {
    let kl = kl_corr_vs_diag_batched(q, p)?.sum_all()?;
    let v = kl.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("KL divergence".into()));
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_rel_error};
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn t(v: &[f64], shape: (usize, usize)) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, k: usize, d: usize, scale: f64) -> Tensor {
        let v: Vec<f64> = (0..k * d)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        t(&v, (k, d))
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn rho_activation_values() {
        let r = activate_rho(&t(&[0.0], (1, 1))).unwrap();
        assert!((vals(&r)[0] - 0.5).abs() < 1e-15);
        let r = activate_rho(&t(&[0.0, 0.0], (2, 1))).unwrap();
        for v in vals(&r) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let r = activate_rho(&t(&[-1e4, -1e4], (2, 1))).unwrap();
        assert!(vals(&r).iter().all(|&v| v == 0.0));
        // overflow-safe at large logits
        let r = activate_rho(&t(&[800.0, 790.0, -3.0], (3, 1))).unwrap();
        let v = vals(&r);
        assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
        assert!(v.iter().sum::<f64>() <= 1.0);
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = randn(&mut rng, 3, 2, 1.0);
        let ls = randn(&mut rng, 3, 2, 0.3);
        let eps = randn(&mut rng, 3, 2, 1.0);
        // rho -> 0 gives the independent draw
        let fam = CorrGaussianFamily::new(
            mu.clone(),
            ls.clone(),
            (mu.ones_like().unwrap() * -1e4).unwrap(),
        )
        .unwrap();
        let w = sample_correlated(&fam, &eps).unwrap();
        let expect = (&mu + (ls.exp().unwrap() * &eps).unwrap()).unwrap();
        assert!(max_abs(&w, &expect) < 1e-12);
        // eps = 0 gives the mean
        let fam =
            CorrGaussianFamily::new(mu.clone(), ls.clone(), randn(&mut rng, 3, 2, 1.0)).unwrap();
        let w = sample_correlated(&fam, &mu.zeros_like().unwrap()).unwrap();
        assert!(max_abs(&w, &mu) < 1e-15);
        assert!(sample_correlated(&fam, &t(&[0.0; 4], (2, 2))).is_err());
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        vals(a)
            .iter()
            .zip(vals(b))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn variance_of_sum_cases() {
        let fam = CorrGaussianFamily::new(
            t(&[0.0, 0.0], (2, 1)),
            t(&[0.0, 0.0], (2, 1)),
            t(&[-1e4, -1e4], (2, 1)),
        )
        .unwrap();
        assert!((vals(&variance_of_sum(&fam).unwrap())[0] - 2.0).abs() < 1e-12);
        // rho = (0.5, 0.5) cannot be reached by the activation; build the sum directly
        let sigma = [1.0, 1.0];
        let rho = [0.5, 0.5];
        let c: f64 = sigma.iter().zip(&rho).map(|(s, r)| s * r).sum();
        let v: f64 = sigma.iter().map(|s| (s - c).powi(2)).sum();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn variance_of_sum_equal_sigma_matches_squared_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fam = CorrGaussianFamily::new(
            randn(&mut rng, 4, 3, 1.0),
            t(&[0.2; 12], (4, 3)),
            randn(&mut rng, 4, 3, 1.0),
        )
        .unwrap();
        let rho = vals(&fam.rho().unwrap());
        let got = vals(&variance_of_sum(&fam).unwrap());
        for j in 0..3 {
            let s: f64 = (0..4).map(|i| rho[i * 3 + j]).sum();
            let expect = 4.0 * (0.4f64).exp() * (1.0 - s).powi(2);
            assert!((got[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn log_det_cases() {
        assert_eq!(vals(&log_det_s(&t(&[0.0, 0.0], (2, 1))).unwrap())[0], 0.0);
        let v = vals(&log_det_s(&t(&[0.25, 0.25], (2, 1))).unwrap())[0];
        // explicit 2x2: det [[0.75, -0.25], [-0.25, 0.75]] = 0.5
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
        let v = vals(&log_det_s(&t(&[0.5], (1, 1))).unwrap())[0];
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(
            log_det_s(&t(&[0.6, 0.4], (2, 1))),
            Err(Error::RhoSum(_))
        ));
    }

    #[test]
    fn kl_zero_for_identical_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mu = randn(&mut rng, 3, 4, 1.0);
        let ls = randn(&mut rng, 3, 4, 0.5);
        let q = CorrGaussianFamily::new(
            mu.clone(),
            ls.clone(),
            (mu.ones_like().unwrap() * -1e4).unwrap(),
        )
        .unwrap();
        let p = DiagGaussian::new(mu, (ls * 2.0).unwrap()).unwrap();
        let kl = kl_corr_vs_diag(&q, &p).unwrap().to_scalar::<f64>().unwrap();
        assert!(kl.abs() < 1e-12, "{kl}");
    }

    #[test]
    fn kl_converges_to_diagonal_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mu = randn(&mut rng, 3, 2, 1.0);
        let ls = randn(&mut rng, 3, 2, 0.5);
        let p = DiagGaussian::new(randn(&mut rng, 3, 2, 1.0), randn(&mut rng, 3, 2, 0.5)).unwrap();
        let diag = DiagGaussian::new(mu.clone(), (&ls * 2.0).unwrap()).unwrap();
        let expect = diag
            .kl(&p)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let mut prev = f64::INFINITY;
        for r in [-2.0, -6.0, -12.0, -30.0] {
            let q = CorrGaussianFamily::new(
                mu.clone(),
                ls.clone(),
                (mu.ones_like().unwrap() * r).unwrap(),
            )
            .unwrap();
            let kl = kl_corr_vs_diag(&q, &p).unwrap().to_scalar::<f64>().unwrap();
            let gap = (kl - expect).abs();
            assert!(gap <= prev);
            prev = gap;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn kl_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let parts = [
            randn(&mut rng, 4, 3, 1.0),
            randn(&mut rng, 4, 3, 0.4),
            randn(&mut rng, 4, 3, 1.0),
            randn(&mut rng, 4, 3, 1.0),
            randn(&mut rng, 4, 3, 0.4),
        ];
        let kl_of = |ts: &[Tensor]| {
            let q = CorrGaussianFamily::new(ts[0].clone(), ts[1].clone(), ts[2].clone()).unwrap();
            let p = DiagGaussian::new(ts[3].clone(), ts[4].clone()).unwrap();
            kl_corr_vs_diag(&q, &p).unwrap().to_scalar::<f64>().unwrap()
        };
        let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let permuted: Vec<Tensor> = parts
            .iter()
            .map(|x| x.index_select(&perm, 0).unwrap())
            .collect();
        let a = kl_of(&parts);
        let b = kl_of(&permuted);
        assert!(a >= 0.0);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vars: Vec<Var> = [1.0, 0.4, 1.0, 1.0, 0.4]
            .iter()
            .map(|&s| Var::from_tensor(&randn(&mut rng, 3, 4, s)).unwrap())
            .collect();
        let f = |v: &[Var]| -> Tensor {
            let q = CorrGaussianFamily::new(
                v[0].as_tensor().clone(),
                v[1].as_tensor().clone(),
                v[2].as_tensor().clone(),
            )
            .unwrap();
            let p = DiagGaussian::new(v[3].as_tensor().clone(), v[4].as_tensor().clone()).unwrap();
            kl_corr_vs_diag(&q, &p).unwrap()
        };
        let grads = f(&vars).backward().unwrap();
        for v in &vars {
            let analytic = vals(grads.get(v).unwrap());
            let numeric =
                central_difference(v, 1e-5, || f(&vars).to_scalar::<f64>().unwrap()).unwrap();
            let err = max_rel_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn sample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let vars: Vec<Var> = [1.0, 0.4, 1.0]
            .iter()
            .map(|&s| Var::from_tensor(&randn(&mut rng, 3, 2, s)).unwrap())
            .collect();
        let eps = randn(&mut rng, 3, 2, 1.0);
        let weights = randn(&mut rng, 3, 2, 1.0);
        // smooth downstream scalar: sum(sin(w) * weights)
        let f = |v: &[Var]| -> Tensor {
            let q = CorrGaussianFamily::new(
                v[0].as_tensor().clone(),
                v[1].as_tensor().clone(),
                v[2].as_tensor().clone(),
            )
            .unwrap();
            let w = sample_correlated(&q, &eps).unwrap();
            (w.sin().unwrap() * &weights).unwrap().sum_all().unwrap()
        };
        let grads = f(&vars).backward().unwrap();
        for v in &vars {
            let analytic = vals(grads.get(v).unwrap());
            let numeric =
                central_difference(v, 1e-5, || f(&vars).to_scalar::<f64>().unwrap()).unwrap();
            let err = max_rel_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn f32_paths_work() {
        let dev = Device::Cpu;
        let mu = Tensor::zeros((2, 3, 4), DType::F32, &dev).unwrap();
        let q = CorrGaussianFamily::new(mu.clone(), mu.clone(), mu.clone()).unwrap();
        let p = DiagGaussian::new(mu.clone(), mu.clone()).unwrap();
        let kl = kl_corr_vs_diag_batched(&q, &p).unwrap();
        assert_eq!(kl.dims(), &[2]);
        let v = kl.to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| *x > 0.0));
    }
}
